#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace fikan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

// Immutable f64 tensor, row-major. `node` is the handle into the recording
// tape (-1 when detached). Buffers are shared between tensors and tape nodes;
// all mutation goes through constructing new tensors.
class Tensor {
 public:
  using Buffer = std::shared_ptr<const std::vector<double>>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, int node = -1)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(data))),
        node_(node) {
    if (data_->size() != shape_size(shape_))
      throw std::invalid_argument("tensor: data length does not match shape");
  }
  Tensor(Shape shape, Buffer data, int node = -1)
      : shape_(std::move(shape)), data_(std::move(data)), node_(node) {
    if (data_->size() != shape_size(shape_))
      throw std::invalid_argument("tensor: data length does not match shape");
  }

  static Tensor zeros(Shape shape) {
    std::vector<double> d(shape_size(shape), 0.0);
    return Tensor(std::move(shape), std::move(d));
  }
  static Tensor full(Shape shape, double v) {
    std::vector<double> d(shape_size(shape), v);
    return Tensor(std::move(shape), std::move(d));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::span<const double> data() const { return *data_; }
  const Buffer& buffer() const { return data_; }
  double at(std::size_t i) const { return (*data_)[i]; }
  double item() const {
    if (size() != 1) throw std::invalid_argument("tensor: item() on non-scalar");
    return (*data_)[0];
  }

  int node() const { return node_; }
  bool recorded() const { return node_ >= 0; }
  Tensor detached() const { return Tensor(shape_, data_, -1); }
  Tensor with_node(int node) const { return Tensor(shape_, data_, node); }

  // Same buffer, new shape (element count must match).
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw std::invalid_argument("tensor: reshape changes element count");
    return Tensor(std::move(shape), data_, node_);
  }

 private:
  Shape shape_;
  Buffer data_;
  int node_ = -1;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// True when `small` matches the trailing dims of `big` (leading-batch
// broadcast; scalars always qualify).
inline bool suffix_broadcastable(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  const std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i)
    if (big[off + i] != small[i]) return false;
  return true;
}

}  // namespace fikan
