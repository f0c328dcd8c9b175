#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fikan/tensor.hpp"

namespace fikan {

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kPowInt,
  kExp,
  kLog,
  kTanh,
  kSilu,
  kClampDetached,
  kSum,
  kMean,
  kMatmul,
  kGather,
  kScatterAdd,
  kSquare,
};

enum class Axis : std::uint8_t { kAll, kLast };

// Index layout for gather_lastdim. kBatchedRow: idx trailing dims equal the
// source's leading dims (extra leading dims of idx broadcast the source row
// lookup); result shape = idx shape. kSameRank: idx has the source's leading
// dims plus a new last dim J; result[s.., j] = src[s.., idx[s.., j]].
enum class GatherMode : std::uint8_t { kBatchedRow, kSameRank };

// Reverse-mode tape over tensor ops. Append-only; parents always precede
// their consumers, and backward() visits nodes exactly once in reverse id
// order with fixed-order accumulation, so gradients are bit-reproducible.
// Single-threaded; one tape per training step.
class Tape {
 public:
  struct Node {
    OpKind op;
    Shape shape;
    int a = -1;  // parent ids
    int b = -1;
    Tensor::Buffer val;         // this node's output values
    Tensor::Buffer va, vb;      // operand snapshots where backward needs them
    Tensor::Buffer idx;         // gather/scatter index values
    double p0 = 0.0, p1 = 0.0;  // op-specific scalars (exponent, clamp lo/hi)
    std::size_t m = 0, k = 0, n = 0;  // matmul dims
    GatherMode gmode = GatherMode::kBatchedRow;
    Axis axis = Axis::kAll;
  };

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  // Registers a parameter/input; shares the buffer, no copy.
  Tensor leaf(const Tensor& t);

  int record(Node n);

  bool consumed() const { return consumed_; }
  void mark_consumed() { consumed_ = true; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Gradient of a scalar loss with respect to every recorded node, exposed by
// node id. Unreached nodes yield zeros.
class GradientMap {
 public:
  GradientMap(std::vector<std::vector<double>> grads, const Tape* tape)
      : grads_(std::move(grads)), tape_(tape) {}

  // Gradient for the tensor's node; zeros if the node was never reached.
  std::vector<double> grad(const Tensor& t) const;
  bool reached(const Tensor& t) const;

 private:
  std::vector<std::vector<double>> grads_;
  const Tape* tape_;
};

// Accumulates d(loss)/d(node) over the whole tape. `loss` must be a recorded
// scalar; a tape can be consumed once.
GradientMap backward(Tape& tape, const Tensor& loss);

// ---- op set ------------------------------------------------------------
// Every op records onto `tape` when it is non-null and any input is
// recorded; with tape == nullptr they run as plain evaluation.

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor div(Tape* tape, const Tensor& a, const Tensor& b);
Tensor neg(Tape* tape, const Tensor& a);
Tensor pow_int(Tape* tape, const Tensor& a, int exponent);
Tensor exp(Tape* tape, const Tensor& a);
Tensor log(Tape* tape, const Tensor& a);
Tensor tanh(Tape* tape, const Tensor& a);
Tensor silu(Tape* tape, const Tensor& a);
Tensor square(Tape* tape, const Tensor& a);

// floor(a); the result never carries gradient.
Tensor floor_detached(const Tensor& a);
// clamp(a, lo, hi) with straight-through gradient (the clamp itself is
// excluded from differentiation).
Tensor clamp_detached(Tape* tape, const Tensor& a, double lo, double hi);

Tensor sum(Tape* tape, const Tensor& a, Axis axis = Axis::kAll);
Tensor mean(Tape* tape, const Tensor& a, Axis axis = Axis::kAll);

// (m x k) . (k x n); higher-rank lhs is treated as (batch*m) rows via reshape
// by the caller.
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);

// Gathers along the source's last dim; `idx` holds integer-valued doubles and
// never receives gradient. Gradients scatter back to the gathered positions
// in ascending flat order.
Tensor gather_lastdim(Tape* tape, const Tensor& src, const Tensor& idx, GatherMode mode);

// out = base, then out[s.., idx[s..]] += vals[s..]; idx/vals shaped like base
// minus its last dim. Index gradient is identically zero.
Tensor scatter_add_lastdim(Tape* tape, const Tensor& base, const Tensor& idx, const Tensor& vals);

// Convenience constants/helpers (detached).
Tensor constant_like(const Tensor& t, double v);
Tensor iota(std::size_t n, double start = 0.0, double step = 1.0);

}  // namespace fikan
