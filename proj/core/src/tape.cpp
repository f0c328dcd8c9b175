#include "fikan/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace fikan {

namespace {

Tensor::Buffer make_buf(std::vector<double> v) {
  return std::make_shared<const std::vector<double>>(std::move(v));
}

// Integer power by repeated squaring; avoids libm pow for reproducibility.
double ipow(double x, int n) {
  if (n < 0) return 1.0 / ipow(x, -n);
  double r = 1.0, b = x;
  unsigned e = static_cast<unsigned>(n);
  while (e != 0) {
    if (e & 1u) r *= b;
    b *= b;
    e >>= 1;
  }
  return r;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_binary_shapes(const Tensor& a, const Tensor& b, const char* op) {
  if (same_shape(a, b)) return;
  if (suffix_broadcastable(a.shape(), b.shape())) return;
  if (suffix_broadcastable(b.shape(), a.shape())) return;
  throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// Records a node when the tape is active and any input is recorded;
// otherwise returns a detached tensor.
Tensor finish(Tape* tape, Tape::Node n, Shape out_shape, std::vector<double> out) {
  const bool rec = tape != nullptr && (n.a >= 0 || n.b >= 0);
  auto buf = make_buf(std::move(out));
  if (!rec) return Tensor(std::move(out_shape), std::move(buf));
  n.shape = out_shape;
  n.val = buf;
  const int id = tape->record(std::move(n));
  return Tensor(std::move(out_shape), std::move(buf), id);
}

Tensor binary_op(Tape* tape, OpKind op, const Tensor& a, const Tensor& b, const char* name) {
  check_binary_shapes(a, b, name);
  Shape out_shape = a.size() >= b.size() ? a.shape() : b.shape();
  const std::size_t n = shape_size(out_shape);
  const std::size_t as = a.size(), bs = b.size();
  auto av = a.data(), bv = b.data();
  std::vector<double> out(n);
  switch (op) {
    case OpKind::kAdd:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i % as] + bv[i % bs];
      break;
    case OpKind::kSub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i % as] - bv[i % bs];
      break;
    case OpKind::kMul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i % as] * bv[i % bs];
      break;
    case OpKind::kDiv:
      for (std::size_t i = 0; i < bs; ++i)
        if (bv[i] == 0.0) throw std::domain_error("div: zero divisor");
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i % as] / bv[i % bs];
      break;
    default:
      throw std::logic_error("binary_op: bad op");
  }
  Tape::Node node;
  node.op = op;
  node.a = a.node();
  node.b = b.node();
  node.va = a.buffer();
  node.vb = b.buffer();
  return finish(tape, std::move(node), std::move(out_shape), std::move(out));
}

using UnFn = double (*)(double);

Tensor unary_op(Tape* tape, OpKind op, const Tensor& a, UnFn f) {
  const std::size_t n = a.size();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i]);
  Tape::Node node;
  node.op = op;
  node.a = a.node();
  node.va = a.buffer();
  return finish(tape, std::move(node), a.shape(), std::move(out));
}

// Accumulates `g` (shaped like the op output) into a parent gradient that may
// have been broadcast from a smaller suffix shape. Ascending order.
void reduce_accumulate(std::vector<double>& dst, std::span<const double> g) {
  const std::size_t ds = dst.size();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i % ds] += g[i];
}

}  // namespace

Tensor Tape::leaf(const Tensor& t) {
  Node n;
  n.op = OpKind::kLeaf;
  n.shape = t.shape();
  n.val = t.buffer();
  const int id = record(std::move(n));
  return t.with_node(id);
}

int Tape::record(Node n) {
  const int id = static_cast<int>(nodes_.size());
  if (n.a >= id || n.b >= id) throw std::logic_error("tape: parent id out of order");
  nodes_.push_back(std::move(n));
  return id;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, OpKind::kAdd, a, b, "add");
}
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, OpKind::kSub, a, b, "sub");
}
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, OpKind::kMul, a, b, "mul");
}
Tensor div(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(tape, OpKind::kDiv, a, b, "div");
}

Tensor neg(Tape* tape, const Tensor& a) {
  return unary_op(tape, OpKind::kNeg, a, [](double x) { return -x; });
}

Tensor pow_int(Tape* tape, const Tensor& a, int exponent) {
  if (exponent < 0) {
    for (double x : a.data())
      if (x == 0.0) throw std::domain_error("pow_int: zero base with negative exponent");
  }
  const std::size_t n = a.size();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = ipow(av[i], exponent);
  Tape::Node node;
  node.op = OpKind::kPowInt;
  node.a = a.node();
  node.va = a.buffer();
  node.p0 = static_cast<double>(exponent);
  return finish(tape, std::move(node), a.shape(), std::move(out));
}

Tensor exp(Tape* tape, const Tensor& a) {
  return unary_op(tape, OpKind::kExp, a, [](double x) { return std::exp(x); });
}

Tensor log(Tape* tape, const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) throw std::domain_error("log: non-positive input");
  return unary_op(tape, OpKind::kLog, a, [](double x) { return std::log(x); });
}

Tensor tanh(Tape* tape, const Tensor& a) {
  return unary_op(tape, OpKind::kTanh, a, [](double x) { return std::tanh(x); });
}

Tensor silu(Tape* tape, const Tensor& a) {
  return unary_op(tape, OpKind::kSilu, a, [](double x) { return x * sigmoid(x); });
}

Tensor square(Tape* tape, const Tensor& a) {
  return unary_op(tape, OpKind::kSquare, a, [](double x) { return x * x; });
}

Tensor floor_detached(const Tensor& a) {
  const std::size_t n = a.size();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::floor(av[i]);
  return Tensor(a.shape(), std::move(out));
}

Tensor clamp_detached(Tape* tape, const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp_detached: lo > hi");
  const std::size_t n = a.size();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::min(std::max(av[i], lo), hi);
  Tape::Node node;
  node.op = OpKind::kClampDetached;
  node.a = a.node();
  node.p0 = lo;
  node.p1 = hi;
  return finish(tape, std::move(node), a.shape(), std::move(out));
}

namespace {

Tensor reduce_op(Tape* tape, OpKind op, const Tensor& a, Axis axis) {
  if (a.size() == 0) throw std::invalid_argument("reduce: empty tensor");
  auto av = a.data();
  Shape out_shape;
  std::vector<double> out;
  if (axis == Axis::kAll) {
    double s = 0.0;
    for (double x : av) s += x;
    if (op == OpKind::kMean) s /= static_cast<double>(a.size());
    out_shape = Shape{};
    out = {s};
  } else {
    if (a.rank() == 0) throw std::invalid_argument("reduce: last-axis on scalar");
    const std::size_t last = a.shape().back();
    const std::size_t rows = a.size() / last;
    out_shape = Shape(a.shape().begin(), a.shape().end() - 1);
    out.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < last; ++j) s += av[r * last + j];
      out[r] = op == OpKind::kMean ? s / static_cast<double>(last) : s;
    }
  }
  Tape::Node node;
  node.op = op;
  node.a = a.node();
  node.axis = axis;
  node.m = a.rank() == 0 ? 1 : a.shape().back();  // last extent for backward
  node.k = a.size();
  return finish(tape, std::move(node), std::move(out_shape), std::move(out));
}

}  // namespace

Tensor sum(Tape* tape, const Tensor& a, Axis axis) { return reduce_op(tape, OpKind::kSum, a, axis); }
Tensor mean(Tape* tape, const Tensor& a, Axis axis) {
  return reduce_op(tape, OpKind::kMean, a, axis);
}

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 operands required");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  if (b.shape()[0] != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  const std::size_t n = b.shape()[1];
  auto av = a.data(), bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  Tape::Node node;
  node.op = OpKind::kMatmul;
  node.a = a.node();
  node.b = b.node();
  node.va = a.buffer();
  node.vb = b.buffer();
  node.m = m;
  node.k = k;
  node.n = n;
  return finish(tape, std::move(node), Shape{m, n}, std::move(out));
}

namespace {

// Maps flat output position -> flat source position for both gather modes.
struct GatherLayout {
  std::size_t last;      // source last-dim extent
  std::size_t src_rest;  // product of source leading dims
  std::size_t jdim;      // same-rank only: idx last-dim extent
  GatherMode mode;

  std::size_t src_pos(std::size_t i, double idx_val) const {
    const auto j = static_cast<long long>(idx_val);
    if (j < 0 || static_cast<std::size_t>(j) >= last)
      throw std::out_of_range("gather_lastdim: index out of range");
    const std::size_t row =
        mode == GatherMode::kBatchedRow ? i % src_rest : i / jdim;
    return row * last + static_cast<std::size_t>(j);
  }
};

GatherLayout gather_layout(const Tensor& src, const Tensor& idx, GatherMode mode) {
  if (src.rank() == 0) throw std::invalid_argument("gather_lastdim: scalar source");
  GatherLayout gl;
  gl.mode = mode;
  gl.last = src.shape().back();
  gl.src_rest = src.size() / gl.last;
  gl.jdim = 1;
  if (mode == GatherMode::kSameRank) {
    if (idx.rank() != src.rank())
      throw std::invalid_argument("gather_lastdim: same-rank mode needs equal ranks");
    for (std::size_t i = 0; i + 1 < src.rank(); ++i)
      if (idx.shape()[i] != src.shape()[i])
        throw std::invalid_argument("gather_lastdim: leading dims mismatch");
    gl.jdim = idx.shape().back();
  } else {
    const Shape lead(src.shape().begin(), src.shape().end() - 1);
    if (!suffix_broadcastable(idx.shape(), lead))
      throw std::invalid_argument("gather_lastdim: idx trailing dims must match source leading dims");
  }
  return gl;
}

}  // namespace

Tensor gather_lastdim(Tape* tape, const Tensor& src, const Tensor& idx, GatherMode mode) {
  const GatherLayout gl = gather_layout(src, idx, mode);
  auto sv = src.data(), iv = idx.data();
  const std::size_t n = idx.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = sv[gl.src_pos(i, iv[i])];
  Tape::Node node;
  node.op = OpKind::kGather;
  node.a = src.node();  // indices never carry gradient
  node.idx = idx.buffer();
  node.m = gl.last;
  node.k = gl.src_rest;
  node.n = gl.jdim;
  node.gmode = mode;
  return finish(tape, std::move(node), idx.shape(), std::move(out));
}

Tensor scatter_add_lastdim(Tape* tape, const Tensor& base, const Tensor& idx, const Tensor& vals) {
  if (base.rank() == 0) throw std::invalid_argument("scatter_add_lastdim: scalar base");
  const std::size_t last = base.shape().back();
  const Shape lead(base.shape().begin(), base.shape().end() - 1);
  if (idx.shape() != lead || vals.shape() != lead)
    throw std::invalid_argument("scatter_add_lastdim: idx/vals must match base minus last dim");
  auto bv = base.data();
  auto iv = idx.data();
  auto vv = vals.data();
  std::vector<double> out(bv.begin(), bv.end());
  const std::size_t rows = idx.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto j = static_cast<long long>(iv[r]);
    if (j < 0 || static_cast<std::size_t>(j) >= last)
      throw std::out_of_range("scatter_add_lastdim: index out of range");
    out[r * last + static_cast<std::size_t>(j)] += vv[r];
  }
  Tape::Node node;
  node.op = OpKind::kScatterAdd;
  node.a = base.node();
  node.b = vals.node();
  node.idx = idx.buffer();
  node.m = last;
  return finish(tape, std::move(node), base.shape(), std::move(out));
}

Tensor constant_like(const Tensor& t, double v) { return Tensor::full(t.shape(), v); }

Tensor iota(std::size_t n, double start, double step) {
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = start + step * static_cast<double>(i);
  return Tensor(Shape{n}, std::move(d));
}

// ---- backward ------------------------------------------------------------

std::vector<double> GradientMap::grad(const Tensor& t) const {
  if (t.node() >= 0 && !grads_[static_cast<std::size_t>(t.node())].empty())
    return grads_[static_cast<std::size_t>(t.node())];
  return std::vector<double>(t.size(), 0.0);
}

bool GradientMap::reached(const Tensor& t) const {
  return t.node() >= 0 && !grads_[static_cast<std::size_t>(t.node())].empty();
}

GradientMap backward(Tape& tape, const Tensor& loss) {
  if (!loss.recorded()) throw std::invalid_argument("backward: loss is not recorded");
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (tape.consumed()) throw std::runtime_error("backward: tape already consumed");
  tape.mark_consumed();

  std::vector<std::vector<double>> grads(tape.size());
  grads[static_cast<std::size_t>(loss.node())] = {1.0};

  auto touch = [&](int id, std::size_t size) -> std::vector<double>& {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(size, 0.0);
    return g;
  };

  for (int id = loss.node(); id >= 0; --id) {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const Tape::Node& nd = tape.node(id);
    switch (nd.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd: {
        if (nd.a >= 0) reduce_accumulate(touch(nd.a, nd.va->size()), g);
        if (nd.b >= 0) reduce_accumulate(touch(nd.b, nd.vb->size()), g);
        break;
      }
      case OpKind::kSub: {
        if (nd.a >= 0) reduce_accumulate(touch(nd.a, nd.va->size()), g);
        if (nd.b >= 0) {
          auto& db = touch(nd.b, nd.vb->size());
          const std::size_t bs = db.size();
          for (std::size_t i = 0; i < g.size(); ++i) db[i % bs] -= g[i];
        }
        break;
      }
      case OpKind::kMul: {
        const auto& av = *nd.va;
        const auto& bv = *nd.vb;
        if (nd.a >= 0) {
          auto& da = touch(nd.a, av.size());
          const std::size_t as = av.size(), bs = bv.size();
          for (std::size_t i = 0; i < g.size(); ++i) da[i % as] += g[i] * bv[i % bs];
        }
        if (nd.b >= 0) {
          auto& db = touch(nd.b, bv.size());
          const std::size_t as = av.size(), bs = bv.size();
          for (std::size_t i = 0; i < g.size(); ++i) db[i % bs] += g[i] * av[i % as];
        }
        break;
      }
      case OpKind::kDiv: {
        const auto& av = *nd.va;
        const auto& bv = *nd.vb;
        const std::size_t as = av.size(), bs = bv.size();
        if (nd.a >= 0) {
          auto& da = touch(nd.a, as);
          for (std::size_t i = 0; i < g.size(); ++i) da[i % as] += g[i] / bv[i % bs];
        }
        if (nd.b >= 0) {
          auto& db = touch(nd.b, bs);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double b = bv[i % bs];
            db[i % bs] -= g[i] * av[i % as] / (b * b);
          }
        }
        break;
      }
      case OpKind::kNeg: {
        if (nd.a < 0) break;
        auto& da = touch(nd.a, nd.va->size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] -= g[i];
        break;
      }
      case OpKind::kPowInt: {
        if (nd.a < 0) break;
        const auto& av = *nd.va;
        const int e = static_cast<int>(nd.p0);
        auto& da = touch(nd.a, av.size());
        for (std::size_t i = 0; i < g.size(); ++i)
          da[i] += g[i] * static_cast<double>(e) * ipow(av[i], e - 1);
        break;
      }
      case OpKind::kExp: {
        if (nd.a < 0) break;
        const auto& ov = *nd.val;
        auto& da = touch(nd.a, ov.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * ov[i];
        break;
      }
      case OpKind::kLog: {
        if (nd.a < 0) break;
        const auto& av = *nd.va;
        auto& da = touch(nd.a, av.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / av[i];
        break;
      }
      case OpKind::kTanh: {
        if (nd.a < 0) break;
        const auto& ov = *nd.val;
        auto& da = touch(nd.a, ov.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - ov[i] * ov[i]);
        break;
      }
      case OpKind::kSilu: {
        if (nd.a < 0) break;
        const auto& av = *nd.va;
        auto& da = touch(nd.a, av.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = sigmoid(av[i]);
          da[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
        }
        break;
      }
      case OpKind::kSquare: {
        if (nd.a < 0) break;
        const auto& av = *nd.va;
        auto& da = touch(nd.a, av.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += 2.0 * av[i] * g[i];
        break;
      }
      case OpKind::kClampDetached: {
        if (nd.a < 0) break;
        auto& da = touch(nd.a, g.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];  // straight-through
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        if (nd.a < 0) break;
        const std::size_t total = nd.k;
        auto& da = touch(nd.a, total);
        if (nd.axis == Axis::kAll) {
          const double scale =
              nd.op == OpKind::kMean ? g[0] / static_cast<double>(total) : g[0];
          for (std::size_t i = 0; i < total; ++i) da[i] += scale;
        } else {
          const std::size_t last = nd.m;
          const double inv = nd.op == OpKind::kMean ? 1.0 / static_cast<double>(last) : 1.0;
          for (std::size_t r = 0; r < g.size(); ++r) {
            const double gr = g[r] * inv;
            for (std::size_t j = 0; j < last; ++j) da[r * last + j] += gr;
          }
        }
        break;
      }
      case OpKind::kMatmul: {
        const auto& av = *nd.va;
        const auto& bv = *nd.vb;
        const std::size_t m = nd.m, k = nd.k, n = nd.n;
        if (nd.a >= 0) {  // dA = G . B^T
          auto& da = touch(nd.a, m * k);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* grow = &g[i * n];
              const double* brow = &bv[p * n];
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              da[i * k + p] += s;
            }
        }
        if (nd.b >= 0) {  // dB = A^T . G
          auto& db = touch(nd.b, k * n);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              if (aip == 0.0) continue;
              const double* grow = &g[i * n];
              double* drow = &db[p * n];
              for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
            }
        }
        break;
      }
      case OpKind::kGather: {
        if (nd.a < 0) break;
        const auto& iv = *nd.idx;
        const std::size_t last = nd.m, src_rest = nd.k, jdim = nd.n;
        auto& da = touch(nd.a, last * src_rest);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t row =
              nd.gmode == GatherMode::kBatchedRow ? i % src_rest : i / jdim;
          da[row * last + static_cast<std::size_t>(iv[i])] += g[i];
        }
        break;
      }
      case OpKind::kScatterAdd: {
        const std::size_t last = nd.m;
        const auto& iv = *nd.idx;
        if (nd.a >= 0) {  // base gradient is identity
          auto& da = touch(nd.a, g.size());
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (nd.b >= 0) {  // vals gradient gathers at the scattered positions
          auto& db = touch(nd.b, iv.size());
          for (std::size_t r = 0; r < iv.size(); ++r)
            db[r] += g[r * last + static_cast<std::size_t>(iv[r])];
        }
        break;
      }
    }
  }
  return GradientMap(std::move(grads), &tape);
}

}  // namespace fikan
