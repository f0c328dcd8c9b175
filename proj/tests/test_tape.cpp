#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "fikan/rng.hpp"
#include "fikan/tape.hpp"
#include "fikan/tensor.hpp"

using namespace fikan;

namespace {

// Central finite differences of a scalar function of a flat parameter vector.
std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f,
                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

void check_close_rel(const std::vector<double>& got, const std::vector<double>& want,
                     double rel_tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double scale = std::max({std::abs(got[i]), std::abs(want[i]), 1e-8});
    CHECK(std::abs(got[i] - want[i]) / scale < rel_tol);
  }
}

std::vector<double> random_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Builds loss(params) on a fresh tape and returns the engine gradient.
std::vector<double> engine_grad(
    const std::function<Tensor(Tape&, const Tensor&)>& build, const Shape& shape,
    const std::vector<double>& x) {
  Tape tape;
  Tensor p = tape.leaf(Tensor(shape, x));
  Tensor loss = build(tape, p);
  return backward(tape, loss).grad(p);
}

double eval_loss(const std::function<Tensor(Tape&, const Tensor&)>& build, const Shape& shape,
                 const std::vector<double>& x) {
  Tape tape;
  Tensor p = tape.leaf(Tensor(shape, x));
  return build(tape, p).item();
}

void check_op_grad(const std::function<Tensor(Tape&, const Tensor&)>& build, const Shape& shape,
                   const std::vector<double>& x, double rel_tol = 1e-4) {
  auto g = engine_grad(build, shape, x);
  auto fd = fd_grad([&](const std::vector<double>& v) { return eval_loss(build, shape, v); }, x);
  check_close_rel(g, fd, rel_tol);
}

}  // namespace

TEST_CASE("elementary values") {
  Tape tape;
  CHECK(silu(&tape, Tensor::scalar(0.0)).item() == 0.0);
  CHECK(tanh(&tape, Tensor::scalar(0.0)).item() == 0.0);

  Tensor x = tape.leaf(Tensor::scalar(0.0));
  Tensor y = tanh(&tape, x);
  auto g = backward(tape, y).grad(x);
  CHECK(g[0] == 1.0);
}

TEST_CASE("gradient of sum(x*x) matches hand value") {
  Tape tape;
  Tensor x = tape.leaf(Tensor(Shape{3}, {1.0, 2.0, 3.0}));
  Tensor loss = sum(&tape, mul(&tape, x, x));
  auto g = backward(tape, loss).grad(x);
  // frozen from the central-difference oracle (h=1e-6): (2, 4, 6)
  auto fd = fd_grad(
      [](const std::vector<double>& v) {
        double s = 0.0;
        for (double e : v) s += e * e;
        return s;
      },
      {1.0, 2.0, 3.0}, 1e-6);
  check_close_rel(g, fd, 1e-6);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(g[2] == doctest::Approx(6.0));
}

TEST_CASE("every op matches central finite differences") {
  Rng rng(2024);

  SUBCASE("add") {
    auto b = Tensor(Shape{4}, random_vec(4, rng));
    check_op_grad([&](Tape& t, const Tensor& p) { return sum(&t, add(&t, p, b)); }, Shape{4},
                  random_vec(4, rng));
  }
  SUBCASE("sub both sides") {
    auto b = Tensor(Shape{4}, random_vec(4, rng));
    check_op_grad([&](Tape& t, const Tensor& p) { return sum(&t, sub(&t, b, p)); }, Shape{4},
                  random_vec(4, rng));
  }
  SUBCASE("mul") {
    auto b = Tensor(Shape{4}, random_vec(4, rng));
    check_op_grad(
        [&](Tape& t, const Tensor& p) { return sum(&t, mul(&t, p, mul(&t, p, b))); }, Shape{4},
        random_vec(4, rng));
  }
  SUBCASE("div") {
    auto b = Tensor(Shape{4}, random_vec(4, rng, 0.5, 1.5));
    check_op_grad([&](Tape& t, const Tensor& p) { return sum(&t, div(&t, b, p)); }, Shape{4},
                  random_vec(4, rng, 0.5, 1.5));
  }
  SUBCASE("neg") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, neg(&t, p)); }, Shape{4},
                  random_vec(4, rng));
  }
  SUBCASE("pow_int") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, pow_int(&t, p, 3)); }, Shape{4},
                  random_vec(4, rng));
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, pow_int(&t, p, -2)); }, Shape{4},
                  random_vec(4, rng, 0.5, 1.0));
  }
  SUBCASE("exp") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, exp(&t, p)); }, Shape{4},
                  random_vec(4, rng));
  }
  SUBCASE("log") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, log(&t, p)); }, Shape{4},
                  random_vec(4, rng, 0.1, 1.0));
  }
  SUBCASE("tanh") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, tanh(&t, p)); }, Shape{4},
                  random_vec(4, rng));
  }
  SUBCASE("silu") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, silu(&t, p)); }, Shape{4},
                  random_vec(4, rng));
  }
  SUBCASE("square") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, square(&t, p)); }, Shape{4},
                  random_vec(4, rng));
  }
  SUBCASE("clamp_detached inside range is straight-through") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, clamp_detached(&t, p, -2.0, 2.0)); },
                  Shape{4}, random_vec(4, rng));
  }
  SUBCASE("sum and mean over all and last axis") {
    check_op_grad([](Tape& t, const Tensor& p) { return sum(&t, p); }, Shape{2, 3},
                  random_vec(6, rng));
    check_op_grad([](Tape& t, const Tensor& p) { return mean(&t, p); }, Shape{2, 3},
                  random_vec(6, rng));
    check_op_grad(
        [](Tape& t, const Tensor& p) { return sum(&t, square(&t, sum(&t, p, Axis::kLast))); },
        Shape{2, 3}, random_vec(6, rng));
    check_op_grad(
        [](Tape& t, const Tensor& p) { return sum(&t, square(&t, mean(&t, p, Axis::kLast))); },
        Shape{2, 3}, random_vec(6, rng));
  }
  SUBCASE("matmul, both operands") {
    auto b = Tensor(Shape{3, 2}, random_vec(6, rng));
    check_op_grad(
        [&](Tape& t, const Tensor& p) { return sum(&t, square(&t, matmul(&t, p, b))); },
        Shape{2, 3}, random_vec(6, rng));
    auto a = Tensor(Shape{2, 3}, random_vec(6, rng));
    check_op_grad(
        [&](Tape& t, const Tensor& p) { return sum(&t, square(&t, matmul(&t, a, p))); },
        Shape{3, 2}, random_vec(6, rng));
  }
  SUBCASE("gather_lastdim batched-row mode") {
    Tensor idx(Shape{3, 2}, {0.0, 2.0, 1.0, 0.0, 2.0, 2.0});
    check_op_grad(
        [&](Tape& t, const Tensor& p) {
          return sum(&t, square(&t, gather_lastdim(&t, p, idx, GatherMode::kBatchedRow)));
        },
        Shape{2, 3}, random_vec(6, rng));
  }
  SUBCASE("gather_lastdim same-rank mode") {
    Tensor idx(Shape{2, 2}, {2.0, 0.0, 1.0, 1.0});
    check_op_grad(
        [&](Tape& t, const Tensor& p) {
          return sum(&t, square(&t, gather_lastdim(&t, p, idx, GatherMode::kSameRank)));
        },
        Shape{2, 3}, random_vec(6, rng));
  }
  SUBCASE("scatter_add_lastdim, base and vals") {
    Tensor idx(Shape{2}, {1.0, 0.0});
    auto vals = Tensor(Shape{2}, random_vec(2, rng));
    check_op_grad(
        [&](Tape& t, const Tensor& p) {
          Tensor v = t.leaf(vals);
          return sum(&t, square(&t, scatter_add_lastdim(&t, p, idx, v)));
        },
        Shape{2, 3}, random_vec(6, rng));
    auto base = Tensor(Shape{2, 3}, random_vec(6, rng));
    check_op_grad(
        [&](Tape& t, const Tensor& p) {
          return sum(&t, square(&t, scatter_add_lastdim(&t, base, idx, p)));
        },
        Shape{2}, random_vec(2, rng));
  }
  SUBCASE("broadcast binary ops, suffix expansion") {
    auto small = Tensor(Shape{3}, random_vec(3, rng));
    check_op_grad(
        [&](Tape& t, const Tensor& p) { return sum(&t, mul(&t, p, small)); }, Shape{2, 3},
        random_vec(6, rng));
    // gradient flows into the broadcast (small) side too
    auto big = Tensor(Shape{2, 3}, random_vec(6, rng));
    check_op_grad(
        [&](Tape& t, const Tensor& p) { return sum(&t, square(&t, mul(&t, big, p))); }, Shape{3},
        random_vec(3, rng));
  }
}

TEST_CASE("floor_detached output carries no gradient") {
  Tape tape;
  Tensor x = tape.leaf(Tensor(Shape{3}, {0.4, 1.7, -0.3}));
  Tensor j = floor_detached(mul(&tape, x, Tensor::scalar(4.0)));
  CHECK_FALSE(j.recorded());
  CHECK(j.at(0) == 1.0);
  CHECK(j.at(1) == 6.0);
  CHECK(j.at(2) == -2.0);
  // j enters downstream math as a constant; only the smooth path gets gradient
  Tensor t = sub(&tape, mul(&tape, x, Tensor::scalar(4.0)), j);
  Tensor loss = sum(&tape, t);
  auto g = backward(tape, loss).grad(x);
  for (double v : g) CHECK(v == 4.0);
}

TEST_CASE("constant loss gives zero gradients everywhere") {
  Tape tape;
  Tensor w = tape.leaf(Tensor(Shape{2}, {0.3, -0.4}));
  Tensor c = tape.leaf(Tensor::scalar(7.0));
  Tensor loss = sum(&tape, c);
  auto gm = backward(tape, loss);
  auto g = gm.grad(w);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK_FALSE(gm.reached(w));
}

TEST_CASE("loss = w.x with detached x gives grad w = x") {
  Tape tape;
  Tensor w = tape.leaf(Tensor(Shape{3}, {0.1, 0.2, 0.3}));
  Tensor x(Shape{3}, {1.5, -2.0, 0.5});  // detached
  Tensor loss = sum(&tape, mul(&tape, w, x));
  auto g = backward(tape, loss).grad(w);
  CHECK(g[0] == 1.5);
  CHECK(g[1] == -2.0);
  CHECK(g[2] == 0.5);
}

TEST_CASE("backward errors") {
  SUBCASE("loss not scalar") {
    Tape tape;
    Tensor w = tape.leaf(Tensor(Shape{2}, {1.0, 2.0}));
    CHECK_THROWS_AS((void)backward(tape, w), std::invalid_argument);
  }
  SUBCASE("loss not recorded") {
    Tape tape;
    CHECK_THROWS_AS((void)backward(tape, Tensor::scalar(1.0)), std::invalid_argument);
  }
  SUBCASE("tape consumed twice") {
    Tape tape;
    Tensor w = tape.leaf(Tensor::scalar(2.0));
    Tensor loss = square(&tape, w);
    (void)backward(tape, loss);
    CHECK_THROWS_AS((void)backward(tape, loss), std::runtime_error);
  }
}

TEST_CASE("op input validation") {
  Tape tape;
  CHECK_THROWS_AS((void)add(&tape, Tensor(Shape{2}, {1, 2}), Tensor(Shape{3}, {1, 2, 3})),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)log(&tape, Tensor(Shape{1}, {-1.0})), std::domain_error);
  CHECK_THROWS_AS((void)div(&tape, Tensor::scalar(1.0), Tensor::scalar(0.0)), std::domain_error);
  CHECK_THROWS_AS(
      (void)gather_lastdim(&tape, Tensor(Shape{2, 2}, {1, 2, 3, 4}),
                           Tensor(Shape{2}, {0.0, 5.0}), GatherMode::kBatchedRow),
      std::out_of_range);
  CHECK_THROWS_AS((void)matmul(&tape, Tensor(Shape{2, 2}, {1, 2, 3, 4}),
                               Tensor(Shape{3, 2}, {1, 2, 3, 4, 5, 6})),
                  std::invalid_argument);
}

TEST_CASE("two independent tapes produce bit-identical gradients") {
  Rng rng(7);
  auto x = random_vec(12, rng);
  // basis-like mix of gather/scatter/elementwise
  auto pipeline = [&]() {
    Tape tape;
    Tensor p = tape.leaf(Tensor(Shape{3, 4}, x));
    Tensor idx(Shape{3}, {1.0, 3.0, 0.0});
    Tensor picked = gather_lastdim(&tape, p, idx, GatherMode::kBatchedRow);
    Tensor acc = scatter_add_lastdim(&tape, p, idx, silu(&tape, picked));
    Tensor loss = mean(&tape, square(&tape, acc));
    return backward(tape, loss).grad(p);
  };
  auto g1 = pipeline();
  auto g2 = pipeline();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}
