#include <doctest.h>

#include <cmath>

#include "ngf/errors.hpp"
#include "ngf/optim.hpp"
#include "oracles.hpp"

using namespace ngf;
using namespace ngf::optim;
using numerics::RngState;
using numerics::SquareMatrix;
using numerics::Vector;

namespace {

Hyper with_lr(double lr) {
  Hyper h;
  h.lr = lr;
  return h;
}

double rosenbrock(const Vector& p) {
  const double a = 1.0 - p[0], b = p[1] - p[0] * p[0];
  return a * a + 10.0 * b * b;
}

Vector rosenbrock_grad(std::span<const double> p) {
  const double b = p[1] - p[0] * p[0];
  return {-2.0 * (1.0 - p[0]) - 40.0 * p[0] * b, 20.0 * b};
}

}  // namespace

TEST_CASE("sgd hand example and zero gradient") {
  auto st = OptimizerState::make(OptimizerKind::sgd, 2, with_lr(0.1));
  const Vector out = first_order_step(st, Vector{0, 0}, Vector{1, -2});
  CHECK(out[0] == doctest::Approx(-0.1).epsilon(1e-15));
  CHECK(out[1] == doctest::Approx(0.2).epsilon(1e-15));

  auto st2 = OptimizerState::make(OptimizerKind::sgd, 3, with_lr(0.5));
  const Vector p{1.5, -2.0, 3.25};
  CHECK(first_order_step(st2, p, Vector{0, 0, 0}) == p);
}

TEST_CASE("sgd momentum accumulates velocity") {
  Hyper h = with_lr(0.1);
  h.momentum = 0.9;
  auto st = OptimizerState::make(OptimizerKind::sgd, 1, h);
  Vector p{0.0};
  p = first_order_step(st, p, Vector{1.0});
  CHECK(p[0] == doctest::Approx(-0.1));
  p = first_order_step(st, p, Vector{1.0});
  // velocity 1.9
  CHECK(p[0] == doctest::Approx(-0.1 - 0.19));
}

TEST_CASE("adam first step matches a scalar hand trace") {
  Hyper h = with_lr(0.01);
  auto st = OptimizerState::make(OptimizerKind::adam, 3, h);
  const Vector g{0.3, -2.0, 1e-3};
  const Vector out = first_order_step(st, Vector{0, 0, 0}, g);
  for (std::size_t i = 0; i < 3; ++i) {
    const double m = 0.1 * g[i], v = 0.001 * g[i] * g[i];
    const double m_hat = m / (1 - 0.9), v_hat = v / (1 - 0.999);
    const double expect = -0.01 * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(out[i] == doctest::Approx(expect).epsilon(1e-12));
    // step one is lr times a sign-like ratio
    CHECK(std::abs(out[i]) == doctest::Approx(0.01).epsilon(1e-4));
  }
  CHECK(st.steps == 1);

  // second step by hand
  const Vector g2{-0.1, 0.5, 2.0};
  const Vector out2 = first_order_step(st, out, g2);
  for (std::size_t i = 0; i < 3; ++i) {
    const double m = 0.9 * 0.1 * g[i] + 0.1 * g2[i];
    const double v = 0.999 * 0.001 * g[i] * g[i] + 0.001 * g2[i] * g2[i];
    const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
    CHECK(out2[i] == doctest::Approx(out[i] - 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("adagrad and rmsprop hand traces") {
  auto ag = OptimizerState::make(OptimizerKind::adagrad, 1, with_lr(0.1));
  Vector p{1.0};
  p = first_order_step(ag, p, Vector{2.0});
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)));
  p = first_order_step(ag, p, Vector{1.0});
  CHECK(p[0] == doctest::Approx(0.9 - 0.1 / (std::sqrt(5.0) + 1e-8)));

  auto rp = OptimizerState::make(OptimizerKind::rmsprop, 1, with_lr(0.01));
  Vector q{0.0};
  q = first_order_step(rp, q, Vector{3.0});
  CHECK(q[0] == doctest::Approx(-0.01 * 3.0 / (std::sqrt(0.01 * 9.0) + 1e-8)));
}

TEST_CASE("first-order steps reject length mismatches") {
  auto st = OptimizerState::make(OptimizerKind::adam, 3);
  CHECK_THROWS_AS(first_order_step(st, Vector{0, 0}, Vector{1, 1}), DimensionError);
  CHECK_THROWS_AS(first_order_step(st, Vector{0, 0, 0}, Vector{1}), DimensionError);
}

TEST_CASE("hyperparameter validation") {
  CHECK_THROWS_AS(OptimizerState::make(OptimizerKind::sgd, 2, with_lr(0.0)), ConfigError);
  Hyper h;
  h.beta1 = 1.0;
  CHECK_THROWS_AS(OptimizerState::make(OptimizerKind::adam, 2, h), ConfigError);
  Hyper r;
  r.rho = 0.0;
  CHECK_THROWS_AS(OptimizerState::make(OptimizerKind::sam, 2, r), ConfigError);
  Hyper d;
  d.damping = -1.0;
  CHECK_THROWS_AS(OptimizerState::make(OptimizerKind::ngd, 2, d), ConfigError);
  CHECK_THROWS_AS(parse_optimizer("lbfgs"), ConfigError);
  for (auto k : {OptimizerKind::sgd, OptimizerKind::adagrad, OptimizerKind::rmsprop, OptimizerKind::adam,
                 OptimizerKind::sam, OptimizerKind::ngd})
    CHECK(parse_optimizer(to_string(k)) == k);
}

TEST_CASE("sam on a 1-d quadratic") {
  // L = 0.5 * a * x^2, g = a x; the ascent point is x + rho * sign(x).
  const double a = 3.0;
  int calls = 0;
  GradFn grad = [&](std::span<const double> p) {
    ++calls;
    return Vector{a * p[0]};
  };
  Hyper h = with_lr(0.1);
  h.rho = 0.05;
  auto st = OptimizerState::make(OptimizerKind::sam, 1, h);
  const Vector out = sam_step(st, Vector{2.0}, grad);
  CHECK(calls == 2);
  CHECK(out[0] == doctest::Approx(2.0 - 0.1 * a * (2.0 + 0.05)).epsilon(1e-14));

  const Vector neg = sam_step(st, Vector{-1.0}, grad);
  CHECK(neg[0] == doctest::Approx(-1.0 - 0.1 * a * (-1.0 - 0.05)).epsilon(1e-14));
}

TEST_CASE("sam reduces to sgd as rho shrinks and stays at a minimum") {
  GradFn grad = [](std::span<const double> p) { return Vector{p[0], 4.0 * p[1]}; };
  const Vector p{0.7, -0.3};
  auto sgd = OptimizerState::make(OptimizerKind::sgd, 2, with_lr(0.1));
  const Vector ref = first_order_step(sgd, p, grad(p));
  for (double rho : {1e-2, 1e-4, 1e-6}) {
    Hyper h = with_lr(0.1);
    h.rho = rho;
    auto st = OptimizerState::make(OptimizerKind::sam, 2, h);
    const Vector out = sam_step(st, p, grad);
    const double diff = std::hypot(out[0] - ref[0], out[1] - ref[1]);
    CHECK(diff <= 0.1 * 4.0 * rho * 1.0000001);
  }
  int calls = 0;
  GradFn zero = [&](std::span<const double>) {
    ++calls;
    return Vector{0.0, 0.0};
  };
  auto st = OptimizerState::make(OptimizerKind::sam, 2);
  CHECK(sam_step(st, Vector{1.0, 2.0}, zero) == Vector{1.0, 2.0});
  CHECK(calls == 1);
}

TEST_CASE("ngd diagonal hand example") {
  Hyper h = with_lr(1.0);
  h.damping = 0.0;
  auto st = OptimizerState::make(OptimizerKind::ngd, 2, h);
  const auto step = ngd_step(st, Vector{0, 0}, Vector{4, 1}, SquareMatrix::diagonal(Vector{4, 1}));
  CHECK(step.params[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(step.params[1] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(step.retries == 0);
  CHECK(step.damping == 0.0);
}

TEST_CASE("ngd with identity Fisher reproduces sgd") {
  RngState rng(11);
  for (std::size_t dim : {1u, 5u, 40u}) {
    const Vector p = numerics::draw_gaussian(rng, dim), g = numerics::draw_gaussian(rng, dim);
    Hyper h = with_lr(0.037);
    h.damping = 0.0;
    auto ngd = OptimizerState::make(OptimizerKind::ngd, dim, h);
    auto sgd = OptimizerState::make(OptimizerKind::sgd, dim, with_lr(0.037));
    const auto a = ngd_step(ngd, p, g, SquareMatrix::identity(dim)).params;
    const auto b = first_order_step(sgd, p, g);
    for (std::size_t i = 0; i < dim; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-12);
  }
}

TEST_CASE("ngd matches the dense-inverse product on random SPD Fishers") {
  RngState rng(12);
  for (std::size_t dim : {2u, 7u, 20u, 50u}) {
    const SquareMatrix f = oracle::random_spd(dim, rng);
    const Vector p = numerics::draw_gaussian(rng, dim), g = numerics::draw_gaussian(rng, dim);
    Hyper h = with_lr(0.3);
    h.damping = 0.0;
    auto st = OptimizerState::make(OptimizerKind::ngd, dim, h);
    const auto got = ngd_step(st, p, g, f).params;
    const SquareMatrix inv = oracle::dense_inverse(f);
    const Vector dir = inv.multiply(g);
    for (std::size_t i = 0; i < dim; ++i) CHECK(std::abs(got[i] - (p[i] - 0.3 * dir[i])) <= 1e-8);
  }
}

TEST_CASE("ngd is invariant to scaling Fisher and lr together") {
  RngState rng(13);
  const std::size_t dim = 12;
  const SquareMatrix f = oracle::random_spd(dim, rng);
  const Vector p = numerics::draw_gaussian(rng, dim), g = numerics::draw_gaussian(rng, dim);
  Hyper h = with_lr(0.05);
  h.damping = 0.0;
  auto base = OptimizerState::make(OptimizerKind::ngd, dim, h);
  const auto ref = ngd_step(base, p, g, f).params;
  for (double c : {0.01, 3.0, 250.0}) {
    SquareMatrix fc = f;
    for (auto& v : fc.data()) v *= c;
    Hyper hc = h;
    hc.lr = h.lr * c;
    auto st = OptimizerState::make(OptimizerKind::ngd, dim, hc);
    const auto got = ngd_step(st, p, g, fc).params;
    for (std::size_t i = 0; i < dim; ++i) CHECK(std::abs(got[i] - ref[i]) <= 1e-10);
  }
}

TEST_CASE("ngd default damping and escalation") {
  const SquareMatrix f = SquareMatrix::diagonal(Vector{2.0, 4.0});
  CHECK(default_damping(f) == doctest::Approx(1e-4 * 3.0));
  auto st = OptimizerState::make(OptimizerKind::ngd, 2, with_lr(1.0));
  const auto step = ngd_step(st, Vector{0, 0}, Vector{2, 4}, f);
  CHECK(step.damping == doctest::Approx(3e-4));
  CHECK(step.params[0] == doctest::Approx(-2.0 / (2.0 + 3e-4)));

  // Singular PSD matrix with zero damping: escalation must rescue the solve.
  SquareMatrix singular(2, 1.0);
  Hyper h = with_lr(1.0);
  h.damping = 0.0;
  auto st0 = OptimizerState::make(OptimizerKind::ngd, 2, h);
  const auto rescued = ngd_step(st0, Vector{0, 0}, Vector{1, 1}, singular);
  CHECK(rescued.retries >= 1);
  CHECK(rescued.damping > 0.0);
  CHECK(std::isfinite(rescued.params[0]));

  // Strongly indefinite: three x10 escalations of a tiny damping cannot help.
  SquareMatrix neg = SquareMatrix::diagonal(Vector{-5.0, 1.0});
  Hyper hn = with_lr(1.0);
  hn.damping = 1e-6;
  auto stn = OptimizerState::make(OptimizerKind::ngd, 2, hn);
  CHECK_THROWS_AS(ngd_step(stn, Vector{0, 0}, Vector{1, 1}, neg), OptimizerError);

  CHECK_THROWS_AS(ngd_step(st, Vector{0, 0}, Vector{1, 1}, SquareMatrix::identity(3)), DimensionError);
}

TEST_CASE("step functions are deterministic") {
  for (auto k : {OptimizerKind::sgd, OptimizerKind::adagrad, OptimizerKind::rmsprop, OptimizerKind::adam}) {
    auto a = OptimizerState::make(k, 2), b = OptimizerState::make(k, 2);
    Vector pa{0.3, 0.4}, pb{0.3, 0.4};
    for (int i = 0; i < 5; ++i) {
      pa = first_order_step(a, pa, rosenbrock_grad(pa));
      pb = first_order_step(b, pb, rosenbrock_grad(pb));
    }
    CHECK(pa == pb);
  }
}

TEST_CASE("every optimizer decreases a Rosenbrock-style objective") {
  const Vector start{-0.5, 0.8};
  const double l0 = rosenbrock(start);
  for (auto k : {OptimizerKind::sgd, OptimizerKind::adagrad, OptimizerKind::rmsprop, OptimizerKind::adam,
                 OptimizerKind::sam}) {
    auto st = OptimizerState::make(k, 2);
    Vector p = start;
    for (int i = 0; i < 100; ++i)
      p = k == OptimizerKind::sam ? sam_step(st, p, rosenbrock_grad) : first_order_step(st, p, rosenbrock_grad(p));
    INFO(to_string(k));
    CHECK(rosenbrock(p) < l0);
  }
  // ngd with the Gauss-Newton matrix of the residuals (1 - x, sqrt(10)(y - x^2)).
  auto st = OptimizerState::make(OptimizerKind::ngd, 2);
  Vector p = start;
  for (int i = 0; i < 100; ++i) {
    const double j00 = -1.0, j10 = -2.0 * std::sqrt(10.0) * p[0], j11 = std::sqrt(10.0);
    SquareMatrix gn(2);
    gn(0, 0) = 2.0 * (j00 * j00 + j10 * j10);
    gn(0, 1) = gn(1, 0) = 2.0 * j10 * j11;
    gn(1, 1) = 2.0 * j11 * j11;
    p = ngd_step(st, p, rosenbrock_grad(p), gn).params;
  }
  CHECK(rosenbrock(p) < l0);
}

TEST_CASE("step-decay schedule") {
  LrSchedule s{0.01, 0.1, 40};
  CHECK(s.at(0) == 0.01);
  CHECK(s.at(39) == 0.01);
  CHECK(s.at(40) == doctest::Approx(0.001));
  CHECK(s.at(99) == doctest::Approx(1e-4));
  CHECK_THROWS_AS((LrSchedule{0.01, 0.1, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((LrSchedule{-1.0, 0.1, 10}.validate()), ConfigError);
}
