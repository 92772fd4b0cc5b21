#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include "ngf/numerics.hpp"

namespace ngf::optim {

using numerics::SquareMatrix;
using numerics::Vector;

enum class OptimizerKind { sgd, adagrad, rmsprop, adam, sam, ngd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct Hyper {
  double lr = 0.01;
  double momentum = 0.0;  // sgd, and the inner rule of sam
  double decay = 0.99;    // rmsprop
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double rho = 0.05;               // sam radius
  std::optional<double> damping;   // ngd; unset = 1e-4 * tr(F) / dim
};

/// Per-parameter accumulators for one trainable scope. Owned by exactly one
/// training loop.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  Hyper hyper;
  std::size_t size = 0;
  Vector first;   // momentum / adam m
  Vector second;  // adagrad / rmsprop / adam v
  std::size_t steps = 0;

  static OptimizerState make(OptimizerKind kind, std::size_t size, Hyper hyper = {});
  void validate() const;
};

/// Returns the updated parameters and advances the accumulators.
Vector first_order_step(OptimizerState& state, std::span<const double> params, std::span<const double> grad);

using GradFn = std::function<Vector(std::span<const double>)>;

/// Sharpness-aware step: ascend to params + rho g / |g|, then apply the inner
/// sgd rule with the gradient found there. Calls grad_fn exactly twice; a
/// zero first gradient degrades to a plain sgd step.
Vector sam_step(OptimizerState& state, std::span<const double> params, const GradFn& grad_fn);

struct NgdStep {
  Vector params;
  double damping = 0.0;  // damping actually used by the successful solve
  std::size_t retries = 0;
};

double default_damping(const SquareMatrix& fisher);

/// params - lr * (F + damping I)^{-1} grad. A failed factorization is retried
/// with damping x10, at most three times.
NgdStep ngd_step(const OptimizerState& state, std::span<const double> params, std::span<const double> grad,
                 const SquareMatrix& fisher);

struct LrSchedule {
  double initial = 0.01;
  double factor = 0.1;
  std::size_t interval = 40;

  double at(std::size_t epoch) const;
  void validate() const;
};

}  // namespace ngf::optim
