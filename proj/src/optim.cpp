#include "ngf/optim.hpp"

#include <algorithm>
#include <cmath>

#include "ngf/errors.hpp"

namespace ngf::optim {

namespace {

void check_lengths(std::size_t expected, std::span<const double> params, std::span<const double> grad) {
  if (params.size() != expected || grad.size() != expected) {
    throw DimensionError("optimizer step: state holds " + std::to_string(expected) + " parameters, got params " +
                         std::to_string(params.size()) + " and grad " + std::to_string(grad.size()));
  }
}

Vector sgd_update(OptimizerState& s, std::span<const double> params, std::span<const double> grad) {
  Vector out(params.begin(), params.end());
  if (s.hyper.momentum == 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= s.hyper.lr * grad[i];
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    s.first[i] = s.hyper.momentum * s.first[i] + grad[i];
    out[i] -= s.hyper.lr * s.first[i];
  }
  return out;
}

}  // namespace

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adagrad: return "adagrad";
    case OptimizerKind::rmsprop: return "rmsprop";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sam: return "sam";
    case OptimizerKind::ngd: return "ngd";
  }
  return "?";
}

OptimizerKind parse_optimizer(const std::string& name) {
  for (auto k : {OptimizerKind::sgd, OptimizerKind::adagrad, OptimizerKind::rmsprop, OptimizerKind::adam,
                 OptimizerKind::sam, OptimizerKind::ngd}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown optimizer '" + name + "'");
}

OptimizerState OptimizerState::make(OptimizerKind kind, std::size_t size, Hyper hyper) {
  OptimizerState s;
  s.kind = kind;
  s.hyper = hyper;
  s.size = size;
  if (kind != OptimizerKind::ngd) {
    s.first.assign(size, 0.0);
    s.second.assign(size, 0.0);
  }
  s.validate();
  return s;
}

void OptimizerState::validate() const {
  const Hyper& h = hyper;
  if (!(h.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (kind == OptimizerKind::adam && !(h.beta1 > 0.0 && h.beta1 < 1.0 && h.beta2 > 0.0 && h.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in (0, 1)");
  }
  if (kind == OptimizerKind::rmsprop && !(h.decay > 0.0 && h.decay < 1.0)) {
    throw ConfigError("rmsprop decay must lie in (0, 1)");
  }
  if (kind == OptimizerKind::sam && !(h.rho > 0.0)) throw ConfigError("sam rho must be positive");
  if (kind == OptimizerKind::ngd && h.damping && !(*h.damping >= 0.0)) {
    throw ConfigError("ngd damping must be non-negative");
  }
  if (kind != OptimizerKind::ngd && (first.size() != size || second.size() != size)) {
    throw DimensionError("optimizer accumulators do not match the parameter count");
  }
}

Vector first_order_step(OptimizerState& s, std::span<const double> params, std::span<const double> grad) {
  check_lengths(s.size, params, grad);
  const Hyper& h = s.hyper;
  s.steps += 1;
  switch (s.kind) {
    case OptimizerKind::sgd:
    case OptimizerKind::sam:
      return sgd_update(s, params, grad);
    case OptimizerKind::adagrad: {
      Vector out(params.begin(), params.end());
      for (std::size_t i = 0; i < out.size(); ++i) {
        s.second[i] += grad[i] * grad[i];
        out[i] -= h.lr * grad[i] / (std::sqrt(s.second[i]) + h.eps);
      }
      return out;
    }
    case OptimizerKind::rmsprop: {
      Vector out(params.begin(), params.end());
      for (std::size_t i = 0; i < out.size(); ++i) {
        s.second[i] = h.decay * s.second[i] + (1.0 - h.decay) * grad[i] * grad[i];
        out[i] -= h.lr * grad[i] / (std::sqrt(s.second[i]) + h.eps);
      }
      return out;
    }
    case OptimizerKind::adam: {
      Vector out(params.begin(), params.end());
      const double t = static_cast<double>(s.steps);
      const double c1 = 1.0 - std::pow(h.beta1, t);
      const double c2 = 1.0 - std::pow(h.beta2, t);
      for (std::size_t i = 0; i < out.size(); ++i) {
        s.first[i] = h.beta1 * s.first[i] + (1.0 - h.beta1) * grad[i];
        s.second[i] = h.beta2 * s.second[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        const double m_hat = s.first[i] / c1;
        const double v_hat = s.second[i] / c2;
        out[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
      }
      return out;
    }
    case OptimizerKind::ngd:
      throw ConfigError("ngd needs a Fisher matrix; use ngd_step");
  }
  return {};
}

Vector sam_step(OptimizerState& s, std::span<const double> params, const GradFn& grad_fn) {
  const Vector g = grad_fn(params);
  check_lengths(s.size, params, g);
  const double gnorm = numerics::norm2(g);
  s.steps += 1;
  if (gnorm == 0.0) return sgd_update(s, params, g);
  Vector probe(params.begin(), params.end());
  numerics::axpy(s.hyper.rho / gnorm, g, probe);
  const Vector g_adv = grad_fn(probe);
  check_lengths(s.size, params, g_adv);
  return sgd_update(s, params, g_adv);
}

double default_damping(const SquareMatrix& fisher) {
  if (fisher.dim() == 0) return 0.0;
  return 1e-4 * fisher.trace() / static_cast<double>(fisher.dim());
}

NgdStep ngd_step(const OptimizerState& s, std::span<const double> params, std::span<const double> grad,
                 const SquareMatrix& fisher) {
  check_lengths(s.size, params, grad);
  if (fisher.dim() != s.size) {
    throw DimensionError("ngd_step: Fisher dim " + std::to_string(fisher.dim()) + " vs " +
                         std::to_string(s.size) + " parameters");
  }
  double damping = s.hyper.damping ? *s.hyper.damping : default_damping(fisher);
  constexpr std::size_t kMaxRetries = 3;
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      const Vector dir = numerics::cholesky_solve(fisher, damping, grad);
      NgdStep out;
      out.params.assign(params.begin(), params.end());
      numerics::axpy(-s.hyper.lr, dir, out.params);
      out.damping = damping;
      out.retries = attempt;
      return out;
    } catch (const FactorizationError& e) {
      if (attempt == kMaxRetries) {
        throw OptimizerError(std::string("ngd_step: solve failed after damping escalation: ") + e.what(), 0);
      }
      // Zero damping cannot be escalated multiplicatively; seed it from the
      // Fisher scale instead.
      const double scale = std::max(1e-12, fisher.dim() ? std::abs(fisher.trace()) / static_cast<double>(fisher.dim()) : 1.0);
      damping = damping > 0.0 ? damping * 10.0 : 1e-8 * scale;
    }
  }
}

double LrSchedule::at(std::size_t epoch) const {
  return initial * std::pow(factor, static_cast<double>(epoch / interval));
}

void LrSchedule::validate() const {
  if (!(initial > 0.0)) throw ConfigError("initial learning rate must be positive");
  if (!(factor > 0.0)) throw ConfigError("learning-rate decay factor must be positive");
  if (interval == 0) throw ConfigError("learning-rate decay interval must be at least one epoch");
}

}  // namespace ngf::optim
