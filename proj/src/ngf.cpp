#include "ngf/ngf.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "ngf/errors.hpp"

namespace ngf::defense {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

FisherMatrix compute_empirical_fisher(const Network& net, const FeatureCache& cache, const Dataset& val) {
  if (val.empty()) throw EstimationError("empirical Fisher needs at least one validation sample");
  const numerics::Tensor rows = model::per_sample_head_grads(net, cache, val.images, val.labels);
  const std::size_t n = rows.extent(0), d = rows.extent(1);
  FisherMatrix f;
  f.n = n;
  f.matrix = SquareMatrix(d);
  // Upper triangle accumulated sample by sample, then mirrored, so the
  // result is exactly symmetric.
  for (std::size_t s = 0; s < n; ++s) {
    auto g = rows.row(s);
    for (std::size_t i = 0; i < d; ++i) {
      const double gi = g[i];
      if (gi == 0.0) continue;
      double* out = f.matrix.data().data() + i * d;
      for (std::size_t j = i; j < d; ++j) out[j] += gi * g[j];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      const double v = f.matrix(i, j) * inv_n;
      f.matrix(i, j) = v;
      f.matrix(j, i) = v;
    }
  }
  f.diag = f.matrix.diag();
  return f;
}

RegularizedLoss regularized_loss_grad(const Network& net, const FeatureCache& cache, const Dataset& val,
                                      double eta, const Anchor& anchor) {
  const std::size_t d = net.head().length;
  if (anchor.head.size() != d || anchor.diag.size() != d) {
    throw DimensionError("regularizer anchor has " + std::to_string(anchor.head.size()) + "/" +
                         std::to_string(anchor.diag.size()) + " entries, head has " + std::to_string(d));
  }
  model::check_fresh(net, cache, val.images);
  model::LossGrad ce = model::head_loss_and_grad(net, cache, val.labels);
  RegularizedLoss out;
  out.ce = ce.loss;
  out.grad = std::move(ce.grad);
  auto head = net.head_params();
  double reg = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double delta = head[i] - anchor.head[i];
    reg += anchor.diag[i] * delta * delta;
    out.grad[i] += eta * anchor.diag[i] * delta;
  }
  out.reg = 0.5 * eta * reg;
  out.loss = out.ce + out.reg;
  return out;
}

void NgfConfig::validate() const {
  if (!(eta >= 0.0)) throw ConfigError("regularization constant eta must be non-negative");
  if (epochs < 1) throw ConfigError("purification needs at least one epoch");
  if (damping && !(*damping >= 0.0)) throw ConfigError("damping must be non-negative");
  schedule.validate();
}

FineTuneResult purify(const Network& net, const Dataset& val, const NgfConfig& config, const PurifyHooks& hooks) {
  config.validate();
  if (val.empty()) throw EstimationError("purification needs a non-empty validation set");
  const FisherEstimator estimate = hooks.estimator ? hooks.estimator : FisherEstimator(compute_empirical_fisher);

  FineTuneResult result;
  result.net = net;
  Network& work = result.net;
  // Backbone is frozen, so head inputs are computed once.
  const FeatureCache cache = model::backbone_features(work, val.images);

  FisherMatrix fisher = estimate(work, cache, val);
  ++result.fisher_evaluations;
  const Anchor anchor{Vector(work.head_params().begin(), work.head_params().end()), fisher.diag};

  optim::Hyper hyper;
  hyper.damping = config.damping;
  optim::OptimizerState state = optim::OptimizerState::make(optim::OptimizerKind::ngd, work.head().length, hyper);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (epoch > 0) {
      fisher = estimate(work, cache, val);
      ++result.fisher_evaluations;
    }
    const RegularizedLoss lp = regularized_loss_grad(work, cache, val, config.eta, anchor);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = config.schedule.at(epoch);
    rec.loss_p = lp.loss;
    rec.ce_loss = lp.ce;
    rec.reg_loss = lp.reg;
    rec.grad_norm = numerics::norm2(lp.grad);
    state.hyper.lr = rec.lr;
    try {
      optim::NgdStep step = optim::ngd_step(state, work.head_params(), lp.grad, fisher.matrix);
      rec.damping = step.damping;
      work.set_head_params(step.params);
    } catch (const OptimizerError& e) {
      result.failed_epoch = epoch;
      result.error = "epoch " + std::to_string(epoch) + ": " + e.what();
      result.trace.push_back(rec);
      return result;
    }
    if (hooks.observer) hooks.observer(work, rec);
    result.trace.push_back(rec);
  }
  return result;
}

void BaselineConfig::validate() const {
  if (optimizer == optim::OptimizerKind::ngd) {
    throw ConfigError("natural-gradient fine-tuning goes through purify, not finetune_baseline");
  }
  schedule.validate();
}

FineTuneResult finetune_baseline(const Network& net, const Dataset& val, const BaselineConfig& config,
                                 const EpochObserver& observer) {
  config.validate();
  if (val.empty()) throw EstimationError("fine-tuning needs a non-empty validation set");
  const bool head_only = config.scope == model::Scope::head_only;

  FineTuneResult result;
  result.net = net;
  Network& work = result.net;
  std::optional<FeatureCache> cache;
  if (head_only) cache = model::backbone_features(work, val.images);

  optim::OptimizerState state = optim::OptimizerState::make(config.optimizer, work.scope_size(config.scope), config.hyper);
  numerics::RngState order_rng(config.seed, 0x6674ULL);

  const std::size_t n = val.size();
  const std::size_t batch = config.batch_size == 0 || config.batch_size >= n ? n : config.batch_size;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  // Loss and gradient of the trainable scope at the given scope parameters,
  // over the samples in `idx` (all samples when idx is empty).
  auto evaluate = [&](std::span<const double> scope_params, const std::vector<std::size_t>& idx) {
    Network probe = work;
    if (head_only) probe.set_head_params(scope_params);
    else probe.set_params(scope_params);
    if (head_only) {
      if (idx.empty()) return model::head_loss_and_grad(probe, *cache, val.labels);
      FeatureCache sub;
      sub.backbone_digest = cache->backbone_digest;
      sub.data_digest = cache->data_digest;
      sub.features = numerics::Tensor({idx.size(), cache->features.extent(1)});
      std::vector<int> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = cache->features.row(idx[i]);
        std::copy(src.begin(), src.end(), sub.features.row(i).begin());
        labels[i] = val.labels[idx[i]];
      }
      return model::head_loss_and_grad(probe, sub, labels);
    }
    if (idx.empty()) return model::loss_and_grad(probe, val.images, val.labels, model::Scope::full);
    const Dataset sub = val.subset(idx);
    return model::loss_and_grad(probe, sub.images, sub.labels, model::Scope::full);
  };

  auto current = [&]() -> Vector {
    auto p = head_only ? std::span<const double>(work.head_params()) : work.params();
    return Vector(p.begin(), p.end());
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = config.schedule.at(epoch);
    state.hyper.lr = rec.lr;
    if (batch < n) numerics::shuffle(order, order_rng);
    double loss_sum = 0.0, grad_sq = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::vector<std::size_t> idx;
      if (batch < n) idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                                order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch)));
      Vector params = current();
      model::LossGrad lg = evaluate(params, idx);
      if (!std::isfinite(lg.loss)) {
        result.failed_epoch = epoch;
        result.error = "epoch " + std::to_string(epoch) + ": loss is not finite";
        result.trace.push_back(rec);
        return result;
      }
      loss_sum += lg.loss;
      grad_sq += numerics::dot(lg.grad, lg.grad);
      ++batches;
      Vector next;
      if (config.optimizer == optim::OptimizerKind::sam) {
        bool first = true;
        next = optim::sam_step(state, params, [&](std::span<const double> p) {
          // The first evaluation is at the current point, already computed.
          if (first) {
            first = false;
            return lg.grad;
          }
          return evaluate(p, idx).grad;
        });
      } else {
        next = optim::first_order_step(state, params, lg.grad);
      }
      if (head_only) work.set_head_params(next);
      else work.set_params(next);
    }
    rec.loss_p = rec.ce_loss = loss_sum / static_cast<double>(batches);
    rec.grad_norm = std::sqrt(grad_sq / static_cast<double>(batches));
    if (observer) observer(work, rec);
    result.trace.push_back(rec);
  }
  return result;
}

void write_trace_csv(const std::vector<EpochRecord>& trace, std::ostream& out) {
  out << "epoch,lr,loss_p,ce_loss,reg_loss,grad_norm,damping,asr_val,acc_val\n";
  for (const auto& r : trace) {
    out << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.loss_p) << ',' << fmt(r.ce_loss) << ',' << fmt(r.reg_loss)
        << ',' << fmt(r.grad_norm) << ',' << fmt(r.damping) << ',' << fmt(r.asr_val) << ',' << fmt(r.acc_val)
        << '\n';
  }
}

}  // namespace ngf::defense
