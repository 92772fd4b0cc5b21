#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ngf/data.hpp"
#include "ngf/model.hpp"
#include "ngf/numerics.hpp"
#include "ngf/optim.hpp"

// Natural Gradient Fine-tuning of the classifier head, plus the first-order
// fine-tuning baselines it is compared against.
namespace ngf::defense {

using data::Dataset;
using model::FeatureCache;
using model::Network;
using numerics::SquareMatrix;
using numerics::Vector;

/// Empirical Fisher of the head over a dataset: (1/n) sum_j g_j g_j^T with
/// g_j the head gradient of log p(y_j | x_j).
struct FisherMatrix {
  SquareMatrix matrix;
  std::size_t n = 0;
  Vector diag;
};

FisherMatrix compute_empirical_fisher(const Network& net, const FeatureCache& cache, const Dataset& val);

/// Snapshot of the head at the start of purification and the Fisher diagonal
/// measured there. Never updated afterwards.
struct Anchor {
  Vector head;
  Vector diag;
};

struct RegularizedLoss {
  double loss = 0.0;  // ce + reg
  double ce = 0.0;
  double reg = 0.0;
  Vector grad;
};

/// CE(val) + (eta / 2) * sum_i diag_i (theta_i - anchor_i)^2 and its head
/// gradient.
RegularizedLoss regularized_loss_grad(const Network& net, const FeatureCache& cache, const Dataset& val,
                                      double eta, const Anchor& anchor);

struct NgfConfig {
  double eta = 0.1;
  optim::LrSchedule schedule{0.01, 0.1, 40};
  std::size_t epochs = 100;
  std::optional<double> damping;  // unset = 1e-4 * tr(F) / dim

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_p = 0.0;
  double ce_loss = 0.0;
  double reg_loss = 0.0;
  double grad_norm = 0.0;
  double damping = 0.0;
  std::optional<double> asr_val;
  std::optional<double> acc_val;
  std::optional<double> lambda_max;
};

struct FineTuneResult {
  Network net;
  std::vector<EpochRecord> trace;
  std::optional<std::size_t> failed_epoch;
  std::string error;
  std::size_t fisher_evaluations = 0;

  bool ok() const noexcept { return !failed_epoch; }
};

using FisherEstimator = std::function<FisherMatrix(const Network&, const FeatureCache&, const Dataset&)>;
/// Called after every epoch's update with the updated network; may fill the
/// optional columns of the record.
using EpochObserver = std::function<void(const Network&, EpochRecord&)>;

struct PurifyHooks {
  FisherEstimator estimator;  // defaults to compute_empirical_fisher
  EpochObserver observer;
};

/// Fine-tunes only the head of `net` on the clean set `val` with damped
/// natural-gradient steps on the regularized loss. The Fisher is recomputed
/// once per epoch, full batch; the anchor diagonal is taken once at the
/// initial head. On a failed solve the result carries the epoch and the
/// partial trace.
FineTuneResult purify(const Network& net, const Dataset& val, const NgfConfig& config, const PurifyHooks& hooks = {});

struct BaselineConfig {
  optim::OptimizerKind optimizer = optim::OptimizerKind::sgd;
  optim::Hyper hyper;
  model::Scope scope = model::Scope::head_only;
  std::size_t epochs = 100;
  optim::LrSchedule schedule{0.01, 0.1, 40};
  std::size_t batch_size = 0;  // 0 = full batch, one step per epoch
  std::uint64_t seed = 0;      // minibatch order

  void validate() const;
};

/// First-order (or SAM) fine-tuning with the same loop shape as purify and no
/// Fisher; scope full also updates the backbone.
FineTuneResult finetune_baseline(const Network& net, const Dataset& val, const BaselineConfig& config,
                                 const EpochObserver& observer = {});

void write_trace_csv(const std::vector<EpochRecord>& trace, std::ostream& out);

}  // namespace ngf::defense
