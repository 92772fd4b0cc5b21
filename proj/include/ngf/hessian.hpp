#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ngf/data.hpp"
#include "ngf/model.hpp"
#include "ngf/numerics.hpp"

// Loss-surface probes of the full-parameter cross-entropy Hessian, built on
// Hessian-vector products only.
namespace ngf::hessian {

using numerics::RngState;
using numerics::Vector;

using HvpFn = std::function<Vector(std::span<const double>)>;

constexpr double kDefaultStep = 1e-4;

/// H v by central differences of full-batch gradients along v / |v|.
/// The network is not modified.
Vector hvp(const model::Network& net, const data::Dataset& data, std::span<const double> v,
           double step = kDefaultStep);

/// Binds a copy of the network and a reference to `data` (which must outlive
/// the returned function) into an HvpFn.
HvpFn make_hvp(const model::Network& net, const data::Dataset& data, double step = kDefaultStep);

struct PowerResult {
  double value = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Power iteration on |H| from a Gaussian start; returns the signed Rayleigh
/// quotient once successive quotients agree to tol * max(1, |lambda|).
PowerResult lambda_max(const HvpFn& hvp_fn, std::size_t dim, RngState& rng, std::size_t max_iters = 100,
                       double tol = 1e-3);

struct TraceResult {
  double trace = 0.0;
  double stderr_ = 0.0;
  std::size_t probes = 0;
};

/// Hutchinson estimate: mean of z^T H z over Rademacher z.
TraceResult trace_estimate(const HvpFn& hvp_fn, std::size_t dim, RngState& rng, std::size_t probes = 100);

struct Quadrature {
  Vector nodes;
  Vector weights;  // squared first components; sum to 1
};

/// k-step Lanczos with full reorthogonalization from a normalized start
/// vector. Stops early (still a valid quadrature) on breakdown.
Quadrature lanczos_quadrature(const HvpFn& hvp_fn, std::span<const double> start, std::size_t steps);

struct SpectralDensity {
  Vector centers;
  Vector weights;  // sum to 1
  double bin_width = 0.0;
  std::vector<Quadrature> probes;
};

/// Stochastic Lanczos quadrature smoothed onto `bins` equal bins with a
/// Gaussian kernel one bin wide. The bin range is the node range padded by 5%
/// unless given explicitly.
SpectralDensity spectral_density(const HvpFn& hvp_fn, std::size_t dim, RngState& rng, std::size_t steps,
                                 std::size_t probes, std::size_t bins,
                                 std::optional<std::pair<double, double>> range = std::nullopt);

struct SmoothnessSettings {
  std::uint64_t seed = 7;
  bool want_lambda = true;
  bool want_trace = true;
  bool want_density = true;
  std::size_t max_iters = 100;
  double tol = 1e-3;
  std::size_t trace_probes = 100;
  std::size_t lanczos_steps = 40;
  std::size_t slq_probes = 4;
  std::size_t bins = 100;
  double step = kDefaultStep;
};

struct SmoothnessReport {
  std::optional<PowerResult> lambda;
  std::optional<TraceResult> trace;
  std::optional<SpectralDensity> density;
  SmoothnessSettings settings;
  std::uint64_t lambda_seed_stream = 0;
  std::uint64_t trace_seed_stream = 0;
  std::uint64_t density_seed_stream = 0;
  std::string dataset_digest;
  std::string params_digest;
  std::size_t samples = 0;
};

/// Runs the requested probes over `data`, each on its own split of the seed.
SmoothnessReport measure_smoothness(const model::Network& net, const data::Dataset& data,
                                    const SmoothnessSettings& settings);

void write_density_csv(const SpectralDensity& density, std::ostream& out);
void write_summary(const SmoothnessReport& report, std::ostream& out);

}  // namespace ngf::hessian
