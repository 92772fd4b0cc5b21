#include "ngf/hessian.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>

#include "ngf/errors.hpp"

namespace ngf::hessian {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void normalize(Vector& v) {
  const double n = numerics::norm2(v);
  for (auto& x : v) x /= n;
}

}  // namespace

Vector hvp(const model::Network& net, const data::Dataset& data, std::span<const double> v, double step) {
  if (data.empty()) throw ProbeError("hvp needs a non-empty dataset");
  if (v.size() != net.params().size()) {
    throw DimensionError("hvp: vector length " + std::to_string(v.size()) + " vs " +
                         std::to_string(net.params().size()) + " parameters");
  }
  const double scale = numerics::norm2(v);
  if (!(scale > 0.0)) throw ProbeError("hvp probe vector must be non-zero");

  model::Network work = net;
  const Vector base(net.params().begin(), net.params().end());
  Vector shifted = base;
  for (std::size_t i = 0; i < v.size(); ++i) shifted[i] = base[i] + step * v[i] / scale;
  work.set_params(shifted);
  const Vector g_plus = model::loss_and_grad(work, data.images, data.labels, model::Scope::full).grad;
  for (std::size_t i = 0; i < v.size(); ++i) shifted[i] = base[i] - step * v[i] / scale;
  work.set_params(shifted);
  const Vector g_minus = model::loss_and_grad(work, data.images, data.labels, model::Scope::full).grad;

  Vector out(v.size());
  const double k = scale / (2.0 * step);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (g_plus[i] - g_minus[i]) * k;
  return out;
}

HvpFn make_hvp(const model::Network& net, const data::Dataset& data, double step) {
  return [net, &data, step](std::span<const double> v) { return hvp(net, data, v, step); };
}

PowerResult lambda_max(const HvpFn& hvp_fn, std::size_t dim, RngState& rng, std::size_t max_iters, double tol) {
  if (max_iters < 1) throw ProbeError("power iteration needs at least one iteration");
  Vector v = numerics::draw_gaussian(rng, dim);
  normalize(v);
  PowerResult r;
  double previous = 0.0;
  for (std::size_t it = 1; it <= max_iters; ++it) {
    Vector w = hvp_fn(v);
    const double rayleigh = numerics::dot(v, w);
    r.value = rayleigh;
    r.iterations = it;
    if (it > 1 && std::abs(rayleigh - previous) <= tol * std::max(1.0, std::abs(rayleigh))) {
      r.converged = true;
      return r;
    }
    previous = rayleigh;
    const double wn = numerics::norm2(w);
    if (wn == 0.0) {
      // v lies in the null space: the spectrum seen from here is {0}.
      r.converged = true;
      return r;
    }
    for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / wn;
  }
  return r;
}

TraceResult trace_estimate(const HvpFn& hvp_fn, std::size_t dim, RngState& rng, std::size_t probes) {
  if (probes < 2) throw ProbeError("trace estimation needs at least two probes");
  Vector samples(probes);
  for (std::size_t p = 0; p < probes; ++p) {
    const Vector z = numerics::draw_rademacher(rng, dim);
    samples[p] = numerics::dot(z, hvp_fn(z));
  }
  TraceResult r;
  r.probes = probes;
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= static_cast<double>(probes);
  double var = 0.0;
  for (double s : samples) var += (s - mean) * (s - mean);
  var /= static_cast<double>(probes - 1);
  r.trace = mean;
  r.stderr_ = std::sqrt(var / static_cast<double>(probes));
  return r;
}

Quadrature lanczos_quadrature(const HvpFn& hvp_fn, std::span<const double> start, std::size_t steps) {
  const std::size_t dim = start.size();
  if (steps < 1) throw ProbeError("Lanczos needs at least one step");
  steps = std::min(steps, dim);
  std::vector<Vector> basis;
  Vector alpha, beta;
  Vector q(start.begin(), start.end());
  normalize(q);
  for (std::size_t j = 0; j < steps; ++j) {
    basis.push_back(q);
    Vector w = hvp_fn(q);
    const double a = numerics::dot(q, w);
    alpha.push_back(a);
    // Full reorthogonalization, applied twice.
    for (int pass = 0; pass < 2; ++pass) {
      for (const Vector& b : basis) numerics::axpy(-numerics::dot(b, w), b, w);
    }
    if (j + 1 == steps) break;
    const double bn = numerics::norm2(w);
    if (bn <= 1e-10) break;
    beta.push_back(bn);
    for (std::size_t i = 0; i < dim; ++i) q[i] = w[i] / bn;
  }

  const std::size_t m = alpha.size();
  numerics::SquareMatrix t(m);
  for (std::size_t i = 0; i < m; ++i) {
    t(i, i) = alpha[i];
    if (i + 1 < m) {
      t(i, i + 1) = beta[i];
      t(i + 1, i) = beta[i];
    }
  }
  const numerics::SymmetricEigen eig = numerics::symmetric_eigen(t);
  Quadrature out;
  out.nodes = eig.values;
  out.weights.resize(m);
  for (std::size_t i = 0; i < m; ++i) out.weights[i] = eig.vectors(0, i) * eig.vectors(0, i);
  return out;
}

SpectralDensity spectral_density(const HvpFn& hvp_fn, std::size_t dim, RngState& rng, std::size_t steps,
                                 std::size_t probes, std::size_t bins,
                                 std::optional<std::pair<double, double>> range) {
  if (steps < 2) throw ProbeError("spectral density needs at least two Lanczos steps");
  if (probes < 1) throw ProbeError("spectral density needs at least one probe");
  if (bins < 1) throw ProbeError("spectral density needs at least one bin");
  SpectralDensity out;
  for (std::size_t p = 0; p < probes; ++p) {
    const Vector start = numerics::draw_gaussian(rng, dim);
    out.probes.push_back(lanczos_quadrature(hvp_fn, start, steps));
  }

  double lo, hi;
  if (range) {
    std::tie(lo, hi) = *range;
  } else {
    lo = hi = out.probes.front().nodes.front();
    for (const auto& q : out.probes) {
      lo = std::min(lo, q.nodes.front());
      hi = std::max(hi, q.nodes.back());
    }
    const double span = hi > lo ? hi - lo : std::max(1.0, std::abs(lo));
    lo -= 0.05 * span;
    hi += 0.05 * span;
  }
  if (!(hi > lo)) throw ProbeError("spectral density range is empty");

  out.bin_width = (hi - lo) / static_cast<double>(bins);
  out.centers.resize(bins);
  out.weights.assign(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) out.centers[b] = lo + (static_cast<double>(b) + 0.5) * out.bin_width;

  // Each node spreads its weight over the bins with a Gaussian of width one
  // bin, renormalized so the node keeps exactly its mass.
  Vector kernel(bins);
  const double inv_probes = 1.0 / static_cast<double>(probes);
  for (const auto& q : out.probes) {
    for (std::size_t i = 0; i < q.nodes.size(); ++i) {
      double total = 0.0;
      for (std::size_t b = 0; b < bins; ++b) {
        const double z = (out.centers[b] - q.nodes[i]) / out.bin_width;
        kernel[b] = std::exp(-0.5 * z * z);
        total += kernel[b];
      }
      if (total == 0.0) {
        // Node far outside an explicit range: put its mass in the nearest bin.
        const auto nearest = static_cast<std::size_t>(std::clamp<double>(
            std::floor((q.nodes[i] - lo) / out.bin_width), 0.0, static_cast<double>(bins - 1)));
        out.weights[nearest] += q.weights[i] * inv_probes;
        continue;
      }
      for (std::size_t b = 0; b < bins; ++b) out.weights[b] += q.weights[i] * inv_probes * kernel[b] / total;
    }
  }
  // Quadrature weights sum to one only up to rounding; fold the residue back in.
  double mass = 0.0;
  for (double w : out.weights) mass += w;
  for (double& w : out.weights) w /= mass;
  return out;
}

SmoothnessReport measure_smoothness(const model::Network& net, const data::Dataset& data,
                                    const SmoothnessSettings& s) {
  SmoothnessReport report;
  report.settings = s;
  report.dataset_digest = data.digest();
  report.params_digest = net.digest();
  report.samples = data.size();
  const HvpFn op = make_hvp(net, data, s.step);
  const std::size_t dim = net.params().size();
  const RngState root(s.seed);
  report.lambda_seed_stream = root.split(1).stream();
  report.trace_seed_stream = root.split(2).stream();
  report.density_seed_stream = root.split(3).stream();
  if (s.want_lambda) {
    RngState rng = root.split(1);
    report.lambda = lambda_max(op, dim, rng, s.max_iters, s.tol);
  }
  if (s.want_trace) {
    RngState rng = root.split(2);
    report.trace = trace_estimate(op, dim, rng, s.trace_probes);
  }
  if (s.want_density) {
    RngState rng = root.split(3);
    report.density = spectral_density(op, dim, rng, s.lanczos_steps, s.slq_probes, s.bins);
  }
  return report;
}

void write_density_csv(const SpectralDensity& density, std::ostream& out) {
  out << "bin_center,weight\n";
  for (std::size_t b = 0; b < density.centers.size(); ++b) {
    out << fmt(density.centers[b]) << ',' << fmt(density.weights[b]) << '\n';
  }
}

void write_summary(const SmoothnessReport& r, std::ostream& out) {
  out << "seed=" << r.settings.seed << '\n';
  out << "samples=" << r.samples << '\n';
  out << "dataset_digest=" << r.dataset_digest << '\n';
  out << "params_digest=" << r.params_digest << '\n';
  out << "fd_step=" << fmt(r.settings.step) << '\n';
  if (r.lambda) {
    out << "lambda_max=" << fmt(r.lambda->value) << '\n';
    out << "lambda_iterations=" << r.lambda->iterations << '\n';
    out << "lambda_converged=" << (r.lambda->converged ? "true" : "false") << '\n';
    out << "lambda_tol=" << fmt(r.settings.tol) << '\n';
    out << "lambda_stream=" << r.lambda_seed_stream << '\n';
  }
  if (r.trace) {
    out << "trace=" << fmt(r.trace->trace) << '\n';
    out << "trace_stderr=" << fmt(r.trace->stderr_) << '\n';
    out << "trace_probes=" << r.trace->probes << '\n';
    out << "trace_stream=" << r.trace_seed_stream << '\n';
  }
  if (r.density) {
    out << "slq_steps=" << r.settings.lanczos_steps << '\n';
    out << "slq_probes=" << r.settings.slq_probes << '\n';
    out << "slq_bins=" << r.density->centers.size() << '\n';
    out << "slq_stream=" << r.density_seed_stream << '\n';
  }
}

}  // namespace ngf::hessian
