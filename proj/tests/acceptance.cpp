// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance oracles   criteria 1-5 (oracle and property suite)
//   acceptance claims    criteria 6-12 (desk-scale backdoor experiments)
//   acceptance all       both
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ngf/data.hpp"
#include "ngf/harness.hpp"
#include "ngf/hessian.hpp"
#include "ngf/ngf.hpp"
#include "ngf/optim.hpp"
#include "oracles.hpp"

using namespace ngf;
using model::LayerSpec;
using model::Network;
using numerics::RngState;
using numerics::SquareMatrix;
using numerics::Tensor;
using numerics::Vector;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int report(int id, const std::string& name, const Outcome& o) {
  std::cout << "criterion " << (id < 10 ? " " : "") << id << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << name
            << ": " << o.detail << std::endl;
  return o.pass ? 0 : 1;
}

Tensor uniform_batch(std::vector<std::size_t> shape, RngState& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

// ---------------------------------------------------------------- criterion 1

Outcome gradients() {
  RngState rng(101);
  const std::vector<std::pair<std::vector<LayerSpec>, std::vector<std::size_t>>> families{
      {model::reference_mlp(6, 3), {2, 3, 3}},
      {{LayerSpec::conv2d(2, 3), LayerSpec::relu(), LayerSpec::maxpool(2), LayerSpec::flatten(), LayerSpec::dense(3)},
       {2, 6, 6}},
      {{LayerSpec::conv2d(3, 2, 2), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(4)}, {1, 6, 6}},
      {{LayerSpec::flatten(), LayerSpec::dense(5), LayerSpec::relu(), LayerSpec::dense(3)}, {1, 4, 4}},
  };
  std::size_t instances = 0;
  double worst = 0.0;
  for (const auto& [spec, shape] : families) {
    for (int trial = 0; trial < 5; ++trial) {
      Network net = model::init_network(spec, shape, spec.back().units, rng);
      // Offsets keep pre-activations away from ReLU and max-pool switches.
      for (auto& v : net.params()) v += rng.uniform(-0.3, 0.3);
      std::vector<std::size_t> bshape{3};
      bshape.insert(bshape.end(), shape.begin(), shape.end());
      const Tensor x = uniform_batch(bshape, rng);
      std::vector<int> y(3);
      for (auto& v : y) v = static_cast<int>(rng.below(net.classes()));
      const Vector analytic = model::loss_and_grad(net, x, y, model::Scope::full).grad;
      Network probe = net;
      const Vector fd = oracle::fd_gradient(
          [&](const Vector& p) {
            probe.set_params(p);
            return oracle::reference_loss(probe, x, y);
          },
          Vector(net.params().begin(), net.params().end()), 1e-5);
      worst = std::max(worst, oracle::relative_error(analytic, fd));
      ++instances;
    }
  }
  // Regularized head loss with an amplified anchor diagonal.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngState r(200 + seed);
    data::SynthOptions o;
    o.classes = 3;
    o.per_class = 5;
    o.dims = {1, 8, 8};
    auto dr = r.split(1), ir = r.split(2);
    const data::Dataset val = data::gen_synth(dr, o);
    Network net = model::init_network({LayerSpec::conv2d(2, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
                                       LayerSpec::flatten(), LayerSpec::dense(3)},
                                      val.image_shape(), 3, ir);
    for (auto& v : net.params()) v += r.uniform(-0.2, 0.2);
    const auto cache = model::backbone_features(net, val.images);
    defense::Anchor a{Vector(net.head_params().begin(), net.head_params().end()),
                      defense::compute_empirical_fisher(net, cache, val).diag};
    for (auto& v : a.diag) v = 50.0 * v + 0.5;
    for (auto& v : net.head_params()) v += r.uniform(-0.5, 0.5);
    const double eta = 0.7;
    const Vector analytic = defense::regularized_loss_grad(net, cache, val, eta, a).grad;
    Network probe = net;
    const Vector fd = oracle::fd_gradient(
        [&](const Vector& head) {
          probe.set_head_params(head);
          return defense::regularized_loss_grad(probe, cache, val, eta, a).loss;
        },
        Vector(net.head_params().begin(), net.head_params().end()), 1e-5);
    worst = std::max(worst, oracle::relative_error(analytic, fd));
    ++instances;
  }
  return {instances >= 20 && worst <= 1e-4,
          "max relative error " + fmt(worst) + " over " + std::to_string(instances) + " instances (<= 1e-4, >= 20)"};
}

// ---------------------------------------------------------------- criterion 2

Outcome fisher() {
  double worst = 0.0;
  RngState rng(303);
  for (std::size_t n = 1; n <= 10; ++n) {
    auto init = rng.split(n);
    Network net = model::init_network({LayerSpec::flatten(), LayerSpec::dense(2)}, {1, 1, 4}, 2, init);
    for (auto& v : net.params()) v = rng.uniform(-1.5, 1.5);
    data::Dataset val = data::make_dataset({1, 1, 4}, 2);
    val.images = uniform_batch({n, 1, 1, 4}, rng);
    val.labels.resize(n);
    for (auto& y : val.labels) y = static_cast<int>(rng.below(2));
    val.provenance.assign(n, {});
    const auto cache = model::backbone_features(net, val.images);
    const auto got = defense::compute_empirical_fisher(net, cache, val);
    const SquareMatrix ref = oracle::literal_fisher(net, val.images, val.labels);
    for (std::size_t i = 0; i < ref.data().size(); ++i)
      worst = std::max(worst, std::abs(got.matrix.data()[i] - ref.data()[i]));
  }
  return {worst <= 1e-12, "max abs deviation " + fmt(worst) + " for n = 1..10 (<= 1e-12)"};
}

// ---------------------------------------------------------------- criterion 3

Outcome ngd() {
  RngState rng(404);
  double worst_inv = 0.0, worst_id = 0.0;
  for (std::size_t dim : {1u, 2u, 5u, 10u, 20u, 35u, 50u}) {
    const SquareMatrix f = oracle::random_spd(dim, rng);
    const Vector p = numerics::draw_gaussian(rng, dim), g = numerics::draw_gaussian(rng, dim);
    optim::Hyper h;
    h.lr = 0.2;
    h.damping = 0.0;
    const auto st = optim::OptimizerState::make(optim::OptimizerKind::ngd, dim, h);
    const Vector got = optim::ngd_step(st, p, g, f).params;
    const Vector dir = oracle::dense_inverse(f).multiply(g);
    for (std::size_t i = 0; i < dim; ++i) worst_inv = std::max(worst_inv, std::abs(got[i] - (p[i] - h.lr * dir[i])));

    optim::Hyper plain_h;
    plain_h.lr = h.lr;
    auto sgd = optim::OptimizerState::make(optim::OptimizerKind::sgd, dim, plain_h);
    const Vector id = optim::ngd_step(st, p, g, SquareMatrix::identity(dim)).params;
    const Vector plain = optim::first_order_step(sgd, p, g);
    for (std::size_t i = 0; i < dim; ++i) worst_id = std::max(worst_id, std::abs(id[i] - plain[i]));
  }
  return {worst_inv <= 1e-8 && worst_id <= 1e-12, "dense inverse " + fmt(worst_inv) + " (<= 1e-8), identity vs sgd " +
                                                      fmt(worst_id) + " (<= 1e-12), dims up to 50"};
}

// ---------------------------------------------------------------- criterion 4

Outcome hessian_probes() {
  RngState rng(505);
  data::SynthOptions o;
  o.classes = 3;
  o.per_class = 8;
  o.dims = {1, 8, 8};
  o.noise = 0.3;
  auto dr = rng.split(1), ir = rng.split(2);
  const data::Dataset d = data::gen_synth(dr, o);
  Network net = model::init_network({LayerSpec::conv2d(2, 3, 2), LayerSpec::relu(), LayerSpec::flatten(),
                                     LayerSpec::dense(3)},
                                    d.image_shape(), 3, ir);
  for (auto& v : net.params()) v += rng.uniform(-0.3, 0.3);
  const std::size_t n = net.params().size();

  const hessian::HvpFn op = hessian::make_hvp(net, d);
  const SquareMatrix dense = oracle::dense_from_operator(op, n);
  const Vector exact = oracle::jacobi_eigenvalues(dense);
  const double top = std::abs(exact.front()) > std::abs(exact.back()) ? exact.front() : exact.back();

  RngState r1(1), r2(2), r3(3);
  const auto lam = hessian::lambda_max(op, n, r1, 1000, 1e-7);
  const double lam_err = std::abs(lam.value - top) / std::abs(top);
  const auto tr = hessian::trace_estimate(op, n, r2, 1000);
  const double tr_err = std::abs(tr.trace - dense.trace()) / std::abs(dense.trace());
  const auto q = hessian::lanczos_quadrature([&](std::span<const double> v) { return dense.multiply(v); },
                                             numerics::draw_gaussian(r3, n), n);
  double node_err = 0.0;
  for (double node : q.nodes) {
    double nearest = INFINITY;
    for (double e : exact) nearest = std::min(nearest, std::abs(node - e));
    node_err = std::max(node_err, nearest);
  }
  // Full-length Lanczos on a generic SPD matrix must reproduce every eigenvalue.
  const SquareMatrix spd = oracle::random_spd(40, r3);
  const Vector spd_exact = oracle::jacobi_eigenvalues(spd);
  const auto qs = hessian::lanczos_quadrature([&](std::span<const double> v) { return spd.multiply(v); },
                                              numerics::draw_gaussian(r3, 40), 40);
  double spd_err = qs.nodes.size() == 40 ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < qs.nodes.size() && i < 40; ++i)
    spd_err = std::max(spd_err, std::abs(qs.nodes[i] - spd_exact[i]));

  const bool ok = n <= 200 && lam.converged && lam_err <= 1e-3 && tr_err <= 0.05 && node_err <= 1e-8 && spd_err <= 1e-8;
  return {ok, std::to_string(n) + " params; lambda rel err " + fmt(lam_err) + " (<= 1e-3), trace rel err " +
                  fmt(tr_err) + " at 1000 probes (<= 0.05), SLQ node err " + fmt(std::max(node_err, spd_err)) +
                  " (<= 1e-8)"};
}

// ---------------------------------------------------------------- criterion 5

std::vector<std::pair<std::string, std::string>> comparable_files(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    // Manifests carry timestamps and wall-clock runtimes by design.
    if (ext != ".ckpt" && ext != ".csv" && ext != ".txt") continue;
    if (e.path().filename() == "manifest.txt") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out.emplace_back(fs::relative(e.path(), root).string(), ss.str());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Outcome determinism(const fs::path& work) {
  harness::ExperimentConfig c;
  c.data.classes = 4;
  c.data.per_class = 40;
  c.data.channels = 1;
  c.data.height = 8;
  c.data.width = 8;
  c.data.val_fraction = 0.1;
  c.model.arch = "mlp";
  c.model.hidden = 16;
  c.train.epochs = 4;
  c.train.batch_size = 16;
  c.defense.epochs = 6;
  c.defense.track = true;
  c.probe.max_samples = 40;
  c.probe.settings.trace_probes = 5;
  c.probe.settings.lanczos_steps = 6;
  c.probe.settings.slq_probes = 2;
  c.probe.settings.bins = 12;
  const std::vector<std::pair<std::string, std::string>> cells{
      {"ngf", "probe.enabled=true"}, {"sam", "defense.method=sam defense.scope=full defense.batch_size=16"}};
  std::vector<std::vector<std::pair<std::string, std::string>>> runs;
  for (const char* name : {"first", "second"}) {
    c.output_dir = (work / name).string();
    fs::remove_all(c.output_dir);
    const auto r = harness::run_suite(c, cells);
    if (!r.all_ok()) return {false, "suite cell failed"};
    runs.push_back(comparable_files(c.output_dir));
  }
  std::size_t ckpt = 0, csv = 0;
  for (const auto& [name, bytes] : runs[0]) {
    ckpt += name.ends_with(".ckpt");
    csv += name.ends_with(".csv");
  }
  const bool same = runs[0] == runs[1];
  return {same && ckpt > 0 && csv > 0, std::to_string(runs[0].size()) + " files (" + std::to_string(ckpt) +
                                           " checkpoints, " + std::to_string(csv) + " CSVs) " +
                                           (same ? "byte-identical" : "differ") + " across two runs"};
}

// ----------------------------------------------------------- criteria 6 - 12

const harness::CellResult* find(const harness::SuiteResult& r, const std::string& name) {
  for (const auto& c : r.cells)
    if (c.name == name) return &c;
  return nullptr;
}

std::string metrics(const harness::CellResult& c) {
  return "acc " + fmt(c.before.acc) + "->" + fmt(c.after.acc) + ", asr " + fmt(c.before.asr) + "->" + fmt(c.after.asr);
}

Outcome missing(const std::string& cell) { return {false, "cell " + cell + " did not complete"}; }

Outcome viability(const harness::SuiteResult& r, const std::string& cell) {
  const auto* c = find(r, cell);
  if (!c || !c->ok || !c->benign) return missing(cell);
  const double gap = c->benign->acc - c->before.acc;
  return {c->before.asr >= 0.95 && gap <= 0.03, cell + ": asr " + fmt(c->before.asr) + " (>= 0.95), acc " +
                                                    fmt(c->before.acc) + " vs benign " + fmt(c->benign->acc) +
                                                    " gap " + fmt(gap) + " (<= 0.03)"};
}

Outcome purification(const harness::SuiteResult& r, const std::string& cell, const std::string& sgd_cell) {
  const auto* c = find(r, cell);
  const auto* s = find(r, sgd_cell);
  if (!c || !c->ok) return missing(cell);
  if (!s || !s->ok) return missing(sgd_cell);
  const double drop = c->before.acc - c->after.acc;
  const bool ok = c->after.asr <= 0.10 && drop <= 0.05 && s->after.asr >= 0.50;
  return {ok, cell + " ngf asr " + fmt(c->after.asr) + " (<= 0.10), acc drop " + fmt(drop) + " (<= 0.05); " +
                  "head sgd asr " + fmt(s->after.asr) + " (>= 0.50)"};
}

int claims(const fs::path& work, double& elapsed) {
  const auto t0 = Clock::now();
  harness::ExperimentConfig base;
  base.output_dir = (work / "desk").string();
  fs::remove_all(base.output_dir);
  const auto r = harness::run_suite(base, harness::standard_cells(), &std::cerr);
  elapsed = seconds_since(t0);
  for (const auto& c : r.cells)
    std::cerr << "  " << c.name << ": " << (c.ok ? metrics(c) : "error: " + c.error) << "\n";

  int failures = 0;
  failures += report(6, "BadNets attack viability", viability(r, "badnets"));

  const auto* bd = find(r, "badnets");
  Outcome o7 = missing("badnets"), o9 = missing("badnets");
  if (bd && bd->lambda_benign && bd->lambda_before && bd->lambda_after) {
    const double ratio = *bd->lambda_before / *bd->lambda_benign;
    o7 = {ratio >= 2.0, "lambda_max backdoor " + fmt(*bd->lambda_before) + " vs benign " + fmt(*bd->lambda_benign) +
                            ", ratio " + fmt(ratio) + " (>= 2)"};
    const double shrink = *bd->lambda_before / *bd->lambda_after;
    o9 = {*bd->lambda_after * 5.0 <= *bd->lambda_before, "lambda_max " + fmt(*bd->lambda_before) + " -> " +
                                                             fmt(*bd->lambda_after) + ", shrink " + fmt(shrink) +
                                                             "x (>= 5x)"};
  }
  failures += report(7, "backdoor minimum is sharper", o7);
  failures += report(8, "NGF purifies where head sgd does not", purification(r, "badnets", "badnets-sgd"));
  failures += report(9, "NGF smooths the minimum", o9);

  const auto* e0 = find(r, "badnets-eta0");
  Outcome o10 = missing("badnets-eta0");
  if (bd && bd->ok && e0 && e0->ok) {
    o10 = {bd->after.acc >= e0->after.acc && bd->after.asr <= 0.10 && e0->after.asr <= 0.10,
           "eta 0.1: acc " + fmt(bd->after.acc) + " asr " + fmt(bd->after.asr) + "; eta 0: acc " +
               fmt(e0->after.acc) + " asr " + fmt(e0->after.asr) + " (acc not lower, both asr <= 0.10)"};
  }
  failures += report(10, "regularizer ablation", o10);

  Outcome o11{true, ""};
  for (const char* cell : {"rate-0.25", "rate-0.35", "rate-0.50"}) {
    const auto* c = find(r, cell);
    if (!c || !c->ok) {
      o11 = missing(cell);
      break;
    }
    o11.pass = o11.pass && c->after.asr <= 0.10;
    o11.detail += (o11.detail.empty() ? "" : ", ") + std::string(cell) + " asr " + fmt(c->after.asr);
  }
  if (o11.pass || !o11.detail.starts_with("cell")) o11.detail += " (each <= 0.10)";
  failures += report(11, "high poison rates", o11);

  Outcome o12{true, ""};
  for (const auto& [cell, sgd] : {std::pair{"blend", "blend-sgd"}, std::pair{"sig", "sig-sgd"}}) {
    const Outcome v = viability(r, cell), p = purification(r, cell, sgd);
    o12.pass = o12.pass && v.pass && p.pass;
    o12.detail += (o12.detail.empty() ? "" : " | ") + v.detail + "; " + p.detail;
  }
  failures += report(12, "Blend and SIG", o12);
  return failures;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string part = "all";
  std::string work = "acceptance_runs";
  app.add_option("part", part, "oracles | claims | all")->check(CLI::IsMember({"oracles", "claims", "all"}));
  app.add_option("--work", work, "Directory for run outputs");
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  if (part == "oracles" || part == "all") {
    const auto t0 = Clock::now();
    failures += report(1, "gradient correctness", gradients());
    failures += report(2, "Fisher definition", fisher());
    failures += report(3, "NGD step", ngd());
    failures += report(4, "Hessian probes", hessian_probes());
    failures += report(5, "determinism", determinism(fs::path(work) / "determinism"));
    const double s = seconds_since(t0);
    const bool in_budget = s < 120.0;
    std::cout << "oracle suite " << (in_budget ? "PASS" : "FAIL") << "  runtime " << fmt(s) << " s (< 120 s)\n";
    failures += in_budget ? 0 : 1;
  }
  if (part == "claims" || part == "all") {
    double s = 0.0;
    failures += claims(fs::path(work), s);
    const bool in_budget = s < 900.0;
    std::cout << "claim suite  " << (in_budget ? "PASS" : "FAIL") << "  runtime " << fmt(s) << " s (< 900 s)\n";
    failures += in_budget ? 0 : 1;
  }
  std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " check(s) failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
