// Command-line front end for the experiment harness.
#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ngf/errors.hpp"
#include "ngf/harness.hpp"

namespace fs = std::filesystem;
using namespace ngf;
using namespace ngf::harness;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;
constexpr int kCheckFailed = 3;

// Flag values are collected as text and applied on top of the config file,
// so every flag is exactly an override of one config key.
struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> flags;  // config key -> text
  std::vector<std::string> sets;             // raw key=value

  void bind(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { flags[key] = v; },
                                          help + " [" + key + "]");
  }
  void bind_switch(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_flag_function(flag, [this, key](std::int64_t) { flags[key] = "true"; }, help + " [" + key + "]");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
    for (const auto& [k, v] : flags) c.set(k, v);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
  }
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config_path, "Config file")->check(CLI::ExistingFile);
  app->add_option("--set", o.sets, "Override any config key: section.key=value (repeatable)");
  o.bind(app, "-o,--out", "run.output_dir", "Output directory");
}

void add_data_flags(CLI::App* app, Overrides& o) {
  o.bind(app, "--source", "data.source", "Dataset source: synth | idx | cifar");
  o.bind(app, "--classes", "data.classes", "Number of classes");
  o.bind(app, "--per-class", "data.per_class", "Synthetic samples per class");
  o.bind(app, "--data-seed", "data.seed", "Data seed");
  o.bind(app, "--val-fraction", "data.val_fraction", "Clean validation fraction");
}

void add_attack_flags(CLI::App* app, Overrides& o) {
  o.bind(app, "--rate", "attack.poison_rate", "Poison rate");
  o.bind(app, "--target", "attack.target", "Target label");
  o.bind(app, "--mapping", "attack.mapping", "Label mapping: one | all");
}

void add_defense_flags(CLI::App* app, Overrides& o) {
  o.bind(app, "--method", "defense.method", "Defense: none | ngf | sgd | adam | adagrad | rmsprop | sam");
  o.bind(app, "--scope", "defense.scope", "Trainable parameters: head | full");
  o.bind(app, "--eta", "defense.eta", "Curvature regularizer weight");
  o.bind(app, "--defense-lr", "defense.lr", "Defense learning rate");
  o.bind(app, "--defense-epochs", "defense.epochs", "Defense epochs");
  o.bind(app, "--damping", "defense.damping", "Fisher damping (auto for the default)");
  o.bind_switch(app, "--track", "defense.track", "Record test metrics each epoch");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

template <class F>
void write_stream(const fs::path& path, F&& f) {
  std::ostringstream ss;
  f(ss);
  write_text(path, ss.str());
}

void print_metrics(const std::string& label, const MetricsRecord& m) {
  std::cout << std::left << std::setw(10) << label << std::right << std::fixed << std::setprecision(4)
            << " acc " << m.acc << "  asr " << m.asr << "  (" << m.n_clean << " clean, " << m.n_poison
            << " poison)\n";
  std::cout.unsetf(std::ios::fixed);
}

void finish_manifest(RunManifest& m, const ExperimentConfig& c, const fs::path& dir,
                     const std::vector<fs::path>& files) {
  m.config_text = c.to_ini();
  write_text(dir / "config.ini", m.config_text);
  m.add_artifact(dir / "config.ini");
  for (const auto& f : files) m.add_artifact(f);
  write_stream(dir / "manifest.txt", [&](std::ostream& os) { m.write(os); });
}

// Restores the data splits described by the config; the checkpoint must fit them.
Network load_model(const fs::path& path, const Splits& s) {
  Network net = model::load_checkpoint(path);
  if (net.input_shape() != s.test.image_shape()) throw ConfigError("checkpoint input shape does not match the data config");
  return net;
}

int cmd_gen_data(const ExperimentConfig& c) {
  const fs::path dir = c.output_dir;
  const Splits s = prepare_splits(c);
  std::vector<fs::path> files;
  const std::pair<const char*, const Dataset*> parts[] = {{"train", &s.train},
                                                         {"train-clean", &s.train_clean},
                                                         {"val", &s.val},
                                                         {"test", &s.test},
                                                         {"poison-test", &s.poison_test}};
  fs::create_directories(dir);
  for (const auto& [name, d] : parts) {
    const fs::path img = dir / (std::string(name) + "-images.idx");
    const fs::path lab = dir / (std::string(name) + "-labels.idx");
    data::write_idx(*d, img, lab);
    files.push_back(img);
    files.push_back(lab);
    std::cout << std::left << std::setw(12) << name << std::right << d->size() << " samples";
    if (d->poisoned_count() > 0) std::cout << ", " << d->poisoned_count() << " poisoned";
    std::cout << "\n";
  }
  RunManifest m;
  finish_manifest(m, c, dir, files);
  return kOk;
}

int cmd_train(const ExperimentConfig& c, bool benign) {
  const fs::path dir = c.output_dir;
  const TrainedModel tm = benign ? train_benign(c, prepare_splits(c)) : train_backdoor(c).model;
  const std::string label = benign ? "benign" : "attacked";
  const fs::path ckpt = dir / (label + ".ckpt");
  fs::create_directories(dir);
  model::save_checkpoint(tm.net, ckpt);
  write_stream(dir / "metrics.csv", [&](std::ostream& os) { write_metrics_csv({{label, tm.metrics}}, os); });
  print_metrics(label, tm.metrics);
  RunManifest m;
  m.metrics.emplace_back(label, tm.metrics);
  m.runtimes.emplace_back("train", tm.seconds);
  finish_manifest(m, c, dir, {ckpt, dir / "metrics.csv"});
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return kOk;
}

int cmd_purify(const ExperimentConfig& c, const fs::path& model_path) {
  const fs::path dir = c.output_dir;
  const Splits s = prepare_splits(c);
  const Network net = load_model(model_path, s);
  const DefenseRun d = run_defense(c, net, s);
  fs::create_directories(dir);
  const fs::path ckpt = dir / "defended.ckpt";
  model::save_checkpoint(d.net, ckpt);
  write_stream(dir / "trace.csv", [&](std::ostream& os) { defense::write_trace_csv(d.trace, os); });
  write_stream(dir / "metrics.csv",
               [&](std::ostream& os) { write_metrics_csv({{"before", d.before}, {"after", d.after}}, os); });
  print_metrics("before", d.before);
  print_metrics("after", d.after);
  RunManifest m;
  m.metrics = {{"before", d.before}, {"after", d.after}};
  m.runtimes.emplace_back("defense", d.seconds);
  finish_manifest(m, c, dir, {model_path, ckpt, dir / "trace.csv", dir / "metrics.csv"});
  std::cout << d.method << " " << c.defense.scope << " in " << std::setprecision(3) << d.seconds << " s\n";
  if (!d.ok) {
    std::cerr << "defense stopped early: " << d.error << "\n";
    return kRuntime;
  }
  return kOk;
}

int cmd_eval(const ExperimentConfig& c, const fs::path& model_path, bool write) {
  const Splits s = prepare_splits(c);
  const Network net = load_model(model_path, s);
  const MetricsRecord m = evaluate(net, s.test, s.poison_test, c.mapping());
  print_metrics("model", m);
  if (write) {
    write_stream(fs::path(c.output_dir) / "metrics.csv", [&](std::ostream& os) { write_metrics_csv({{"model", m}}, os); });
  }
  return kOk;
}

int cmd_smoothness(ExperimentConfig c, const fs::path& model_path) {
  const fs::path dir = c.output_dir;
  const Splits s = prepare_splits(c);
  const Network net = load_model(model_path, s);
  const auto report = measure(net, s, c.probe);
  fs::create_directories(dir);
  std::ostringstream summary;
  hessian::write_summary(report, summary);
  std::cout << summary.str();
  write_text(dir / "smoothness.txt", summary.str());
  std::vector<fs::path> files{model_path, dir / "smoothness.txt"};
  if (report.density) {
    write_stream(dir / "density.csv", [&](std::ostream& os) { hessian::write_density_csv(*report.density, os); });
    files.push_back(dir / "density.csv");
  }
  RunManifest m;
  m.smoothness.emplace_back("model", summary.str());
  finish_manifest(m, c, dir, files);
  return kOk;
}

int print_suite(const SuiteResult& r) {
  std::cout << std::left << std::setw(14) << "cell" << std::right << std::setw(9) << "acc0" << std::setw(9) << "asr0"
            << std::setw(9) << "acc1" << std::setw(9) << "asr1" << "  status\n";
  for (const auto& cell : r.cells) {
    std::cout << std::left << std::setw(14) << cell.name << std::right << std::fixed << std::setprecision(4);
    if (cell.before.n_clean > 0) {
      std::cout << std::setw(9) << cell.before.acc << std::setw(9) << cell.before.asr << std::setw(9) << cell.after.acc
                << std::setw(9) << cell.after.asr;
    } else {
      std::cout << std::setw(36) << "";
    }
    std::cout.unsetf(std::ios::fixed);
    if (!cell.ok) std::cout << "  error: " << cell.error;
    else if (cell.failed_checks.empty()) std::cout << "  pass";
    else {
      std::cout << "  fail:";
      for (const auto& f : cell.failed_checks) std::cout << " [" << f << "]";
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_suite(const ExperimentConfig& c, const std::string& config_path, const std::vector<std::string>& only,
              bool check) {
  std::vector<std::pair<std::string, std::string>> cells;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    cells = suite_cells_from_ini(ss.str());
  }
  if (cells.empty()) cells = standard_cells();
  if (!only.empty()) {
    std::erase_if(cells, [&](const auto& cell) { return std::find(only.begin(), only.end(), cell.first) == only.end(); });
    if (cells.empty()) throw ConfigError("--cell selected no cells");
  }
  const SuiteResult r = run_suite(c, cells, &std::cerr);
  print_suite(r);
  std::cout << "aggregate " << (fs::path(c.output_dir) / "aggregate.csv").string() << "\n";
  if (!r.all_ok()) return kRuntime;
  if (check && !r.all_checks_pass()) return kCheckFailed;
  return kOk;
}

// Splits a CSV line, honoring double quotes.
std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    else if (ch == ',' && !quoted) out.emplace_back();
    else out.back() += ch;
  }
  return out;
}

int cmd_report(const fs::path& dir, bool check) {
  const fs::path path = dir / "aggregate.csv";
  std::ifstream in(path);
  if (!in) throw Error("no aggregate.csv in " + dir.string());
  std::string line;
  std::getline(in, line);
  const auto header = csv_fields(line);
  const auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error("aggregate.csv lacks column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cell = col("cell"), status = col("status"), failed = col("failed_checks");
  const std::vector<std::string> shown = {"acc_benign", "acc_before", "asr_before", "acc_after", "asr_after",
                                          "lambda_benign", "lambda_before", "lambda_after"};
  std::vector<std::size_t> idx;
  for (const auto& s : shown) idx.push_back(col(s));

  std::cout << std::left << std::setw(14) << "cell";
  for (const auto& s : shown) std::cout << std::right << std::setw(14) << s;
  std::cout << "  status\n";
  bool all_pass = true, any_error = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line);
    if (f.size() != header.size()) throw Error("malformed row in aggregate.csv: " + line);
    std::cout << std::left << std::setw(14) << f[cell];
    for (std::size_t i : idx) std::cout << std::right << std::setw(14) << (f[i].empty() ? "-" : f[i]);
    std::cout << "  " << f[status];
    if (!f[failed].empty()) std::cout << " [" << f[failed] << "]";
    std::cout << "\n";
    all_pass = all_pass && f[status] == "pass";
    any_error = any_error || f[status] == "error";
  }
  if (any_error) return kRuntime;
  if (check && !all_pass) return kCheckFailed;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor purification with natural gradient fine-tuning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ngf 1.0");

  Overrides o;
  fs::path model_path;
  bool benign = false, check = false, write_eval = false;
  std::string attack_plan;
  std::vector<std::string> only;
  fs::path report_dir;

  auto* gen = app.add_subcommand("gen-data", "Generate or load the pool and write every split as IDX files");
  add_common(gen, o);
  add_data_flags(gen, o);
  add_attack_flags(gen, o);
  o.bind(gen, "--trigger", "attack.trigger", "Trigger, e.g. patch:size=3 | blend:alpha=0.2 | sig:amplitude=0.08");

  auto* train = app.add_subcommand("train", "Train a benign control or a backdoored model");
  add_common(train, o);
  add_data_flags(train, o);
  add_attack_flags(train, o);
  auto* mode = train->add_option_group("mode");
  mode->add_flag("--benign", benign, "Train on the clean training split");
  mode->add_option("--attack", attack_plan, "Train on the poisoned split with this trigger [attack.trigger]");
  mode->require_option(1);
  o.bind(train, "--epochs", "train.epochs", "Training epochs");
  o.bind(train, "--lr", "train.lr", "Learning rate");
  o.bind(train, "--batch", "train.batch_size", "Minibatch size");
  o.bind(train, "--seed", "train.seed", "Training seed");

  auto* purify = app.add_subcommand("purify", "Run a defense on a trained checkpoint");
  add_common(purify, o);
  add_data_flags(purify, o);
  add_attack_flags(purify, o);
  o.bind(purify, "--trigger", "attack.trigger", "Trigger used to build the poison test set");
  purify->add_option("-m,--model", model_path, "Checkpoint to purify")->required()->check(CLI::ExistingFile);
  add_defense_flags(purify, o);

  auto* eval = app.add_subcommand("eval", "Report clean accuracy and attack success rate of a checkpoint");
  add_common(eval, o);
  add_data_flags(eval, o);
  add_attack_flags(eval, o);
  o.bind(eval, "--trigger", "attack.trigger", "Trigger used to build the poison test set");
  eval->add_option("-m,--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_flag("--write", write_eval, "Also write metrics.csv to the output directory");

  auto* smooth = app.add_subcommand("smoothness", "Hessian spectrum probes of a checkpoint on clean training data");
  add_common(smooth, o);
  add_data_flags(smooth, o);
  smooth->add_option("-m,--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  o.bind(smooth, "--samples", "probe.max_samples", "Probe sample cap");
  o.bind(smooth, "--probe-seed", "probe.seed", "Probe seed");
  o.bind(smooth, "--trace-probes", "probe.trace_probes", "Hutchinson probes");
  o.bind(smooth, "--lanczos-steps", "probe.lanczos_steps", "Lanczos steps per density probe");
  o.bind(smooth, "--bins", "probe.bins", "Density histogram bins");

  auto* suite = app.add_subcommand("suite", "Run the experiment matrix ([suite] section or the standard cells)");
  add_common(suite, o);
  add_data_flags(suite, o);
  add_defense_flags(suite, o);
  suite->add_option("--cell", only, "Run only these cells (repeatable)");
  suite->add_flag("--check", check, "Exit with status 3 when any cell misses its thresholds");

  auto* report = app.add_subcommand("report", "Print a suite's aggregate table");
  report->add_option("dir", report_dir, "Suite output directory")->required()->check(CLI::ExistingDirectory);
  report->add_flag("--check", check, "Exit with status 3 unless every cell passed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  ExperimentConfig config;
  try {
    if (!report->parsed()) {
      if (!attack_plan.empty()) o.flags["attack.trigger"] = attack_plan;
      config = o.resolve();
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config);
    if (train->parsed()) return cmd_train(config, benign);
    if (purify->parsed()) return cmd_purify(config, model_path);
    if (eval->parsed()) return cmd_eval(config, model_path, write_eval);
    if (smooth->parsed()) return cmd_smoothness(config, model_path);
    if (suite->parsed()) return cmd_suite(config, o.config_path, only, check);
    if (report->parsed()) return cmd_report(report_dir, check);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
