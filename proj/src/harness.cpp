#include "ngf/harness.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <boost/uuid/detail/sha1.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ngf/errors.hpp"

namespace ngf::harness {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_short(*v) : std::string(); }

// ---- text <-> value -------------------------------------------------------

[[noreturn]] void bad_value(const std::string& key, const std::string& text, const char* what) {
  throw ConfigError("config key '" + key + "': '" + text + "' is not " + what);
}

std::string to_text(const std::string& v) { return v; }
std::string to_text(double v) { return fmt(v); }
std::string to_text(std::size_t v) { return std::to_string(v); }
std::string to_text(int v) { return std::to_string(v); }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

template <typename T>
T from_text(const std::string& key, const std::string& text);

template <>
std::string from_text<std::string>(const std::string&, const std::string& text) {
  return text;
}

template <>
double from_text<double>(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) bad_value(key, text, "a number");
  return v;
}

template <>
std::size_t from_text<std::size_t>(const std::string& key, const std::string& text) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    bad_value(key, text, "a non-negative integer");
  }
  return v;
}

template <>
int from_text<int>(const std::string& key, const std::string& text) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) bad_value(key, text, "an integer");
  return v;
}

template <>
bool from_text<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  bad_value(key, text, "a boolean");
}

template <>
std::optional<double> from_text<std::optional<double>>(const std::string& key, const std::string& text) {
  if (text.empty() || text == "auto" || text == "none") return std::nullopt;
  return from_text<double>(key, text);
}

struct Binding {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Access>
Binding field(std::string key, Access access) {
  using T = std::remove_cvref_t<decltype(access(std::declval<ExperimentConfig&>()))>;
  Binding b;
  b.key = key;
  b.get = [access](const ExperimentConfig& c) { return to_text(access(const_cast<ExperimentConfig&>(c))); };
  b.set = [access, key](ExperimentConfig& c, const std::string& v) { access(c) = from_text<T>(key, v); };
  return b;
}

#define NGF_FIELD(name, member) field(name, [](ExperimentConfig& c) -> auto& { return c.member; })

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      NGF_FIELD("data.source", data.source),
      NGF_FIELD("data.images", data.images),
      NGF_FIELD("data.labels", data.labels),
      NGF_FIELD("data.files", data.files),
      NGF_FIELD("data.classes", data.classes),
      NGF_FIELD("data.per_class", data.per_class),
      NGF_FIELD("data.channels", data.channels),
      NGF_FIELD("data.height", data.height),
      NGF_FIELD("data.width", data.width),
      NGF_FIELD("data.noise", data.noise),
      NGF_FIELD("data.contrast", data.contrast),
      NGF_FIELD("data.test_fraction", data.test_fraction),
      NGF_FIELD("data.val_fraction", data.val_fraction),
      NGF_FIELD("data.seed", data.seed),
      NGF_FIELD("model.arch", model.arch),
      NGF_FIELD("model.channels1", model.channels1),
      NGF_FIELD("model.channels2", model.channels2),
      NGF_FIELD("model.hidden", model.hidden),
      NGF_FIELD("model.layers", model.layers),
      NGF_FIELD("train.lr", train.lr),
      NGF_FIELD("train.momentum", train.momentum),
      NGF_FIELD("train.epochs", train.epochs),
      NGF_FIELD("train.batch_size", train.batch_size),
      NGF_FIELD("train.seed", train.seed),
      NGF_FIELD("attack.trigger", attack.trigger),
      NGF_FIELD("attack.poison_rate", attack.poison_rate),
      NGF_FIELD("attack.mapping", attack.mapping),
      NGF_FIELD("attack.target", attack.target),
      NGF_FIELD("attack.shift", attack.shift),
      NGF_FIELD("attack.clean_label", attack.clean_label),
      NGF_FIELD("defense.method", defense.method),
      NGF_FIELD("defense.scope", defense.scope),
      NGF_FIELD("defense.eta", defense.eta),
      NGF_FIELD("defense.lr", defense.lr),
      NGF_FIELD("defense.lr_factor", defense.lr_factor),
      NGF_FIELD("defense.lr_interval", defense.lr_interval),
      NGF_FIELD("defense.epochs", defense.epochs),
      NGF_FIELD("defense.damping", defense.damping),
      NGF_FIELD("defense.momentum", defense.momentum),
      NGF_FIELD("defense.rho", defense.rho),
      NGF_FIELD("defense.batch_size", defense.batch_size),
      NGF_FIELD("defense.seed", defense.seed),
      NGF_FIELD("defense.track", defense.track),
      NGF_FIELD("probe.enabled", probe.enabled),
      NGF_FIELD("probe.max_samples", probe.max_samples),
      NGF_FIELD("probe.seed", probe.settings.seed),
      NGF_FIELD("probe.lambda", probe.settings.want_lambda),
      NGF_FIELD("probe.trace", probe.settings.want_trace),
      NGF_FIELD("probe.density", probe.settings.want_density),
      NGF_FIELD("probe.max_iters", probe.settings.max_iters),
      NGF_FIELD("probe.tol", probe.settings.tol),
      NGF_FIELD("probe.trace_probes", probe.settings.trace_probes),
      NGF_FIELD("probe.lanczos_steps", probe.settings.lanczos_steps),
      NGF_FIELD("probe.slq_probes", probe.settings.slq_probes),
      NGF_FIELD("probe.bins", probe.settings.bins),
      NGF_FIELD("probe.fd_step", probe.settings.step),
      NGF_FIELD("check.asr_before_min", check.asr_before_min),
      NGF_FIELD("check.acc_gap_max", check.acc_gap_max),
      NGF_FIELD("check.lambda_ratio_min", check.lambda_ratio_min),
      NGF_FIELD("check.asr_after_max", check.asr_after_max),
      NGF_FIELD("check.asr_after_min", check.asr_after_min),
      NGF_FIELD("check.acc_drop_max", check.acc_drop_max),
      NGF_FIELD("check.lambda_shrink_min", check.lambda_shrink_min),
      NGF_FIELD("check.acc_not_below", check.acc_not_below),
      NGF_FIELD("run.output_dir", output_dir),
  };
  return table;
}

#undef NGF_FIELD

const Binding* find_binding(const std::string& key) {
  for (const auto& b : bindings())
    if (b.key == key) return &b;
  return nullptr;
}

std::string section_text(const ExperimentConfig& c, std::initializer_list<const char*> sections) {
  std::string out;
  for (const auto& b : bindings()) {
    for (const char* s : sections) {
      if (b.key.rfind(std::string(s) + ".", 0) == 0) out += b.key + "=" + b.get(c) + "\n";
    }
  }
  return out;
}

boost::property_tree::ptree parse_ini(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
  return pt;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void apply_overrides(ExperimentConfig& c, const std::string& overrides) {
  std::istringstream in(overrides);
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("suite override '" + token + "' is not key=value");
    c.set(token.substr(0, eq), token.substr(eq + 1));
  }
}

template <typename Write>
void write_file(const fs::path& path, Write&& write) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  write(out);
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

}  // namespace

// ---- metrics ----------------------------------------------------------------

MetricsRecord evaluate(const Network& net, const Dataset& clean_test, const Dataset& poison_test,
                       const data::LabelMapping& mapping) {
  if (clean_test.empty()) throw EvaluationError("evaluation needs a non-empty clean test set");
  if (poison_test.empty()) throw EvaluationError("evaluation needs a non-empty poison test set");
  MetricsRecord m;
  const auto clean_pred = model::predict(net, clean_test.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clean_pred.size(); ++i) correct += clean_pred[i] == clean_test.labels[i];
  const auto poison_pred = model::predict(net, poison_test.images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < poison_pred.size(); ++i) {
    hits += poison_pred[i] == mapping.apply(poison_test.labels[i], net.classes());
  }
  m.n_clean = clean_pred.size();
  m.n_poison = poison_pred.size();
  m.acc = static_cast<double>(correct) / static_cast<double>(m.n_clean);
  m.asr = static_cast<double>(hits) / static_cast<double>(m.n_poison);
  m.model_digest = net.digest();
  m.timestamp = utc_now();
  return m;
}

MetricsRecord evaluate(const Network& net, const Dataset& clean_test, const Dataset& poison_test, int target) {
  data::LabelMapping one;
  one.kind = data::MappingKind::one;
  one.target = target;
  return evaluate(net, clean_test, poison_test, one);
}

// ---- configuration ------------------------------------------------------------

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const Binding* b = find_binding(key);
  if (!b) throw ConfigError("unknown config key '" + key + "'");
  b->set(*this, value);
}

std::optional<std::string> ExperimentConfig::get(const std::string& key) const {
  const Binding* b = find_binding(key);
  if (!b) return std::nullopt;
  return b->get(*this);
}

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> out;
  for (const auto& b : bindings()) out.push_back(b.key);
  return out;
}

std::string ExperimentConfig::to_ini() const {
  std::string out, section;
  for (const auto& b : bindings()) {
    const auto dot = b.key.find('.');
    const std::string s = b.key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out += "\n";
      out += "[" + s + "]\n";
      section = s;
    }
    out += b.key.substr(dot + 1) + " = " + b.get(*this) + "\n";
  }
  return out;
}

ExperimentConfig ExperimentConfig::from_ini(const std::string& text) {
  const auto pt = parse_ini(text);
  ExperimentConfig c;
  for (const auto& [section, body] : pt) {
    if (body.empty()) {
      if (!body.data().empty()) throw ConfigError("config key '" + section + "' must sit inside a [section]");
      continue;
    }
    if (section == "suite") continue;
    for (const auto& [key, value] : body) c.set(section + "." + key, value.data());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_ini(read_file(path)); }

void ExperimentConfig::save(const fs::path& path) const {
  write_file(path, [&](std::ostream& out) { out << to_ini(); });
}

std::vector<model::LayerSpec> ExperimentConfig::layer_spec() const {
  if (model.arch == "cnn") return model::reference_cnn(model.channels1, model.channels2, data.classes);
  if (model.arch == "mlp") return model::reference_mlp(model.hidden, data.classes);
  if (model.arch == "custom") return model::parse_layers(model.layers);
  throw ConfigError("unknown architecture '" + model.arch + "' (cnn, mlp or custom)");
}

data::LabelMapping ExperimentConfig::mapping() const {
  data::LabelMapping m;
  if (attack.mapping == "one") m.kind = data::MappingKind::one;
  else if (attack.mapping == "all") m.kind = data::MappingKind::all;
  else throw ConfigError("unknown label mapping '" + attack.mapping + "' (one or all)");
  m.target = attack.target;
  m.shift = attack.shift;
  return m;
}

data::PoisonPlan ExperimentConfig::poison_plan() const {
  data::PoisonPlan p;
  p.trigger = data::TriggerSpec::parse(attack.trigger);
  p.poison_rate = attack.poison_rate;
  p.mapping = mapping();
  p.clean_label = attack.clean_label;
  return p;
}

defense::NgfConfig ExperimentConfig::ngf_config() const {
  defense::NgfConfig n;
  n.eta = defense.eta;
  n.schedule = {defense.lr, defense.lr_factor, defense.lr_interval};
  n.epochs = defense.epochs;
  n.damping = defense.damping;
  return n;
}

defense::BaselineConfig ExperimentConfig::baseline_config() const {
  defense::BaselineConfig b;
  b.optimizer = optim::parse_optimizer(defense.method);
  b.hyper.lr = defense.lr;
  b.hyper.momentum = defense.momentum;
  b.hyper.rho = defense.rho;
  if (defense.scope == "head") b.scope = model::Scope::head_only;
  else if (defense.scope == "full") b.scope = model::Scope::full;
  else throw ConfigError("unknown defense scope '" + defense.scope + "' (head or full)");
  b.epochs = defense.epochs;
  b.schedule = {defense.lr, defense.lr_factor, defense.lr_interval};
  b.batch_size = defense.batch_size;
  b.seed = defense.seed;
  return b;
}

void ExperimentConfig::validate() const {
  if (data.source != "synth" && data.source != "idx" && data.source != "cifar") {
    throw ConfigError("unknown data source '" + data.source + "' (synth, idx or cifar)");
  }
  if (data.classes < 2) throw ConfigError("need at least two classes");
  if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0, 1)");
  if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  (void)layer_spec();
  if (!(train.lr > 0.0)) throw ConfigError("training learning rate must be positive");
  if (train.epochs < 1) throw ConfigError("training needs at least one epoch");
  if (train.batch_size < 1) throw ConfigError("training batch size must be positive");
  poison_plan().validate(data.classes);
  if (defense.method == "ngf") ngf_config().validate();
  else if (defense.method != "none") baseline_config().validate();
  if (defense.scope != "head" && defense.scope != "full") {
    throw ConfigError("unknown defense scope '" + defense.scope + "' (head or full)");
  }
  if (defense.method == "ngf" && defense.scope != "head") throw ConfigError("ngf only tunes the head");
  if (probe.max_samples < 1) throw ConfigError("probe.max_samples must be positive");
}

bool ExperimentConfig::operator==(const ExperimentConfig& other) const { return to_ini() == other.to_ini(); }

std::vector<std::pair<std::string, std::string>> suite_cells_from_ini(const std::string& text) {
  const auto pt = parse_ini(text);
  std::vector<std::pair<std::string, std::string>> cells;
  if (auto suite = pt.get_child_optional("suite")) {
    for (const auto& [name, value] : *suite) cells.emplace_back(name, value.data());
  }
  return cells;
}

// ---- data and training --------------------------------------------------------

Dataset load_pool(const ExperimentConfig& c) {
  if (c.data.source == "synth") {
    data::SynthOptions o;
    o.classes = c.data.classes;
    o.per_class = c.data.per_class;
    o.dims = {c.data.channels, c.data.height, c.data.width};
    o.noise = c.data.noise;
    o.contrast = c.data.contrast;
    numerics::RngState gen = numerics::RngState(c.data.seed).split(1);
    return data::gen_synth(gen, o);
  }
  if (c.data.source == "idx") return data::load_idx(c.data.images, c.data.labels, c.data.classes);
  if (c.data.source == "cifar") {
    std::vector<fs::path> paths;
    for (const auto& f : split_list(c.data.files, ',')) paths.emplace_back(f);
    if (paths.empty()) throw ConfigError("data.files lists no CIFAR batch files");
    return data::load_cifar_bin(paths);
  }
  throw ConfigError("unknown data source '" + c.data.source + "'");
}

Splits prepare_splits(const ExperimentConfig& c) {
  const Dataset all = load_pool(c);
  const numerics::RngState root(c.data.seed);
  auto val_rng = root.split(2), poison_rng = root.split(3), test_rng = root.split(4);
  auto [test, pool] = data::split_validation(all, c.data.test_fraction, test_rng);
  auto [val, rest] = data::split_validation(pool, c.data.val_fraction, val_rng);
  const data::PoisonPlan plan = c.poison_plan();
  // A zero-rate plan on the same stream yields the clean samples in the same order.
  data::PoisonPlan clean_plan = plan;
  clean_plan.poison_rate = 0.0;
  auto clean_rng = poison_rng;
  Splits s;
  s.train = data::poison_dataset(rest, plan, poison_rng);
  s.train_clean = data::poison_dataset(rest, clean_plan, clean_rng);
  s.val = std::move(val);
  s.poison_test = plan.mapping.kind == data::MappingKind::one
                      ? data::make_poison_testset(test, plan.trigger, plan.mapping.target)
                      : data::make_poison_testset(test, plan.trigger, plan.mapping);
  s.test = std::move(test);
  return s;
}

Splits benign_splits(const Splits& splits) {
  Splits s = splits;
  s.train = s.train_clean;
  return s;
}

Network train_network(const Dataset& train, const ExperimentConfig& c) {
  if (train.empty()) throw TrainingError("training set is empty", 0);
  numerics::RngState rng(c.train.seed);
  auto init = rng.split(1), order_rng = rng.split(2);
  Network net = model::init_network(c.layer_spec(), train.image_shape(), train.classes, init);
  optim::Hyper h;
  h.lr = c.train.lr;
  h.momentum = c.train.momentum;
  auto state = optim::OptimizerState::make(optim::OptimizerKind::sgd, net.params().size(), h);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batch = c.train.batch_size;
  for (std::size_t epoch = 0; epoch < c.train.epochs; ++epoch) {
    numerics::shuffle(order, order_rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch)));
      const Dataset b = train.subset(idx);
      const model::LossGrad lg = model::loss_and_grad(net, b.images, b.labels, model::Scope::full);
      if (!std::isfinite(lg.loss)) {
        throw TrainingError("training diverged (non-finite loss) in epoch " + std::to_string(epoch), epoch);
      }
      net.set_params(optim::first_order_step(state, net.params(), lg.grad));
    }
  }
  return net;
}

AttackRun train_backdoor(const ExperimentConfig& c) {
  c.validate();
  AttackRun run;
  run.splits = prepare_splits(c);
  const auto t0 = Clock::now();
  run.model.net = train_network(run.splits.train, c);
  run.model.seconds = seconds_since(t0);
  run.model.metrics = evaluate(run.model.net, run.splits.test, run.splits.poison_test, c.mapping());
  return run;
}

TrainedModel train_benign(const ExperimentConfig& c, const Splits& splits) {
  TrainedModel m;
  const auto t0 = Clock::now();
  m.net = train_network(splits.train_clean, c);
  m.seconds = seconds_since(t0);
  m.metrics = evaluate(m.net, splits.test, splits.poison_test, c.mapping());
  return m;
}

DefenseRun run_defense(const ExperimentConfig& c, const Network& net, const Splits& splits) {
  DefenseRun r;
  r.method = c.defense.method;
  const data::LabelMapping mapping = c.mapping();
  r.before = evaluate(net, splits.test, splits.poison_test, mapping);
  defense::EpochObserver observer;
  if (c.defense.track) {
    observer = [&](const Network& n, defense::EpochRecord& rec) {
      const MetricsRecord m = evaluate(n, splits.test, splits.poison_test, mapping);
      rec.acc_val = m.acc;
      rec.asr_val = m.asr;
    };
  }
  const auto t0 = Clock::now();
  if (c.defense.method == "none") {
    r.net = net;
  } else {
    defense::FineTuneResult res;
    if (c.defense.method == "ngf") {
      defense::PurifyHooks hooks;
      hooks.observer = observer;
      res = defense::purify(net, splits.val, c.ngf_config(), hooks);
    } else {
      res = defense::finetune_baseline(net, splits.val, c.baseline_config(), observer);
    }
    r.net = std::move(res.net);
    r.trace = std::move(res.trace);
    r.ok = res.ok();
    r.error = res.error;
  }
  r.seconds = seconds_since(t0);
  r.after = evaluate(r.net, splits.test, splits.poison_test, mapping);
  return r;
}

Dataset probe_subset(const Splits& splits, std::size_t max_samples) {
  const std::size_t n = std::min(max_samples, splits.train_clean.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return splits.train_clean.subset(idx);
}

hessian::SmoothnessReport measure(const Network& net, const Splits& splits, const ProbeSection& probe) {
  return hessian::measure_smoothness(net, probe_subset(splits, probe.max_samples), probe.settings);
}

// ---- manifests and files --------------------------------------------------------

std::string file_digest(const fs::path& path) {
  if (!fs::exists(path)) throw Error("artifact '" + path.string() + "' does not exist");
  const std::string bytes = read_file(path);
  // Same digest git assigns to the file as a blob.
  boost::uuids::detail::sha1 sha;
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  sha.process_bytes(header.data(), header.size());
  sha.process_bytes(bytes.data(), bytes.size());
  boost::uuids::detail::sha1::digest_type d;
  sha.get_digest(d);
  char buf[41];
  for (int i = 0; i < 5; ++i) std::snprintf(buf + 8 * i, 9, "%08x", d[i]);
  return std::string(buf, 40);
}

void RunManifest::add_artifact(const fs::path& path) { artifacts.emplace_back(path.string(), file_digest(path)); }

void RunManifest::write(std::ostream& out) const {
  out << "# run manifest\n\n[config]\n" << config_text << "\n[artifacts]\n";
  for (const auto& [path, digest] : artifacts) out << digest << "  " << path << '\n';
  out << "\n[metrics]\n";
  for (const auto& [label, m] : metrics) {
    out << label << " acc=" << fmt(m.acc) << " asr=" << fmt(m.asr) << " n_clean=" << m.n_clean
        << " n_poison=" << m.n_poison << " model=" << m.model_digest << " at=" << m.timestamp << '\n';
  }
  for (const auto& [label, text] : smoothness) out << "\n[smoothness " << label << "]\n" << text;
  out << "\n[runtime]\n";
  for (const auto& [label, s] : runtimes) out << label << " seconds=" << fmt_short(s) << '\n';
}

void write_metrics_csv(const std::vector<std::pair<std::string, MetricsRecord>>& rows, std::ostream& out) {
  out << "label,acc,asr,n_clean,n_poison,model_digest\n";
  for (const auto& [label, m] : rows) {
    out << label << ',' << fmt(m.acc) << ',' << fmt(m.asr) << ',' << m.n_clean << ',' << m.n_poison << ','
        << m.model_digest << '\n';
  }
}

// ---- suite -------------------------------------------------------------------------

bool SuiteResult::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
}

bool SuiteResult::all_checks_pass() const {
  return std::all_of(cells.begin(), cells.end(),
                     [](const CellResult& c) { return c.ok && c.failed_checks.empty(); });
}

std::vector<std::pair<std::string, std::string>> standard_cells() {
  const std::string viable = "check.asr_before_min=0.95 check.acc_gap_max=0.03";
  const std::string purified = "check.asr_after_max=0.10 check.acc_drop_max=0.05";
  const std::string blend = "attack.trigger=blend:alpha=0.2";
  const std::string sig = "attack.trigger=sig:amplitude=0.08,frequency=5";
  return {
      {"badnets", "probe.enabled=true check.lambda_ratio_min=2 check.lambda_shrink_min=5 "
                  "check.acc_not_below=badnets-eta0 " + viable + " " + purified},
      {"badnets-sgd", "defense.method=sgd check.asr_after_min=0.50"},
      {"badnets-eta0", "defense.eta=0 check.asr_after_max=0.10"},
      {"rate-0.25", "attack.poison_rate=0.25 check.asr_after_max=0.10"},
      {"rate-0.35", "attack.poison_rate=0.35 check.asr_after_max=0.10"},
      {"rate-0.50", "attack.poison_rate=0.5 check.asr_after_max=0.10"},
      {"blend", blend + " " + viable + " " + purified},
      {"blend-sgd", blend + " defense.method=sgd check.asr_after_min=0.50"},
      {"sig", sig + " " + viable + " " + purified},
      {"sig-sgd", sig + " defense.method=sgd check.asr_after_min=0.50"},
  };
}

SuiteResult run_suite(const ExperimentConfig& base, const std::vector<std::pair<std::string, std::string>>& cells,
                      std::ostream* log) {
  SuiteResult result;
  std::map<std::string, AttackRun> attacks;
  std::map<std::string, TrainedModel> benigns;
  std::map<std::string, hessian::SmoothnessReport> probes;
  const fs::path root = base.output_dir;
  fs::create_directories(root);

  auto probe_once = [&](const Network& net, const Splits& splits, const ProbeSection& p) -> const hessian::SmoothnessReport& {
    ProbeSection ps = p;
    ps.settings.want_lambda = true;
    std::ostringstream key;
    key << net.digest() << '|' << splits.train_clean.digest() << '|' << ps.max_samples;
    ExperimentConfig tmp;
    tmp.probe = ps;
    key << section_text(tmp, {"probe"});
    auto it = probes.find(key.str());
    if (it == probes.end()) it = probes.emplace(key.str(), measure(net, splits, ps)).first;
    return it->second;
  };

  for (const auto& [name, overrides] : cells) {
    CellResult cell;
    cell.name = name;
    cell.config = base;
    try {
      apply_overrides(cell.config, overrides);
      ExperimentConfig& c = cell.config;
      const fs::path dir = root / name;
      c.output_dir = dir.string();
      c.validate();
      fs::create_directories(dir);
      RunManifest manifest;

      const std::string attack_key = section_text(c, {"data", "model", "train", "attack"});
      auto it = attacks.find(attack_key);
      if (it == attacks.end()) {
        if (log) *log << "[" << name << "] training attacked model\n";
        it = attacks.emplace(attack_key, train_backdoor(c)).first;
      }
      const AttackRun& run = it->second;
      manifest.runtimes.emplace_back("train_backdoor", run.model.seconds);

      const bool needs_benign = c.probe.enabled || c.check.acc_gap_max || c.check.lambda_ratio_min;
      const TrainedModel* benign = nullptr;
      if (needs_benign) {
        const std::string key = section_text(c, {"data", "model", "train"});
        auto bt = benigns.find(key);
        if (bt == benigns.end()) {
          if (log) *log << "[" << name << "] training benign control\n";
          bt = benigns.emplace(key, train_benign(c, run.splits)).first;
        }
        benign = &bt->second;
        cell.benign = benign->metrics;
        manifest.runtimes.emplace_back("train_benign", benign->seconds);
      }

      if (log) *log << "[" << name << "] defense " << c.defense.method << "\n";
      const DefenseRun d = run_defense(c, run.model.net, run.splits);
      cell.before = d.before;
      cell.after = d.after;
      cell.defense_seconds = d.seconds;
      cell.ok = d.ok;
      cell.error = d.error;
      manifest.runtimes.emplace_back("defense", d.seconds);

      std::vector<std::pair<std::string, MetricsRecord>> rows;
      if (benign) rows.emplace_back("benign", benign->metrics);
      rows.emplace_back("before", d.before);
      rows.emplace_back("after", d.after);

      c.save(dir / "config.ini");
      manifest.add_artifact(dir / "config.ini");
      if (benign) {
        model::save_checkpoint(benign->net, dir / "benign.ckpt");
        manifest.add_artifact(dir / "benign.ckpt");
      }
      model::save_checkpoint(run.model.net, dir / "attacked.ckpt");
      manifest.add_artifact(dir / "attacked.ckpt");
      model::save_checkpoint(d.net, dir / "defended.ckpt");
      manifest.add_artifact(dir / "defended.ckpt");
      write_file(dir / "trace.csv", [&](std::ostream& o) { defense::write_trace_csv(d.trace, o); });
      manifest.add_artifact(dir / "trace.csv");
      write_file(dir / "metrics.csv", [&](std::ostream& o) { write_metrics_csv(rows, o); });
      manifest.add_artifact(dir / "metrics.csv");

      if (c.probe.enabled) {
        std::vector<std::pair<std::string, const Network*>> targets;
        if (benign) targets.emplace_back("benign", &benign->net);
        targets.emplace_back("before", &run.model.net);
        if (d.ok) targets.emplace_back("after", &d.net);
        for (const auto& [label, net] : targets) {
          if (log) *log << "[" << name << "] probing " << label << "\n";
          const auto t0 = Clock::now();
          const hessian::SmoothnessReport& rep = probe_once(*net, run.splits, c.probe);
          manifest.runtimes.emplace_back("probe_" + label, seconds_since(t0));
          const double lam = rep.lambda->value;
          if (label == "benign") cell.lambda_benign = lam;
          else if (label == "before") cell.lambda_before = lam;
          else cell.lambda_after = lam;
          std::ostringstream summary;
          hessian::write_summary(rep, summary);
          manifest.smoothness.emplace_back(label, summary.str());
          write_file(dir / ("smoothness_" + label + ".txt"), [&](std::ostream& o) { o << summary.str(); });
          manifest.add_artifact(dir / ("smoothness_" + label + ".txt"));
          if (rep.density) {
            write_file(dir / ("density_" + label + ".csv"),
                       [&](std::ostream& o) { hessian::write_density_csv(*rep.density, o); });
            manifest.add_artifact(dir / ("density_" + label + ".csv"));
          }
        }
      }

      manifest.config_text = c.to_ini();
      manifest.metrics = rows;
      write_file(dir / "manifest.txt", [&](std::ostream& o) { manifest.write(o); });
    } catch (const Error& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    if (log && !cell.ok) *log << "[" << name << "] failed: " << cell.error << "\n";
    result.cells.push_back(std::move(cell));
  }

  apply_checks(result);
  write_file(root / "aggregate.csv", [&](std::ostream& o) { write_aggregate_csv(result, o); });
  return result;
}

void apply_checks(SuiteResult& result) {
  constexpr double slack = 1e-12;
  for (auto& cell : result.cells) {
    cell.failed_checks.clear();
    if (!cell.ok) {
      cell.failed_checks.push_back("run failed");
      continue;
    }
    const CheckSection& k = cell.config.check;
    auto fail = [&](const std::string& what) { cell.failed_checks.push_back(what); };
    if (k.asr_before_min && cell.before.asr + slack < *k.asr_before_min) {
      fail("asr_before " + fmt_short(cell.before.asr) + " < " + fmt_short(*k.asr_before_min));
    }
    if (k.acc_gap_max) {
      if (!cell.benign) fail("acc_gap: no benign control");
      else if (cell.benign->acc - cell.before.acc > *k.acc_gap_max + slack)
        fail("acc_gap " + fmt_short(cell.benign->acc - cell.before.acc) + " > " + fmt_short(*k.acc_gap_max));
    }
    if (k.lambda_ratio_min) {
      if (!cell.lambda_benign || !cell.lambda_before) fail("lambda_ratio: not measured");
      else if (*cell.lambda_before < *k.lambda_ratio_min * *cell.lambda_benign)
        fail("lambda_ratio " + fmt_short(*cell.lambda_before / *cell.lambda_benign) + " < " +
             fmt_short(*k.lambda_ratio_min));
    }
    if (k.asr_after_max && cell.after.asr > *k.asr_after_max + slack) {
      fail("asr_after " + fmt_short(cell.after.asr) + " > " + fmt_short(*k.asr_after_max));
    }
    if (k.asr_after_min && cell.after.asr + slack < *k.asr_after_min) {
      fail("asr_after " + fmt_short(cell.after.asr) + " < " + fmt_short(*k.asr_after_min));
    }
    if (k.acc_drop_max && cell.before.acc - cell.after.acc > *k.acc_drop_max + slack) {
      fail("acc_drop " + fmt_short(cell.before.acc - cell.after.acc) + " > " + fmt_short(*k.acc_drop_max));
    }
    if (k.lambda_shrink_min) {
      if (!cell.lambda_before || !cell.lambda_after) fail("lambda_shrink: not measured");
      else if (*cell.lambda_after * *k.lambda_shrink_min > *cell.lambda_before)
        fail("lambda_shrink " + fmt_short(*cell.lambda_before / *cell.lambda_after) + " < " +
             fmt_short(*k.lambda_shrink_min));
    }
    if (!k.acc_not_below.empty()) {
      const auto other = std::find_if(result.cells.begin(), result.cells.end(),
                                      [&](const CellResult& c) { return c.name == k.acc_not_below; });
      if (other == result.cells.end() || !other->ok) fail("acc_not_below: cell " + k.acc_not_below + " missing");
      else if (cell.after.acc + slack < other->after.acc)
        fail("acc_after " + fmt_short(cell.after.acc) + " < " + k.acc_not_below + " " + fmt_short(other->after.acc));
    }
  }
}

void write_aggregate_csv(const SuiteResult& result, std::ostream& out) {
  out << "cell,trigger,poison_rate,method,scope,eta,status,acc_benign,acc_before,asr_before,acc_after,asr_after,"
         "lambda_benign,lambda_before,lambda_after,failed_checks\n";
  for (const auto& c : result.cells) {
    std::string failed;
    for (const auto& f : c.failed_checks) failed += (failed.empty() ? "" : "; ") + f;
    const bool measured = c.ok || c.before.n_clean > 0;
    out << c.name << ",\"" << c.config.attack.trigger << "\"," << fmt_short(c.config.attack.poison_rate) << ','
        << c.config.defense.method << ',' << c.config.defense.scope << ',' << fmt_short(c.config.defense.eta) << ','
        << (c.ok ? (c.failed_checks.empty() ? "pass" : "fail") : "error") << ','
        << (c.benign ? fmt_short(c.benign->acc) : "") << ',' << (measured ? fmt_short(c.before.acc) : "") << ','
        << (measured ? fmt_short(c.before.asr) : "") << ',' << (measured ? fmt_short(c.after.acc) : "") << ','
        << (measured ? fmt_short(c.after.asr) : "") << ',' << fmt_opt(c.lambda_benign) << ','
        << fmt_opt(c.lambda_before) << ',' << fmt_opt(c.lambda_after) << ",\"" << failed << "\"\n";
  }
}

}  // namespace ngf::harness
