#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ngf/data.hpp"
#include "ngf/hessian.hpp"
#include "ngf/model.hpp"
#include "ngf/ngf.hpp"

// Experiment pipelines: data preparation, attack training, defenses,
// metrics, configuration files, manifests and the suite runner.
namespace ngf::harness {

using data::Dataset;
using model::Network;

struct MetricsRecord {
  double acc = 0.0;
  double asr = 0.0;
  std::size_t n_clean = 0;
  std::size_t n_poison = 0;
  std::string model_digest;
  std::string timestamp;  // UTC, ISO 8601
};

/// acc over clean_test, asr = fraction of poison_test predicted as target.
MetricsRecord evaluate(const Network& net, const Dataset& clean_test, const Dataset& poison_test, int target);
/// All-to-all form: a poison sample counts when predicted as mapping(true label).
MetricsRecord evaluate(const Network& net, const Dataset& clean_test, const Dataset& poison_test,
                       const data::LabelMapping& mapping);

struct DataSection {
  std::string source = "synth";  // synth | idx | cifar
  std::string images;            // idx image file
  std::string labels;            // idx label file
  std::string files;             // cifar batch files, comma separated
  std::size_t classes = 10;
  std::size_t per_class = 400;   // synth pool size per class
  std::size_t channels = 3;
  std::size_t height = 12;
  std::size_t width = 12;
  double noise = 0.1;
  double contrast = 1.0;
  double test_fraction = 0.25;
  double val_fraction = 0.01;
  std::uint64_t seed = 2024;
};

struct ModelSection {
  std::string arch = "cnn";  // cnn | mlp | custom
  std::size_t channels1 = 8;
  std::size_t channels2 = 16;
  std::size_t hidden = 64;
  std::string layers;        // custom layer text
};

struct TrainSection {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 5;
};

struct AttackSection {
  std::string trigger = "patch:size=3,intensity=1";
  double poison_rate = 0.1;
  std::string mapping = "one";  // one | all
  int target = 0;
  int shift = 1;
  bool clean_label = false;
};

struct DefenseSection {
  std::string method = "ngf";  // none | ngf | sgd | adam | adagrad | rmsprop | sam
  std::string scope = "head";  // head | full
  double eta = 0.1;
  double lr = 0.01;
  double lr_factor = 0.1;
  std::size_t lr_interval = 40;
  std::size_t epochs = 100;
  std::optional<double> damping;
  double momentum = 0.0;
  double rho = 0.05;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  bool track = false;  // per-epoch acc/asr on the test sets in the trace
};

struct ProbeSection {
  bool enabled = false;  // suite cells: probe the benign control and the model before/after the defense
  std::size_t max_samples = 2048;
  hessian::SmoothnessSettings settings;
};

/// Per-cell expectations checked by the suite; unset keys are not checked.
struct CheckSection {
  std::optional<double> asr_before_min;
  std::optional<double> acc_gap_max;        // benign acc - backdoor acc
  std::optional<double> lambda_ratio_min;   // backdoor / benign
  std::optional<double> asr_after_max;
  std::optional<double> asr_after_min;
  std::optional<double> acc_drop_max;       // acc before - acc after
  std::optional<double> lambda_shrink_min;  // before / after
  std::string acc_not_below;                // another cell's acc_after
};

struct ExperimentConfig {
  DataSection data;
  ModelSection model;
  TrainSection train;
  AttackSection attack;
  DefenseSection defense;
  ProbeSection probe;
  CheckSection check;
  std::string output_dir = "runs/default";

  /// Sets one "section.key" from its text form; throws ConfigError on an
  /// unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& key) const;
  static std::vector<std::string> keys();

  std::string to_ini() const;
  /// Unknown sections other than [suite] are rejected.
  static ExperimentConfig from_ini(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::vector<model::LayerSpec> layer_spec() const;
  data::PoisonPlan poison_plan() const;
  data::LabelMapping mapping() const;
  defense::NgfConfig ngf_config() const;
  defense::BaselineConfig baseline_config() const;
  void validate() const;

  bool operator==(const ExperimentConfig&) const;
};

/// Suite cells declared in a [suite] section: name = "key=value key=value".
std::vector<std::pair<std::string, std::string>> suite_cells_from_ini(const std::string& text);

struct Splits {
  Dataset train;        // poisoned training set
  Dataset train_clean;  // the same samples before poisoning
  Dataset val;          // clean, disjoint from train
  Dataset test;
  Dataset poison_test;
};

/// Loads or generates the pool and derives every split from data.seed.
Dataset load_pool(const ExperimentConfig& config);
Splits prepare_splits(const ExperimentConfig& config);
/// Splits with the attack disabled: train equals train_clean.
Splits benign_splits(const Splits& splits);

/// Minibatch sgd with per-epoch shuffling; throws TrainingError on a
/// non-finite loss.
Network train_network(const Dataset& train, const ExperimentConfig& config);

struct TrainedModel {
  Network net;
  MetricsRecord metrics;
  double seconds = 0.0;
};

struct AttackRun {
  Splits splits;
  TrainedModel model;
};

AttackRun train_backdoor(const ExperimentConfig& config);
/// Same seed and schedule on the clean training split.
TrainedModel train_benign(const ExperimentConfig& config, const Splits& splits);

struct DefenseRun {
  Network net;
  MetricsRecord before;
  MetricsRecord after;
  std::vector<defense::EpochRecord> trace;
  std::string method;
  double seconds = 0.0;
  bool ok = true;
  std::string error;
};

DefenseRun run_defense(const ExperimentConfig& config, const Network& net, const Splits& splits);

/// The first max_samples samples of the clean training split.
Dataset probe_subset(const Splits& splits, std::size_t max_samples);
hessian::SmoothnessReport measure(const Network& net, const Splits& splits, const ProbeSection& probe);

struct RunManifest {
  std::string config_text;
  std::vector<std::pair<std::string, std::string>> artifacts;  // path, digest
  std::vector<std::pair<std::string, MetricsRecord>> metrics;  // label, record
  std::vector<std::pair<std::string, std::string>> smoothness; // label, summary text
  std::vector<std::pair<std::string, double>> runtimes;        // label, seconds

  /// Digests the file as it is on disk now; throws if it does not exist.
  void add_artifact(const std::filesystem::path& path);
  void write(std::ostream& out) const;
};

std::string file_digest(const std::filesystem::path& path);
void write_metrics_csv(const std::vector<std::pair<std::string, MetricsRecord>>& rows, std::ostream& out);

struct CellResult {
  std::string name;
  ExperimentConfig config;
  MetricsRecord before;
  MetricsRecord after;
  std::optional<MetricsRecord> benign;
  std::optional<double> lambda_benign;
  std::optional<double> lambda_before;
  std::optional<double> lambda_after;
  double defense_seconds = 0.0;
  bool ok = true;
  std::string error;
  std::vector<std::string> failed_checks;
};

struct SuiteResult {
  std::vector<CellResult> cells;
  bool all_ok() const;
  bool all_checks_pass() const;
};

/// Overrides for the standard desk matrix: the BadNets cell with probes, its
/// head-only sgd and eta = 0 companions, high poison rates, Blend and SIG.
std::vector<std::pair<std::string, std::string>> standard_cells();

/// Runs every cell (base config plus its overrides), writes per-cell outputs
/// under base.output_dir/<cell>, and an aggregate CSV at
/// base.output_dir/aggregate.csv. Trained models are shared between cells
/// with identical data, model, training and attack settings.
SuiteResult run_suite(const ExperimentConfig& base, const std::vector<std::pair<std::string, std::string>>& cells,
                      std::ostream* log = nullptr);

void write_aggregate_csv(const SuiteResult& result, std::ostream& out);
/// Applies each cell's checks; fills failed_checks.
void apply_checks(SuiteResult& result);

}  // namespace ngf::harness
