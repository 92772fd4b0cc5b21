#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ngf/numerics.hpp"

namespace ngf::data {

using numerics::RngState;
using numerics::Tensor;

struct ImageDims {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t size() const noexcept { return channels * height * width; }
  bool operator==(const ImageDims&) const = default;
};

struct Provenance {
  bool poisoned = false;
  int original_label = -1;  // meaningful only when poisoned

  bool operator==(const Provenance&) const = default;
};

/// Images are n x C x H x W with values in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::vector<Provenance> provenance;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  ImageDims dims() const;
  std::vector<std::size_t> image_shape() const;

  Dataset subset(const std::vector<std::size_t>& indices) const;
  std::size_t poisoned_count() const noexcept;
  std::string digest() const;
  /// Throws on any broken invariant (shape, label range, pixel range).
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

Dataset make_dataset(ImageDims dims, std::size_t classes);
Dataset concat(const Dataset& a, const Dataset& b);

struct SynthOptions {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  ImageDims dims{};
  double noise = 0.1;
  double blob_sigma = 0.0;  // pixels; 0 picks height / 5
  double contrast = 1.0;    // scales every class colour
};

/// Class-conditional Gaussian blobs: each class owns a blob center and a
/// colour; samples add N(0, noise^2) pixel noise, are clamped to [0, 1] and
/// quantized to 8 bits. Output is balanced and shuffled.
Dataset gen_synth(RngState& rng, const SynthOptions& options);

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes = 0);
void write_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset load_cifar_bin(const std::vector<std::filesystem::path>& paths);
void write_cifar_bin(const Dataset& d, const std::filesystem::path& path);

enum class TriggerKind { patch, blend, sig };

struct TriggerSpec {
  TriggerKind kind = TriggerKind::patch;
  // patch
  std::size_t size = 3;
  std::optional<std::size_t> row;  // top-left corner; unset = bottom-right placement
  std::optional<std::size_t> col;
  double intensity = 1.0;
  // blend
  double alpha = 0.2;
  std::uint64_t pattern_seed = 1234;
  // sig
  double amplitude = 0.08;
  double frequency = 6.0;

  static TriggerSpec patch(std::size_t size = 3, double intensity = 1.0);
  static TriggerSpec blend(double alpha = 0.2, std::uint64_t pattern_seed = 1234);
  static TriggerSpec sig(double amplitude = 0.08, double frequency = 6.0);

  /// Max-norm bound on the perturbation implied by the parameters.
  double norm_budget() const noexcept;
  std::string to_string() const;
  static TriggerSpec parse(const std::string& text);

  bool operator==(const TriggerSpec&) const = default;
};

/// Applies the trigger to one C x H x W image and returns the triggered copy.
Tensor apply_trigger(const Tensor& image, const TriggerSpec& trigger);
/// Same, on a flat image buffer with the given dimensions.
void apply_trigger_inplace(std::span<double> image, ImageDims dims, const TriggerSpec& trigger);
/// Pixel mask (1 where the trigger may change the pixel) for the image dims.
std::vector<bool> trigger_support(ImageDims dims, const TriggerSpec& trigger);
Tensor blend_pattern(ImageDims dims, std::uint64_t seed);

enum class MappingKind { one, all };

struct LabelMapping {
  MappingKind kind = MappingKind::one;
  int target = 0;   // one: every poisoned label becomes target
  int shift = 1;    // all: y -> (y + shift) mod c

  int apply(int label, std::size_t classes) const noexcept;
  bool operator==(const LabelMapping&) const = default;
};

struct PoisonPlan {
  TriggerSpec trigger;
  double poison_rate = 0.1;
  LabelMapping mapping;
  bool clean_label = false;

  void validate(std::size_t classes) const;
  bool operator==(const PoisonPlan&) const = default;
};

/// Number of samples a plan triggers in a dataset of size n.
std::size_t poison_count(double rate, std::size_t n);

Dataset poison_dataset(const Dataset& d, const PoisonPlan& plan, RngState& rng);

/// Class-stratified clean validation split; returns (val, rest).
std::pair<Dataset, Dataset> split_validation(const Dataset& pool, double fraction, RngState& rng);

/// Triggers every sample whose true class is not target; labels keep the
/// true class.
Dataset make_poison_testset(const Dataset& clean_test, const TriggerSpec& trigger, int target);
/// All-to-all variant: every sample is triggered (a shifted mapping never
/// maps a class onto itself).
Dataset make_poison_testset(const Dataset& clean_test, const TriggerSpec& trigger,
                            const LabelMapping& mapping);

}  // namespace ngf::data
