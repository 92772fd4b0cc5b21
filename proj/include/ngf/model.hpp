#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ngf/numerics.hpp"

namespace ngf::model {

using numerics::RngState;
using numerics::Tensor;
using numerics::Vector;

enum class LayerKind { dense, conv2d, relu, maxpool, flatten };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;   // dense outputs or conv output channels
  std::size_t kernel = 0;  // conv kernel side
  std::size_t stride = 1;  // conv stride
  std::size_t window = 0;  // maxpool window (stride == window)

  static LayerSpec dense(std::size_t out) { return {LayerKind::dense, out, 0, 1, 0}; }
  static LayerSpec conv2d(std::size_t channels, std::size_t kernel, std::size_t stride = 1) {
    return {LayerKind::conv2d, channels, kernel, stride, 0};
  }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 1, 0}; }
  static LayerSpec maxpool(std::size_t window) { return {LayerKind::maxpool, 0, 0, 1, window}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 1, 0}; }

  /// Canonical text form, e.g. "conv2d(8,3,1)" or "dense(10)".
  std::string to_string() const;
  static LayerSpec parse(const std::string& text);

  bool operator==(const LayerSpec&) const = default;
};

std::string layers_to_string(const std::vector<LayerSpec>& layers);
std::vector<LayerSpec> parse_layers(const std::string& text);

/// Reference architectures used throughout the experiments.
std::vector<LayerSpec> reference_mlp(std::size_t hidden, std::size_t classes);
std::vector<LayerSpec> reference_cnn(std::size_t channels1, std::size_t channels2, std::size_t classes);

struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const Segment&) const = default;
};

struct LayerLayout {
  std::vector<std::size_t> in_shape;
  std::vector<std::size_t> out_shape;
  Segment params;  // weights followed by biases; empty for parameterless layers
  std::size_t weight_count = 0;
  bool operator==(const LayerLayout&) const = default;
};

enum class Scope { full, head_only };

class Network {
 public:
  Network() = default;

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<LayerLayout>& layout() const noexcept { return layout_; }
  const std::vector<std::size_t>& input_shape() const noexcept { return input_shape_; }
  std::size_t input_size() const noexcept;
  std::size_t classes() const noexcept { return classes_; }

  std::span<const double> params() const noexcept { return params_; }
  std::span<double> params() noexcept { return params_; }
  void set_params(std::span<const double> values);

  /// Final dense layer: weights (classes x head_input_dim) then biases.
  Segment head() const noexcept { return layout_.back().params; }
  std::size_t head_input_dim() const noexcept;
  std::span<const double> head_params() const noexcept;
  std::span<double> head_params() noexcept;
  void set_head_params(std::span<const double> values);
  /// Everything before the head segment.
  std::span<const double> backbone_params() const noexcept;
  std::string backbone_digest() const;
  std::string digest() const;

  std::size_t scope_size(Scope scope) const noexcept;

  bool operator==(const Network&) const = default;

 private:
  friend Network init_network(const std::vector<LayerSpec>&, const std::vector<std::size_t>&,
                              std::size_t, RngState&);
  friend Network build_network(const std::vector<LayerSpec>&, const std::vector<std::size_t>&,
                               std::size_t);

  std::vector<LayerSpec> layers_;
  std::vector<LayerLayout> layout_;
  std::vector<std::size_t> input_shape_;
  std::size_t classes_ = 0;
  std::vector<double> params_;
};

/// Validates the layer chain and returns a zero-parameter network.
Network build_network(const std::vector<LayerSpec>& spec, const std::vector<std::size_t>& input_shape,
                      std::size_t classes);

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
Network init_network(const std::vector<LayerSpec>& spec, const std::vector<std::size_t>& input_shape,
                     std::size_t classes, RngState& rng);
Network init_network(const std::vector<LayerSpec>& spec, std::size_t input_dim, std::size_t classes,
                     RngState& rng);

Tensor forward(const Network& net, const Tensor& x);

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

LossGrad loss_and_grad(const Network& net, const Tensor& x, std::span<const int> labels, Scope scope);

/// Mean cross-entropy of precomputed logits (log-sum-exp stabilized).
double cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Head-input activations of a fixed input batch, valid only while the
/// backbone parameters match `backbone_digest`.
struct FeatureCache {
  Tensor features;
  std::string backbone_digest;
  std::string data_digest;
};

FeatureCache backbone_features(const Network& net, const Tensor& x);
void check_fresh(const Network& net, const FeatureCache& cache);
void check_fresh(const Network& net, const FeatureCache& cache, const Tensor& x);

/// Logits of the head applied to cached features.
Tensor head_logits(const Network& net, const FeatureCache& cache);
LossGrad head_loss_and_grad(const Network& net, const FeatureCache& cache, std::span<const int> labels);

/// Row j: gradient of log p(y_j | x_j) with respect to the head parameters.
Tensor per_sample_head_grads(const Network& net, const FeatureCache& cache, const Tensor& x_val,
                             std::span<const int> y_val);

std::vector<int> predict(const Network& net, const Tensor& x);
std::vector<int> argmax_rows(const Tensor& logits);

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const Network& net);
Network checkpoint_from_bytes(const std::string& bytes);

}  // namespace ngf::model
