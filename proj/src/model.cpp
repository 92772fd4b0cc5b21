#include "ngf/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <cctype>
#include <sstream>

#include "ngf/errors.hpp"

namespace ngf::model {

using numerics::shape_string;

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t p = 1;
  for (auto e : shape) p *= e;
  return p;
}

// Per-sample activations recorded by the forward pass.
struct Tape {
  std::vector<Vector> acts;                       // acts[0] = input, acts[i+1] = layer i output
  std::vector<std::vector<std::size_t>> argmax;   // maxpool winners per layer
};

void dense_forward(const LayerLayout& lay, std::span<const double> p, std::span<const double> in,
                   Vector& out) {
  const std::size_t n_in = in.size(), n_out = lay.out_shape[0];
  const double* w = p.data() + lay.params.offset;
  const double* b = w + lay.weight_count;
  out.assign(n_out, 0.0);
  for (std::size_t o = 0; o < n_out; ++o) {
    double s = b[o];
    const double* row = w + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) s += row[i] * in[i];
    out[o] = s;
  }
}

void conv_forward(const LayerSpec& spec, const LayerLayout& lay, std::span<const double> p,
                  std::span<const double> in, Vector& out) {
  const std::size_t c_in = lay.in_shape[0], h = lay.in_shape[1], w = lay.in_shape[2];
  const std::size_t c_out = lay.out_shape[0], ho = lay.out_shape[1], wo = lay.out_shape[2];
  const std::size_t k = spec.kernel, s = spec.stride;
  const double* wt = p.data() + lay.params.offset;
  const double* b = wt + lay.weight_count;
  out.assign(c_out * ho * wo, 0.0);
  for (std::size_t o = 0; o < c_out; ++o) {
    double* plane = out.data() + o * ho * wo;
    for (std::size_t i = 0; i < ho * wo; ++i) plane[i] = b[o];
    for (std::size_t c = 0; c < c_in; ++c) {
      const double* src = in.data() + c * h * w;
      const double* ker = wt + (o * c_in + c) * k * k;
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          const double kv = ker[ki * k + kj];
          for (std::size_t y = 0; y < ho; ++y) {
            const double* srow = src + (y * s + ki) * w + kj;
            double* orow = plane + y * wo;
            for (std::size_t x = 0; x < wo; ++x) orow[x] += kv * srow[x * s];
          }
        }
      }
    }
  }
}

void conv_backward(const LayerSpec& spec, const LayerLayout& lay, std::span<const double> p,
                   std::span<const double> in, std::span<const double> dout, double* grad,
                   Vector* din) {
  const std::size_t c_in = lay.in_shape[0], h = lay.in_shape[1], w = lay.in_shape[2];
  const std::size_t c_out = lay.out_shape[0], ho = lay.out_shape[1], wo = lay.out_shape[2];
  const std::size_t k = spec.kernel, s = spec.stride;
  const double* wt = p.data() + lay.params.offset;
  double* gw = grad + lay.params.offset;
  double* gb = gw + lay.weight_count;
  if (din) din->assign(in.size(), 0.0);
  for (std::size_t o = 0; o < c_out; ++o) {
    const double* dplane = dout.data() + o * ho * wo;
    double bsum = 0.0;
    for (std::size_t i = 0; i < ho * wo; ++i) bsum += dplane[i];
    gb[o] += bsum;
    for (std::size_t c = 0; c < c_in; ++c) {
      const double* src = in.data() + c * h * w;
      const double* ker = wt + (o * c_in + c) * k * k;
      double* gker = gw + (o * c_in + c) * k * k;
      double* dsrc = din ? din->data() + c * h * w : nullptr;
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          double acc = 0.0;
          const double kv = ker[ki * k + kj];
          for (std::size_t y = 0; y < ho; ++y) {
            const std::size_t base = (y * s + ki) * w + kj;
            const double* drow = dplane + y * wo;
            for (std::size_t x = 0; x < wo; ++x) {
              acc += drow[x] * src[base + x * s];
              if (dsrc) dsrc[base + x * s] += kv * drow[x];
            }
          }
          gker[ki * k + kj] += acc;
        }
      }
    }
  }
}

void maxpool_forward(const LayerSpec& spec, const LayerLayout& lay, std::span<const double> in,
                     Vector& out, std::vector<std::size_t>& arg) {
  const std::size_t c = lay.in_shape[0], h = lay.in_shape[1], w = lay.in_shape[2];
  const std::size_t ho = lay.out_shape[1], wo = lay.out_shape[2], win = spec.window;
  out.assign(c * ho * wo, 0.0);
  arg.assign(out.size(), 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        std::size_t best = ch * h * w + (y * win) * w + x * win;
        for (std::size_t dy = 0; dy < win; ++dy) {
          for (std::size_t dx = 0; dx < win; ++dx) {
            std::size_t idx = ch * h * w + (y * win + dy) * w + (x * win + dx);
            if (in[idx] > in[best]) best = idx;
          }
        }
        std::size_t o = (ch * ho + y) * wo + x;
        out[o] = in[best];
        arg[o] = best;
      }
    }
  }
}

void forward_sample(const Network& net, std::span<const double> x, Tape& tape) {
  const auto& layers = net.layers();
  const auto& layout = net.layout();
  auto p = net.params();
  tape.acts.resize(layers.size() + 1);
  tape.argmax.resize(layers.size());
  tape.acts[0].assign(x.begin(), x.end());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Vector& in = tape.acts[i];
    Vector& out = tape.acts[i + 1];
    switch (layers[i].kind) {
      case LayerKind::dense:
        dense_forward(layout[i], p, in, out);
        break;
      case LayerKind::conv2d:
        conv_forward(layers[i], layout[i], p, in, out);
        break;
      case LayerKind::relu:
        out.resize(in.size());
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] > 0.0 ? in[j] : 0.0;
        break;
      case LayerKind::maxpool:
        maxpool_forward(layers[i], layout[i], in, out, tape.argmax[i]);
        break;
      case LayerKind::flatten:
        out = in;
        break;
    }
  }
}

// Log-softmax pieces for one logit row: returns log-sum-exp and fills probs.
double softmax(std::span<const double> logits, Vector& probs) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  probs.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    probs[k] = std::exp(logits[k] - m);
    s += probs[k];
  }
  for (auto& v : probs) v /= s;
  return m + std::log(s);
}

void check_labels(std::span<const int> labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n) {
    throw DimensionError("label count " + std::to_string(labels.size()) + " vs batch size " +
                         std::to_string(n));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw LabelError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                           " outside [0, " + std::to_string(classes) + ")",
                       i);
    }
  }
}

void check_batch(const Network& net, const Tensor& x) {
  if (x.rank() < 1 || (x.extent(0) > 0 && x.row_size() != net.input_size())) {
    throw DimensionError("input batch " + shape_string(x.shape()) + " does not match network input " +
                         shape_string(net.input_shape()));
  }
}

// delta (classes) times features into [W | b] laid out in out.
void add_head_grad(std::span<const double> delta, std::span<const double> features, double scale,
                   double* out) {
  const std::size_t m = features.size();
  for (std::size_t k = 0; k < delta.size(); ++k) {
    const double d = scale * delta[k];
    double* row = out + k * m;
    for (std::size_t j = 0; j < m; ++j) row[j] += d * features[j];
  }
  double* bias = out + delta.size() * m;
  for (std::size_t k = 0; k < delta.size(); ++k) bias[k] += scale * delta[k];
}

void backward_sample(const Network& net, const Tape& tape, Vector delta, double* grad) {
  const auto& layers = net.layers();
  const auto& layout = net.layout();
  auto p = net.params();
  Vector next;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Vector& in = tape.acts[li];
    const bool need_input_grad = li > 0;
    switch (layers[li].kind) {
      case LayerKind::dense: {
        const auto& lay = layout[li];
        const std::size_t n_in = in.size(), n_out = delta.size();
        double* gw = grad + lay.params.offset;
        double* gb = gw + lay.weight_count;
        const double* w = p.data() + lay.params.offset;
        for (std::size_t o = 0; o < n_out; ++o) {
          const double d = delta[o];
          gb[o] += d;
          double* grow = gw + o * n_in;
          for (std::size_t i = 0; i < n_in; ++i) grow[i] += d * in[i];
        }
        if (need_input_grad) {
          next.assign(n_in, 0.0);
          for (std::size_t o = 0; o < n_out; ++o) {
            const double d = delta[o];
            const double* row = w + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) next[i] += d * row[i];
          }
        }
        break;
      }
      case LayerKind::conv2d:
        conv_backward(layers[li], layout[li], p, in, delta, grad, need_input_grad ? &next : nullptr);
        break;
      case LayerKind::relu:
        next.resize(delta.size());
        for (std::size_t j = 0; j < delta.size(); ++j) next[j] = in[j] > 0.0 ? delta[j] : 0.0;
        break;
      case LayerKind::maxpool: {
        next.assign(in.size(), 0.0);
        const auto& arg = tape.argmax[li];
        for (std::size_t j = 0; j < delta.size(); ++j) next[arg[j]] += delta[j];
        break;
      }
      case LayerKind::flatten:
        next = delta;
        break;
    }
    if (!need_input_grad) break;
    delta.swap(next);
  }
}

std::string data_digest(const Tensor& x) {
  std::uint64_t h = numerics::fnv1a64(x.shape().data(), x.shape().size() * sizeof(std::size_t));
  h = numerics::fnv1a64(x.data().data(), x.data().size_bytes(), h);
  return numerics::hex_digest(h);
}

}  // namespace

// ---------------------------------------------------------------- LayerSpec

std::string LayerSpec::to_string() const {
  switch (kind) {
    case LayerKind::dense:
      return "dense(" + std::to_string(units) + ")";
    case LayerKind::conv2d:
      return "conv2d(" + std::to_string(units) + "," + std::to_string(kernel) + "," +
             std::to_string(stride) + ")";
    case LayerKind::relu:
      return "relu";
    case LayerKind::maxpool:
      return "maxpool(" + std::to_string(window) + ")";
    case LayerKind::flatten:
      return "flatten";
  }
  return "?";
}

LayerSpec LayerSpec::parse(const std::string& raw) {
  std::string text;
  for (char ch : raw)
    if (!std::isspace(static_cast<unsigned char>(ch))) text += ch;
  auto open = text.find('(');
  std::string name = text.substr(0, open);
  std::vector<std::size_t> args;
  if (open != std::string::npos) {
    if (text.back() != ')') throw SpecError("malformed layer spec '" + raw + "'");
    std::stringstream ss(text.substr(open + 1, text.size() - open - 2));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        args.push_back(static_cast<std::size_t>(std::stoul(tok)));
      } catch (const std::exception&) {
        throw SpecError("malformed layer argument in '" + raw + "'");
      }
    }
  }
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (args.size() < lo || args.size() > hi) throw SpecError("wrong argument count in '" + raw + "'");
  };
  if (name == "dense") {
    need(1, 1);
    return dense(args[0]);
  }
  if (name == "conv2d") {
    need(2, 3);
    return conv2d(args[0], args[1], args.size() == 3 ? args[2] : 1);
  }
  if (name == "relu") {
    need(0, 0);
    return relu();
  }
  if (name == "maxpool") {
    need(1, 1);
    return maxpool(args[0]);
  }
  if (name == "flatten") {
    need(0, 0);
    return flatten();
  }
  throw SpecError("unknown layer kind '" + name + "'");
}

std::string layers_to_string(const std::vector<LayerSpec>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += ';';
    out += layers[i].to_string();
  }
  return out;
}

std::vector<LayerSpec> parse_layers(const std::string& text) {
  std::vector<LayerSpec> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ';')) {
    if (tok.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(LayerSpec::parse(tok));
  }
  return out;
}

std::vector<LayerSpec> reference_mlp(std::size_t hidden, std::size_t classes) {
  return {LayerSpec::flatten(), LayerSpec::dense(hidden), LayerSpec::relu(),
          LayerSpec::dense(hidden), LayerSpec::relu(), LayerSpec::dense(classes)};
}

std::vector<LayerSpec> reference_cnn(std::size_t channels1, std::size_t channels2, std::size_t classes) {
  return {LayerSpec::conv2d(channels1, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
          LayerSpec::conv2d(channels2, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
          LayerSpec::flatten(),            LayerSpec::dense(classes)};
}

// ---------------------------------------------------------------- Network

std::size_t Network::input_size() const noexcept { return product(input_shape_); }

void Network::set_params(std::span<const double> values) {
  if (values.size() != params_.size()) {
    throw DimensionError("set_params: expected " + std::to_string(params_.size()) + " values, got " +
                         std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), params_.begin());
}

std::size_t Network::head_input_dim() const noexcept { return layout_.back().in_shape[0]; }

std::span<const double> Network::head_params() const noexcept {
  return std::span<const double>(params_).subspan(head().offset, head().length);
}

std::span<double> Network::head_params() noexcept {
  return std::span<double>(params_).subspan(head().offset, head().length);
}

void Network::set_head_params(std::span<const double> values) {
  if (values.size() != head().length) {
    throw DimensionError("set_head_params: expected " + std::to_string(head().length) +
                         " values, got " + std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), params_.begin() + static_cast<std::ptrdiff_t>(head().offset));
}

std::span<const double> Network::backbone_params() const noexcept {
  return std::span<const double>(params_).subspan(0, head().offset);
}

std::string Network::backbone_digest() const { return numerics::digest_of(backbone_params()); }

std::string Network::digest() const { return numerics::digest_of(params_); }

std::size_t Network::scope_size(Scope scope) const noexcept {
  return scope == Scope::full ? params_.size() : head().length;
}

Network build_network(const std::vector<LayerSpec>& spec, const std::vector<std::size_t>& input_shape,
                      std::size_t classes) {
  if (input_shape.empty() || product(input_shape) == 0) {
    throw SpecError("input shape " + shape_string(input_shape) + " is empty");
  }
  if (spec.empty()) throw SpecError("layer list is empty");
  Network net;
  net.layers_ = spec;
  net.input_shape_ = input_shape;
  net.classes_ = classes;
  std::vector<std::size_t> shape = input_shape;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& l = spec[i];
    auto fail = [&](const std::string& why) {
      throw SpecError("layer " + std::to_string(i) + " (" + l.to_string() + "): " + why +
                      "; input shape " + shape_string(shape));
    };
    LayerLayout lay;
    lay.in_shape = shape;
    switch (l.kind) {
      case LayerKind::dense: {
        if (shape.size() != 1) fail("dense must follow a flatten or another dense");
        if (l.units == 0) fail("dense needs at least one output");
        lay.weight_count = l.units * shape[0];
        lay.params = {offset, lay.weight_count + l.units};
        shape = {l.units};
        break;
      }
      case LayerKind::conv2d: {
        if (shape.size() != 3) fail("conv2d needs a channels x height x width input");
        if (l.units == 0 || l.kernel == 0 || l.stride == 0) fail("conv2d arguments must be positive");
        if (l.kernel > shape[1] || l.kernel > shape[2]) fail("kernel exceeds spatial extent");
        const std::size_t ho = (shape[1] - l.kernel) / l.stride + 1;
        const std::size_t wo = (shape[2] - l.kernel) / l.stride + 1;
        lay.weight_count = l.units * shape[0] * l.kernel * l.kernel;
        lay.params = {offset, lay.weight_count + l.units};
        shape = {l.units, ho, wo};
        break;
      }
      case LayerKind::relu:
        lay.params = {offset, 0};
        break;
      case LayerKind::maxpool: {
        if (shape.size() != 3) fail("maxpool needs a channels x height x width input");
        if (l.window == 0 || l.window > shape[1] || l.window > shape[2]) fail("pool window does not fit");
        lay.params = {offset, 0};
        shape = {shape[0], shape[1] / l.window, shape[2] / l.window};
        break;
      }
      case LayerKind::flatten:
        lay.params = {offset, 0};
        shape = {product(shape)};
        break;
    }
    lay.out_shape = shape;
    offset += lay.params.length;
    net.layout_.push_back(std::move(lay));
  }
  if (spec.back().kind != LayerKind::dense || spec.back().units != classes) {
    throw SpecError("layer " + std::to_string(spec.size() - 1) + " (" + spec.back().to_string() +
                    "): network must end in dense(" + std::to_string(classes) + ")");
  }
  if (classes < 2) throw SpecError("class count must be at least 2");
  net.params_.assign(offset, 0.0);
  return net;
}

Network init_network(const std::vector<LayerSpec>& spec, const std::vector<std::size_t>& input_shape,
                     std::size_t classes, RngState& rng) {
  Network net = build_network(spec, input_shape, classes);
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& lay = net.layout_[i];
    if (lay.weight_count == 0) continue;
    const std::size_t fan_in = lay.weight_count / spec[i].units;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t j = 0; j < lay.weight_count; ++j) {
      net.params_[lay.params.offset + j] = rng.uniform(-bound, bound);
    }
  }
  return net;
}

Network init_network(const std::vector<LayerSpec>& spec, std::size_t input_dim, std::size_t classes,
                     RngState& rng) {
  return init_network(spec, std::vector<std::size_t>{input_dim}, classes, rng);
}

// ---------------------------------------------------------------- evaluation

Tensor forward(const Network& net, const Tensor& x) {
  check_batch(net, x);
  const std::size_t n = x.extent(0), c = net.classes();
  Tensor logits({n, c});
  Tape tape;
  for (std::size_t i = 0; i < n; ++i) {
    forward_sample(net, x.row(i), tape);
    std::copy(tape.acts.back().begin(), tape.acts.back().end(), logits.row(i).begin());
  }
  return logits;
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.extent(0);
  check_labels(labels, n, logits.extent(1));
  if (n == 0) throw DimensionError("cross_entropy of an empty batch");
  Vector probs;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.row(i);
    total += softmax(row, probs) - row[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(n);
}

LossGrad loss_and_grad(const Network& net, const Tensor& x, std::span<const int> labels, Scope scope) {
  check_batch(net, x);
  const std::size_t n = x.extent(0);
  check_labels(labels, n, net.classes());
  if (n == 0) throw DimensionError("loss_and_grad of an empty batch");

  LossGrad out;
  Vector full(scope == Scope::full ? net.params().size() : 0, 0.0);
  out.grad.assign(net.scope_size(scope), 0.0);
  Tape tape;
  Vector probs;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    forward_sample(net, x.row(i), tape);
    const Vector& z = tape.acts.back();
    const auto y = static_cast<std::size_t>(labels[i]);
    total += softmax(z, probs) - z[y];
    probs[y] -= 1.0;
    if (scope == Scope::full) {
      backward_sample(net, tape, probs, full.data());
    } else {
      add_head_grad(probs, tape.acts[tape.acts.size() - 2], 1.0, out.grad.data());
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  out.loss = total * inv_n;
  if (scope == Scope::full) {
    for (std::size_t j = 0; j < full.size(); ++j) out.grad[j] = full[j] * inv_n;
  } else {
    for (auto& g : out.grad) g *= inv_n;
  }
  return out;
}

FeatureCache backbone_features(const Network& net, const Tensor& x) {
  check_batch(net, x);
  const std::size_t n = x.extent(0), m = net.head_input_dim();
  FeatureCache cache;
  cache.features = Tensor({n, m});
  Tape tape;
  for (std::size_t i = 0; i < n; ++i) {
    forward_sample(net, x.row(i), tape);
    const Vector& f = tape.acts[tape.acts.size() - 2];
    std::copy(f.begin(), f.end(), cache.features.row(i).begin());
  }
  cache.backbone_digest = net.backbone_digest();
  cache.data_digest = data_digest(x);
  return cache;
}

void check_fresh(const Network& net, const FeatureCache& cache) {
  const std::string now = net.backbone_digest();
  if (now != cache.backbone_digest) {
    throw StaleCacheError("feature cache built for backbone " + cache.backbone_digest +
                          " but network backbone is " + now);
  }
  if (cache.features.rank() != 2 || cache.features.extent(1) != net.head_input_dim()) {
    throw DimensionError("feature cache width does not match head input " +
                         std::to_string(net.head_input_dim()));
  }
}

void check_fresh(const Network& net, const FeatureCache& cache, const Tensor& x) {
  check_fresh(net, cache);
  const std::string now = data_digest(x);
  if (now != cache.data_digest) {
    throw StaleCacheError("feature cache built for data " + cache.data_digest + " but batch is " + now);
  }
}

Tensor head_logits(const Network& net, const FeatureCache& cache) {
  check_fresh(net, cache);
  const std::size_t n = cache.features.extent(0), m = net.head_input_dim(), c = net.classes();
  auto head = net.head_params();
  Tensor logits({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    auto f = cache.features.row(i);
    for (std::size_t k = 0; k < c; ++k) {
      double s = head[c * m + k];
      const double* row = head.data() + k * m;
      for (std::size_t j = 0; j < m; ++j) s += row[j] * f[j];
      logits(i, k) = s;
    }
  }
  return logits;
}

LossGrad head_loss_and_grad(const Network& net, const FeatureCache& cache, std::span<const int> labels) {
  Tensor logits = head_logits(net, cache);
  const std::size_t n = logits.extent(0);
  check_labels(labels, n, net.classes());
  if (n == 0) throw DimensionError("head_loss_and_grad of an empty batch");
  LossGrad out;
  out.grad.assign(net.head().length, 0.0);
  Vector probs;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto z = logits.row(i);
    const auto y = static_cast<std::size_t>(labels[i]);
    total += softmax(z, probs) - z[y];
    probs[y] -= 1.0;
    add_head_grad(probs, cache.features.row(i), 1.0, out.grad.data());
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  out.loss = total * inv_n;
  for (auto& g : out.grad) g *= inv_n;
  return out;
}

Tensor per_sample_head_grads(const Network& net, const FeatureCache& cache, const Tensor& x_val,
                             std::span<const int> y_val) {
  check_fresh(net, cache, x_val);
  Tensor logits = head_logits(net, cache);
  const std::size_t n = logits.extent(0);
  check_labels(y_val, n, net.classes());
  Tensor rows({n, net.head().length});
  Vector probs;
  for (std::size_t i = 0; i < n; ++i) {
    softmax(logits.row(i), probs);
    probs[static_cast<std::size_t>(y_val[i])] -= 1.0;
    // d log p / d theta = -(p - e_y) (x) features
    add_head_grad(probs, cache.features.row(i), -1.0, rows.row(i).data());
  }
  return rows;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.extent(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto row = logits.row(i);
    // max_element returns the first maximum, i.e. the lowest index on ties.
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<int> predict(const Network& net, const Tensor& x) { return argmax_rows(forward(net, x)); }

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'N', 'G', 'F', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

std::string header_text(const Network& net) {
  std::string s;
  s += "input=";
  for (std::size_t i = 0; i < net.input_shape().size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(net.input_shape()[i]);
  }
  s += "\nclasses=" + std::to_string(net.classes());
  s += "\nlayers=" + layers_to_string(net.layers());
  s += "\nparams=" + std::to_string(net.params().size()) + "\n";
  return s;
}

}  // namespace

std::string checkpoint_bytes(const Network& net) {
  std::string out(kMagic, sizeof(kMagic));
  const std::string header = header_text(net);
  put_u64(out, header.size());
  out += header;
  for (double v : net.params()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Network checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, kMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic", 0);
  }
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (hlen > bytes.size() - 16) throw FormatError("checkpoint: header overruns file", 8);
  std::istringstream hs(bytes.substr(16, hlen));
  std::string line, input, layers;
  std::size_t classes = 0, count = 0;
  while (std::getline(hs, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "input") input = value;
    else if (key == "classes") classes = std::stoul(value);
    else if (key == "layers") layers = value;
    else if (key == "params") count = std::stoul(value);
  }
  std::vector<std::size_t> shape;
  std::stringstream ss(input);
  std::string tok;
  while (std::getline(ss, tok, 'x')) shape.push_back(std::stoul(tok));
  Network net = build_network(parse_layers(layers), shape, classes);
  if (net.params().size() != count) {
    throw FormatError("checkpoint: header param count " + std::to_string(count) +
                          " disagrees with layer specs (" + std::to_string(net.params().size()) + ")",
                      16);
  }
  const std::size_t body = 16 + hlen;
  if (bytes.size() != body + 8 * count) {
    throw FormatError("checkpoint: expected " + std::to_string(body + 8 * count) + " bytes, found " +
                          std::to_string(bytes.size()),
                      std::min(bytes.size(), body + 8 * count));
  }
  Vector values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<double>(get_u64(bytes, body + 8 * i));
  net.set_params(values);
  return net;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::string bytes = checkpoint_bytes(net);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace ngf::model
