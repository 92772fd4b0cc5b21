#include "ngf/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "ngf/errors.hpp"

namespace ngf::data {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double quantize(double v) { return std::round(clamp01(v) * 255.0) / 255.0; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

std::uint32_t read_be32(const std::string& bytes, std::size_t at) {
  if (at + 4 > bytes.size()) throw FormatError("IDX header truncated", at);
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
  return v;
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(clamp01(v) * 255.0));
}

// Returns the patch's top-left corner, throwing if it does not fit.
std::pair<std::size_t, std::size_t> patch_origin(ImageDims dims, const TriggerSpec& t) {
  const std::size_t r = t.row.value_or(dims.height >= t.size ? dims.height - t.size : dims.height);
  const std::size_t c = t.col.value_or(dims.width >= t.size ? dims.width - t.size : dims.width);
  if (t.size > dims.height || t.size > dims.width || r + t.size > dims.height || c + t.size > dims.width) {
    throw GeometryError("patch of size " + std::to_string(t.size) + " at (" + std::to_string(r) + "," +
                        std::to_string(c) + ") does not fit a " + std::to_string(dims.height) + "x" +
                        std::to_string(dims.width) + " image");
  }
  return {r, c};
}

}  // namespace

// ---------------------------------------------------------------- Dataset

ImageDims Dataset::dims() const {
  if (images.rank() != 4) throw DimensionError("dataset images must be n x C x H x W");
  return {images.extent(1), images.extent(2), images.extent(3)};
}

std::vector<std::size_t> Dataset::image_shape() const {
  auto d = dims();
  return {d.channels, d.height, d.width};
}

Dataset make_dataset(ImageDims dims, std::size_t classes) {
  Dataset d;
  d.images = Tensor({0, dims.channels, dims.height, dims.width});
  d.classes = classes;
  return d;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  const ImageDims d = dims();
  Dataset out;
  out.classes = classes;
  out.images = Tensor({indices.size(), d.channels, d.height, d.width});
  out.labels.reserve(indices.size());
  out.provenance.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= size()) throw DimensionError("subset index " + std::to_string(src) + " out of range");
    auto from = images.row(src);
    std::copy(from.begin(), from.end(), out.images.row(i).begin());
    out.labels.push_back(labels[src]);
    out.provenance.push_back(provenance[src]);
  }
  return out;
}

std::size_t Dataset::poisoned_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(provenance.begin(), provenance.end(), [](const Provenance& p) { return p.poisoned; }));
}

std::string Dataset::digest() const {
  std::uint64_t h = numerics::fnv1a64(images.shape().data(), images.shape().size() * sizeof(std::size_t));
  h = numerics::fnv1a64(images.data().data(), images.data().size_bytes(), h);
  h = numerics::fnv1a64(labels.data(), labels.size() * sizeof(int), h);
  for (const auto& p : provenance) {
    const int tag[2] = {p.poisoned ? 1 : 0, p.original_label};
    h = numerics::fnv1a64(tag, sizeof(tag), h);
  }
  return numerics::hex_digest(h);
}

void Dataset::validate() const {
  (void)dims();
  if (images.extent(0) != labels.size() || provenance.size() != labels.size()) {
    throw DimensionError("dataset has " + std::to_string(images.extent(0)) + " images, " +
                         std::to_string(labels.size()) + " labels, " + std::to_string(provenance.size()) +
                         " provenance tags");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw LabelError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                           " outside [0, " + std::to_string(classes) + ")",
                       i);
    }
  }
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("dataset pixel outside [0, 1]");
  }
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dims() != b.dims() || a.classes != b.classes) {
    throw DimensionError("concat: datasets disagree on image dims or class count");
  }
  const ImageDims d = a.dims();
  Dataset out;
  out.classes = a.classes;
  std::vector<double> pixels(a.images.values());
  pixels.insert(pixels.end(), b.images.values().begin(), b.images.values().end());
  out.images = Tensor({a.size() + b.size(), d.channels, d.height, d.width}, std::move(pixels));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.provenance = a.provenance;
  out.provenance.insert(out.provenance.end(), b.provenance.begin(), b.provenance.end());
  return out;
}

// ---------------------------------------------------------------- synthetic data

Dataset gen_synth(RngState& rng, const SynthOptions& o) {
  if (o.classes < 2) throw SpecError("gen_synth needs at least 2 classes");
  if (o.per_class < 1) throw SpecError("gen_synth needs at least 1 sample per class");
  if (o.dims.height < 8 || o.dims.width < 8 || o.dims.channels < 1) {
    throw SpecError("gen_synth images must be at least 8x8 with one channel");
  }
  const ImageDims d = o.dims;
  const double sigma = o.blob_sigma > 0.0 ? o.blob_sigma : static_cast<double>(d.height) / 5.0;

  RngState template_rng = rng.split(1);
  RngState noise_rng = rng.split(2);
  RngState order_rng = rng.split(3);

  std::vector<std::vector<double>> templates(o.classes, std::vector<double>(d.size()));
  for (std::size_t k = 0; k < o.classes; ++k) {
    const double cy = template_rng.uniform(0.2, 0.8) * static_cast<double>(d.height - 1);
    const double cx = template_rng.uniform(0.2, 0.8) * static_cast<double>(d.width - 1);
    std::vector<double> colour(d.channels);
    for (auto& c : colour) c = o.contrast * template_rng.uniform(0.2, 0.9);
    for (std::size_t ch = 0; ch < d.channels; ++ch) {
      for (std::size_t y = 0; y < d.height; ++y) {
        for (std::size_t x = 0; x < d.width; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
          templates[k][(ch * d.height + y) * d.width + x] = 0.1 + colour[ch] * g;
        }
      }
    }
  }

  const std::size_t n = o.classes * o.per_class;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  numerics::shuffle(order, order_rng);

  Dataset out;
  out.classes = o.classes;
  out.images = Tensor({n, d.channels, d.height, d.width});
  out.labels.resize(n);
  out.provenance.assign(n, Provenance{});
  // Sample s (in generation order) is class s / per_class; it lands at slot order[s].
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t k = s / o.per_class;
    auto img = out.images.row(order[s]);
    for (std::size_t p = 0; p < d.size(); ++p) {
      const double noise = o.noise > 0.0 ? o.noise * noise_rng.gaussian() : 0.0;
      img[p] = quantize(templates[k][p] + noise);
    }
    out.labels[order[s]] = static_cast<int>(k);
  }
  return out;
}

// ---------------------------------------------------------------- IDX / CIFAR

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t classes) {
  const std::string ib = read_file(images_path);
  const std::string lb = read_file(labels_path);

  const std::uint32_t lmagic = read_be32(lb, 0);
  if (lmagic != 0x00000801) throw FormatError("IDX labels: bad magic", 0);
  const std::size_t n_labels = read_be32(lb, 4);
  if (lb.size() != 8 + n_labels) {
    throw FormatError("IDX labels: expected " + std::to_string(8 + n_labels) + " bytes", std::min(lb.size(), 8 + n_labels));
  }

  const std::uint32_t imagic = read_be32(ib, 0);
  std::vector<std::size_t> shape;
  if (imagic == 0x00000803) {
    shape = {read_be32(ib, 4), 1, read_be32(ib, 8), read_be32(ib, 12)};
  } else if (imagic == 0x00000804) {
    shape = {read_be32(ib, 4), read_be32(ib, 8), read_be32(ib, 12), read_be32(ib, 16)};
  } else {
    throw FormatError("IDX images: bad magic", 0);
  }
  const std::size_t header = imagic == 0x00000803 ? 16 : 20;
  const std::size_t n = shape[0], per = shape[1] * shape[2] * shape[3];
  if (ib.size() != header + n * per) {
    throw FormatError("IDX images: expected " + std::to_string(header + n * per) + " bytes, found " +
                          std::to_string(ib.size()),
                      std::min(ib.size(), header + n * per));
  }
  if (n != n_labels) throw FormatError("IDX image count differs from label count", 4);

  Dataset d;
  std::vector<double> pixels(n * per);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<unsigned char>(ib[header + i]) / 255.0;
  }
  d.images = Tensor(shape, std::move(pixels));
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = static_cast<unsigned char>(lb[8 + i]);
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = classes ? classes : std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  d.provenance.assign(n, Provenance{});
  d.validate();
  return d;
}

void write_idx(const Dataset& d, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  const ImageDims dims = d.dims();
  std::string ib;
  if (dims.channels == 1) {
    put_be32(ib, 0x00000803);
    put_be32(ib, static_cast<std::uint32_t>(d.size()));
  } else {
    put_be32(ib, 0x00000804);
    put_be32(ib, static_cast<std::uint32_t>(d.size()));
    put_be32(ib, static_cast<std::uint32_t>(dims.channels));
  }
  put_be32(ib, static_cast<std::uint32_t>(dims.height));
  put_be32(ib, static_cast<std::uint32_t>(dims.width));
  for (double v : d.images.data()) ib.push_back(static_cast<char>(to_byte(v)));

  std::string lb;
  put_be32(lb, 0x00000801);
  put_be32(lb, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) lb.push_back(static_cast<char>(static_cast<unsigned char>(y)));
  write_file(images_path, ib);
  write_file(labels_path, lb);
}

Dataset load_cifar_bin(const std::vector<std::filesystem::path>& paths) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  std::vector<double> pixels;
  std::vector<int> labels;
  for (const auto& path : paths) {
    const std::string bytes = read_file(path);
    if (bytes.size() % kRecord != 0) {
      const std::size_t k = bytes.size() / kRecord;
      throw FormatError(path.string() + ": truncated CIFAR record " + std::to_string(k) + " at byte offset " +
                            std::to_string(kRecord * k),
                        kRecord * k);
    }
    for (std::size_t at = 0; at < bytes.size(); at += kRecord) {
      const int label = static_cast<unsigned char>(bytes[at]);
      if (label > 9) throw FormatError(path.string() + ": CIFAR label out of range", at);
      labels.push_back(label);
      for (std::size_t p = 0; p < kPixels; ++p) {
        pixels.push_back(static_cast<unsigned char>(bytes[at + 1 + p]) / 255.0);
      }
    }
  }
  Dataset d;
  const std::size_t n = labels.size();
  d.images = Tensor({n, 3, 32, 32}, std::move(pixels));
  d.labels = std::move(labels);
  d.classes = 10;
  d.provenance.assign(n, Provenance{});
  return d;
}

void write_cifar_bin(const Dataset& d, const std::filesystem::path& path) {
  if (d.dims() != ImageDims{3, 32, 32}) throw DimensionError("CIFAR records hold 3x32x32 images");
  std::string bytes;
  bytes.reserve(d.size() * 3073);
  for (std::size_t i = 0; i < d.size(); ++i) {
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(d.labels[i])));
    for (double v : d.images.row(i)) bytes.push_back(static_cast<char>(to_byte(v)));
  }
  write_file(path, bytes);
}

// ---------------------------------------------------------------- triggers

TriggerSpec TriggerSpec::patch(std::size_t size, double intensity) {
  TriggerSpec t;
  t.kind = TriggerKind::patch;
  t.size = size;
  t.intensity = intensity;
  return t;
}

TriggerSpec TriggerSpec::blend(double alpha, std::uint64_t pattern_seed) {
  TriggerSpec t;
  t.kind = TriggerKind::blend;
  t.alpha = alpha;
  t.pattern_seed = pattern_seed;
  return t;
}

TriggerSpec TriggerSpec::sig(double amplitude, double frequency) {
  TriggerSpec t;
  t.kind = TriggerKind::sig;
  t.amplitude = amplitude;
  t.frequency = frequency;
  return t;
}

double TriggerSpec::norm_budget() const noexcept {
  switch (kind) {
    case TriggerKind::patch:
      return size == 0 ? 0.0 : std::max(intensity, 1.0 - intensity);
    case TriggerKind::blend:
      return alpha;
    case TriggerKind::sig:
      return std::abs(amplitude);
  }
  return 0.0;
}

std::string TriggerSpec::to_string() const {
  std::ostringstream os;
  os.precision(17);
  switch (kind) {
    case TriggerKind::patch:
      os << "patch:size=" << size << ",intensity=" << intensity;
      if (row) os << ",row=" << *row;
      if (col) os << ",col=" << *col;
      break;
    case TriggerKind::blend:
      os << "blend:alpha=" << alpha << ",seed=" << pattern_seed;
      break;
    case TriggerKind::sig:
      os << "sig:amplitude=" << amplitude << ",frequency=" << frequency;
      break;
  }
  return os.str();
}

TriggerSpec TriggerSpec::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  TriggerSpec t;
  if (kind == "patch") t = patch();
  else if (kind == "blend") t = blend();
  else if (kind == "sig") t = sig();
  else throw SpecError("unknown trigger kind '" + kind + "'");
  if (colon == std::string::npos) return t;
  std::stringstream ss(text.substr(colon + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw SpecError("malformed trigger option '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    try {
      if (key == "size") t.size = std::stoul(value);
      else if (key == "intensity") t.intensity = std::stod(value);
      else if (key == "row") t.row = std::stoul(value);
      else if (key == "col") t.col = std::stoul(value);
      else if (key == "alpha") t.alpha = std::stod(value);
      else if (key == "seed") t.pattern_seed = std::stoull(value);
      else if (key == "amplitude") t.amplitude = std::stod(value);
      else if (key == "frequency") t.frequency = std::stod(value);
      else throw SpecError("unknown trigger option '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw SpecError("bad value for trigger option '" + key + "'");
    }
  }
  return t;
}

Tensor blend_pattern(ImageDims dims, std::uint64_t seed) {
  RngState rng(seed, 0x626c656e64ULL);
  Tensor pattern({dims.channels, dims.height, dims.width});
  for (auto& v : pattern.data()) v = rng.uniform();
  return pattern;
}

void apply_trigger_inplace(std::span<double> image, ImageDims dims, const TriggerSpec& t) {
  if (image.size() != dims.size()) throw DimensionError("trigger: image buffer does not match dims");
  switch (t.kind) {
    case TriggerKind::patch: {
      if (t.size == 0) return;
      const auto [r0, c0] = patch_origin(dims, t);
      const double v = clamp01(t.intensity);
      for (std::size_t ch = 0; ch < dims.channels; ++ch)
        for (std::size_t r = r0; r < r0 + t.size; ++r)
          for (std::size_t c = c0; c < c0 + t.size; ++c) image[(ch * dims.height + r) * dims.width + c] = v;
      return;
    }
    case TriggerKind::blend: {
      const Tensor pattern = blend_pattern(dims, t.pattern_seed);
      auto p = pattern.data();
      for (std::size_t i = 0; i < image.size(); ++i) {
        image[i] = clamp01((1.0 - t.alpha) * image[i] + t.alpha * p[i]);
      }
      return;
    }
    case TriggerKind::sig: {
      const double w = static_cast<double>(dims.width);
      for (std::size_t ch = 0; ch < dims.channels; ++ch)
        for (std::size_t r = 0; r < dims.height; ++r)
          for (std::size_t c = 0; c < dims.width; ++c) {
            double& px = image[(ch * dims.height + r) * dims.width + c];
            px = clamp01(px + t.amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(c) * t.frequency / w));
          }
      return;
    }
  }
}

Tensor apply_trigger(const Tensor& image, const TriggerSpec& t) {
  if (image.rank() != 3) throw DimensionError("apply_trigger expects a C x H x W image");
  Tensor out = image;
  apply_trigger_inplace(out.data(), {image.extent(0), image.extent(1), image.extent(2)}, t);
  return out;
}

std::vector<bool> trigger_support(ImageDims dims, const TriggerSpec& t) {
  std::vector<bool> mask(dims.size(), false);
  switch (t.kind) {
    case TriggerKind::patch: {
      if (t.size == 0) break;
      const auto [r0, c0] = patch_origin(dims, t);
      for (std::size_t ch = 0; ch < dims.channels; ++ch)
        for (std::size_t r = r0; r < r0 + t.size; ++r)
          for (std::size_t c = c0; c < c0 + t.size; ++c) mask[(ch * dims.height + r) * dims.width + c] = true;
      break;
    }
    case TriggerKind::blend:
      if (t.alpha != 0.0) mask.assign(mask.size(), true);
      break;
    case TriggerKind::sig: {
      if (t.amplitude == 0.0) break;
      const double w = static_cast<double>(dims.width);
      for (std::size_t ch = 0; ch < dims.channels; ++ch)
        for (std::size_t r = 0; r < dims.height; ++r)
          for (std::size_t c = 0; c < dims.width; ++c) {
            mask[(ch * dims.height + r) * dims.width + c] =
                std::sin(2.0 * std::numbers::pi * static_cast<double>(c) * t.frequency / w) != 0.0;
          }
      break;
    }
  }
  return mask;
}

// ---------------------------------------------------------------- poisoning

int LabelMapping::apply(int label, std::size_t classes) const noexcept {
  if (kind == MappingKind::one) return target;
  const int c = static_cast<int>(classes);
  return ((label + shift) % c + c) % c;
}

void PoisonPlan::validate(std::size_t classes) const {
  if (!(poison_rate >= 0.0 && poison_rate < 1.0)) {
    throw SpecError("poison rate must lie in [0, 1), got " + std::to_string(poison_rate));
  }
  if (mapping.kind == MappingKind::one) {
    if (mapping.target < 0 || static_cast<std::size_t>(mapping.target) >= classes) {
      throw SpecError("target label " + std::to_string(mapping.target) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
  } else {
    const int c = static_cast<int>(classes);
    if (((mapping.shift % c) + c) % c == 0) throw SpecError("all-to-all shift must not be a multiple of the class count");
    if (clean_label) throw SpecError("clean-label poisoning requires a one-target mapping");
  }
}

std::size_t poison_count(double rate, std::size_t n) {
  // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

Dataset poison_dataset(const Dataset& d, const PoisonPlan& plan, RngState& rng) {
  plan.validate(d.classes);
  const ImageDims dims = d.dims();
  const std::size_t n = d.size();
  const std::size_t count = poison_count(plan.poison_rate, n);

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < n; ++i) {
    if (!plan.clean_label || d.labels[i] == plan.mapping.target) eligible.push_back(i);
  }
  if (eligible.size() < count) {
    throw CapacityError("poisoning needs " + std::to_string(count) + " eligible samples but only " +
                        std::to_string(eligible.size()) + " exist");
  }
  RngState pick_rng = rng.split(11);
  RngState order_rng = rng.split(12);
  numerics::shuffle(eligible, pick_rng);
  eligible.resize(count);

  Dataset out = d;
  for (std::size_t i : eligible) {
    apply_trigger_inplace(out.images.row(i), dims, plan.trigger);
    out.provenance[i] = Provenance{true, d.labels[i]};
    if (!plan.clean_label) out.labels[i] = plan.mapping.apply(d.labels[i], d.classes);
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  numerics::shuffle(order, order_rng);
  return out.subset(order);
}

std::pair<Dataset, Dataset> split_validation(const Dataset& pool, double fraction, RngState& rng) {
  const std::size_t n = pool.size();
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw SplitError("validation fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  if (fraction * static_cast<double>(n) + 1e-9 < static_cast<double>(pool.classes)) {
    throw SplitError("validation fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                     " samples cannot give one sample for each of " + std::to_string(pool.classes) + " classes");
  }
  std::vector<std::vector<std::size_t>> by_class(pool.classes);
  for (std::size_t i = 0; i < n; ++i) {
    if (!pool.provenance[i].poisoned) by_class[static_cast<std::size_t>(pool.labels[i])].push_back(i);
  }
  std::vector<bool> in_val(n, false);
  for (std::size_t k = 0; k < pool.classes; ++k) {
    auto& idx = by_class[k];
    if (idx.empty()) continue;
    RngState class_rng = rng.split(100 + k);
    numerics::shuffle(idx, class_rng);
    std::size_t take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    take = std::clamp<std::size_t>(take, 1, idx.size());
    for (std::size_t j = 0; j < take; ++j) in_val[idx[j]] = true;
  }
  std::vector<std::size_t> val_idx, rest_idx;
  for (std::size_t i = 0; i < n; ++i) (in_val[i] ? val_idx : rest_idx).push_back(i);
  return {pool.subset(val_idx), pool.subset(rest_idx)};
}

Dataset make_poison_testset(const Dataset& clean_test, const TriggerSpec& trigger, int target) {
  LabelMapping m;
  m.kind = MappingKind::one;
  m.target = target;
  return make_poison_testset(clean_test, trigger, m);
}

Dataset make_poison_testset(const Dataset& clean_test, const TriggerSpec& trigger, const LabelMapping& mapping) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    const int y = clean_test.labels[i];
    if (mapping.apply(y, clean_test.classes) != y) keep.push_back(i);
  }
  Dataset out = clean_test.subset(keep);
  const ImageDims dims = clean_test.dims();
  for (std::size_t i = 0; i < out.size(); ++i) {
    apply_trigger_inplace(out.images.row(i), dims, trigger);
    out.provenance[i] = Provenance{true, out.labels[i]};
  }
  return out;
}

}  // namespace ngf::data
