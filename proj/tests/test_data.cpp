#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "ngf/data.hpp"
#include "ngf/errors.hpp"

using namespace ngf;
using namespace ngf::data;
using numerics::RngState;
using numerics::Tensor;

namespace {

Dataset small_synth(std::size_t per_class = 20, std::uint64_t seed = 1, ImageDims dims = {3, 8, 8}) {
  RngState rng(seed);
  SynthOptions o;
  o.classes = 4;
  o.per_class = per_class;
  o.dims = dims;
  return gen_synth(rng, o);
}

Tensor constant_image(ImageDims d, double v) { return Tensor({d.channels, d.height, d.width}, v); }

std::vector<std::pair<int, std::vector<double>>> as_multiset(const Dataset& d) {
  std::vector<std::pair<int, std::vector<double>>> m;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto r = d.images.row(i);
    m.emplace_back(d.labels[i], std::vector<double>(r.begin(), r.end()));
  }
  std::sort(m.begin(), m.end());
  return m;
}

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("synthetic data is balanced, valid and deterministic") {
  const Dataset a = small_synth(), b = small_synth();
  CHECK(a == b);
  CHECK_NOTHROW(a.validate());
  CHECK(a.size() == 80);
  std::vector<int> counts(4, 0);
  for (int y : a.labels) counts[y]++;
  for (int c : counts) CHECK(c == 20);
  for (double v : a.images.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
  }
  CHECK(small_synth(20, 2) != a);
}

TEST_CASE("patch trigger examples and idempotence") {
  const ImageDims d{1, 5, 5};
  const Tensor x = constant_image(d, 0.5);
  CHECK(apply_trigger(x, TriggerSpec::patch(0)) == x);

  const TriggerSpec t = TriggerSpec::patch(3, 1.0);
  const Tensor once = apply_trigger(x, t);
  CHECK(apply_trigger(once, t) == once);
  // Bottom-right 3x3 block only.
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) CHECK(once.data()[r * 5 + c] == (r >= 2 && c >= 2 ? 1.0 : 0.5));
  CHECK(x == constant_image(d, 0.5));

  TriggerSpec off = t;
  off.row = 4;
  off.col = 0;
  CHECK_THROWS_AS(apply_trigger(x, off), GeometryError);
}

TEST_CASE("blend trigger endpoints") {
  const ImageDims d{3, 6, 6};
  const Tensor x = constant_image(d, 0.3);
  const Tensor pattern = blend_pattern(d, 77);
  const Tensor full = apply_trigger(x, TriggerSpec::blend(1.0, 77));
  CHECK(full.values() == pattern.values());
  CHECK(apply_trigger(x, TriggerSpec::blend(0.0, 77)) == x);
  const Tensor part = apply_trigger(x, TriggerSpec::blend(0.2, 77));
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(part.data()[i] == doctest::Approx(0.8 * 0.3 + 0.2 * pattern.data()[i]).epsilon(1e-15));
}

TEST_CASE("sig trigger is a row-constant sinusoid") {
  const ImageDims d{1, 6, 12};
  const Tensor x = constant_image(d, 0.5);
  const Tensor y = apply_trigger(x, TriggerSpec::sig(0.1, 6.0));
  double max_dev = 0.0;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 12; ++c) {
      const double expect = 0.5 + 0.1 * std::sin(2.0 * std::numbers::pi * c * 6.0 / 12.0);
      CHECK(y.data()[r * 12 + c] == doctest::Approx(expect).epsilon(1e-15));
      CHECK(y.data()[r * 12 + c] == y.data()[c]);
      max_dev = std::max(max_dev, std::abs(y.data()[r * 12 + c] - 0.5));
    }
  CHECK(max_dev <= 0.1 + 1e-15);
}

TEST_CASE("triggers respect their norm budget and support") {
  const Dataset ds = small_synth(5);
  for (const TriggerSpec& t : {TriggerSpec::patch(3), TriggerSpec::blend(), TriggerSpec::sig()}) {
    const auto support = trigger_support(ds.dims(), t);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      Tensor img({3, 8, 8}, std::vector<double>(ds.images.row(i).begin(), ds.images.row(i).end()));
      const Tensor out = apply_trigger(img, t);
      for (std::size_t p = 0; p < img.size(); ++p) {
        const double diff = std::abs(out.data()[p] - img.data()[p]);
        CHECK(diff <= t.norm_budget() + 1e-12);
        if (!support[p]) CHECK(diff == 0.0);
        CHECK(out.data()[p] >= 0.0);
        CHECK(out.data()[p] <= 1.0);
      }
    }
  }
}

TEST_CASE("trigger text round trip") {
  for (const TriggerSpec& t : {TriggerSpec::patch(4, 0.9), TriggerSpec::blend(0.3, 9), TriggerSpec::sig(0.05, 4)}) {
    CHECK(TriggerSpec::parse(t.to_string()) == t);
  }
  CHECK_THROWS_AS(TriggerSpec::parse("wave:amp=1"), SpecError);
  CHECK_THROWS_AS(TriggerSpec::parse("patch:size"), SpecError);
}

TEST_CASE("poisoning counts, mapping and tags") {
  RngState pool(3);
  SynthOptions o;
  o.classes = 10;
  o.per_class = 100;
  o.dims = {1, 8, 8};
  const Dataset d = gen_synth(pool, o);
  REQUIRE(d.size() == 1000);

  PoisonPlan plan;
  plan.trigger = TriggerSpec::patch(3);
  plan.poison_rate = 0.1;
  plan.mapping.target = 3;
  RngState rng(5);
  const Dataset p = poison_dataset(d, plan, rng);
  CHECK(p.size() == d.size());
  CHECK(p.poisoned_count() == 100);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.provenance[i].poisoned) CHECK(p.labels[i] == 3);

  // Clean-tagged samples keep their pixels exactly; the multiset of clean
  // samples is a sub-multiset of the input.
  auto source = as_multiset(d);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.provenance[i].poisoned) continue;
    auto r = p.images.row(i);
    const std::pair<int, std::vector<double>> key{p.labels[i], std::vector<double>(r.begin(), r.end())};
    auto it = std::lower_bound(source.begin(), source.end(), key);
    const bool found = it != source.end() && *it == key;
    CHECK(found);
    if (found) source.erase(it);
  }

  RngState again(5);
  CHECK(poison_dataset(d, plan, again) == p);

  plan.poison_rate = 0.0;
  RngState r0(5);
  const Dataset none = poison_dataset(d, plan, r0);
  CHECK(none.poisoned_count() == 0);
  CHECK(as_multiset(none) == as_multiset(d));
}

TEST_CASE("poison plan validation") {
  PoisonPlan plan;
  plan.poison_rate = 1.0;
  CHECK_THROWS_AS(plan.validate(10), SpecError);
  plan.poison_rate = 0.1;
  plan.mapping.target = 10;
  CHECK_THROWS_AS(plan.validate(10), SpecError);
  plan.mapping = LabelMapping{MappingKind::all, 0, 1};
  plan.clean_label = true;
  CHECK_THROWS_AS(plan.validate(10), SpecError);
  CHECK(poison_count(0.1, 1000) == 100);
  CHECK(poison_count(0.35, 10) == 3);
}

TEST_CASE("all-to-all mapping and clean-label capacity") {
  const Dataset d = small_synth(20);
  PoisonPlan plan;
  plan.poison_rate = 0.5;
  plan.mapping = LabelMapping{MappingKind::all, 0, 1};
  RngState rng(6);
  const Dataset p = poison_dataset(d, plan, rng);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.provenance[i].poisoned) CHECK(p.labels[i] == (p.provenance[i].original_label + 1) % 4);

  PoisonPlan cl;
  cl.clean_label = true;
  cl.mapping.target = 2;
  cl.poison_rate = 0.2;  // 16 samples, class 2 has 20
  RngState r1(7);
  const Dataset q = poison_dataset(d, cl, r1);
  CHECK(q.poisoned_count() == 16);
  for (std::size_t i = 0; i < q.size(); ++i)
    if (q.provenance[i].poisoned) CHECK(q.provenance[i].original_label == 2);
  cl.poison_rate = 0.3;  // 24 > 20
  RngState r2(7);
  CHECK_THROWS_AS(poison_dataset(d, cl, r2), CapacityError);
}

TEST_CASE("validation split") {
  RngState pool(8);
  SynthOptions o;
  o.classes = 10;
  o.per_class = 1000;
  o.dims = {1, 8, 8};
  const Dataset d = gen_synth(pool, o);
  RngState rng(9);
  auto [val, rest] = split_validation(d, 0.01, rng);
  CHECK(val.size() == 100);
  std::vector<int> counts(10, 0);
  for (int y : val.labels) counts[y]++;
  for (int c : counts) CHECK(c == 10);
  CHECK(as_multiset(concat(val, rest)) == as_multiset(d));

  RngState all_rng(1);
  auto [everything, nothing] = split_validation(small_synth(), 1.0, all_rng);
  CHECK(everything.size() == 80);
  CHECK(nothing.empty());

  RngState tiny(1);
  CHECK_THROWS_AS(split_validation(small_synth(), 0.01, tiny), SplitError);
}

TEST_CASE("validation never contains poisoned samples") {
  const Dataset d = small_synth(30);
  PoisonPlan plan;
  plan.poison_rate = 0.4;
  RngState rng(10);
  const Dataset p = poison_dataset(d, plan, rng);
  RngState split(11);
  auto [val, rest] = split_validation(p, 0.2, split);
  for (const auto& tag : val.provenance) CHECK_FALSE(tag.poisoned);
}

TEST_CASE("poison test set excludes the target class") {
  Dataset only_target = small_synth(5);
  for (auto& y : only_target.labels) y = 1;
  CHECK(make_poison_testset(only_target, TriggerSpec::patch(3), 1).empty());

  RngState pool(12);
  SynthOptions o;
  o.classes = 10;
  o.per_class = 10;
  o.dims = {1, 8, 8};
  const Dataset test = gen_synth(pool, o);
  const Dataset pt = make_poison_testset(test, TriggerSpec::patch(3), 4);
  CHECK(pt.size() == 90);
  const auto support = trigger_support(test.dims(), TriggerSpec::patch(3));
  std::size_t j = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.labels[i] == 4) continue;
    CHECK(pt.labels[j] == test.labels[i]);
    auto a = test.images.row(i);
    auto b = pt.images.row(j);
    for (std::size_t p = 0; p < a.size(); ++p) {
      if (support[p]) CHECK(b[p] == 1.0);
      else CHECK(b[p] == a[p]);
    }
    ++j;
  }
}

TEST_CASE("IDX round trip and malformed input") {
  const Dataset gray = small_synth(3, 1, {1, 8, 8});
  const auto img = temp_file("ngf_test_images.idx"), lab = temp_file("ngf_test_labels.idx");
  write_idx(gray, img, lab);
  const Dataset back = load_idx(img, lab, 4);
  CHECK(back.images == gray.images);
  CHECK(back.labels == gray.labels);

  const Dataset colour = small_synth(3);
  write_idx(colour, img, lab);
  CHECK(load_idx(img, lab, 4).images == colour.images);

  // Corrupt the image magic.
  {
    std::fstream f(img, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put(0x7f);
  }
  CHECK_THROWS_AS(load_idx(img, lab, 4), FormatError);
  std::filesystem::remove(img);
  std::filesystem::remove(lab);
}

TEST_CASE("CIFAR binary round trip and truncation offset") {
  RngState rng(13);
  SynthOptions o;
  o.classes = 10;
  o.per_class = 2;
  o.dims = {3, 32, 32};
  const Dataset d = gen_synth(rng, o);
  const auto path = temp_file("ngf_test_cifar.bin");
  write_cifar_bin(d, path);
  CHECK(std::filesystem::file_size(path) == 20 * 3073);
  const Dataset back = load_cifar_bin({path});
  CHECK(back.images == d.images);
  CHECK(back.labels == d.labels);

  std::filesystem::resize_file(path, 3 * 3073 + 100);
  try {
    load_cifar_bin({path});
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 3 * 3073);
  }
  std::filesystem::remove(path);
}
