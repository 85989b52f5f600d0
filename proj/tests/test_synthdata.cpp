#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gamblenet/synthdata.hpp"
#include "oracles.hpp"

using namespace gamblenet;
using namespace gamblenet::synth;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gamblenet_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

int changed_pixels(const LabelMap& a, const LabelMap& b) {
  int n = 0;
  for (std::size_t i = 0; i < a.pixels(); ++i) n += a.classes[i] != b.classes[i];
  return n;
}

}  // namespace

TEST_CASE("default benchmark spec") {
  const SceneSpec spec = roadsim64();
  CHECK(spec.num_classes() == 5);
  CHECK(spec.height == 64);
  CHECK(spec.width == 64);
  CHECK(spec.blur_radius == 1);
  CHECK(scene_spec_from_json(to_json(spec)).classes.size() == 4);
  CHECK(spec_hash(scene_spec_from_json(to_json(spec))) == spec_hash(spec));

  SceneSpec bad = spec;
  bad.noise_rate = 1.5;
  CHECK_THROWS_AS(validate(bad), Error);
  bad = spec;
  bad.classes.clear();
  CHECK_THROWS_AS(validate(bad), Error);
  bad.classes.assign(19, ClassSpec{});
  CHECK_THROWS_AS(validate(bad), Error);
}

TEST_CASE("scene generation is deterministic and clean without noise") {
  const SceneSpec spec = roadsim64();
  const Sample a = generate_scene(spec, 3);
  const Sample b = generate_scene(spec, 3);
  CHECK(a.rgb == b.rgb);
  CHECK(a.clean == b.clean);
  CHECK(a.clean == a.noisy);
  CHECK_FALSE(generate_scene(spec, 4).clean == a.clean);
  for (double v : a.rgb.values()) {
    CHECK((v >= 0.0 && v <= 1.0));
    CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
  }
}

TEST_CASE("structural rules hold on every generated scene") {
  const SceneSpec spec = roadsim64();
  std::vector<int> seen(static_cast<std::size_t>(spec.num_classes()), 0);
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    const Sample s = generate_scene(spec, i);
    const AuditResult audit = audit_scene(spec, s);
    CHECK_MESSAGE(audit.ok, "scene ", i, ": ", (audit.violations.empty() ? "" : audit.violations.front()));
    CHECK(count_components(s.clean, 1) == 1);
    for (int k = 1; k < spec.num_classes(); ++k) seen[std::size_t(k)] += oracle::present(s.clean, k);
  }
  for (int k = 1; k < spec.num_classes(); ++k) CHECK(seen[std::size_t(k)] >= 0.8 * n);
}

TEST_CASE("disk area matches a lattice oracle") {
  SceneSpec spec = roadsim64();
  spec.classes = {{ShapeKind::kDisk, 1, 1, {0.8, 0.3, 0.3}}};
  spec.seed = 7;
  for (int i = 0; i < 10; ++i) {
    const Sample s = generate_scene(spec, i);
    REQUIRE(s.shapes.size() == 1);
    const ShapeRecord& d = s.shapes[0];
    CHECK(d.size_a >= spec.disk_radius_min);
    CHECK(d.size_a <= spec.disk_radius_max);
    int pixels = 0;
    for (int v : s.clean.classes) pixels += v == 1;
    CHECK(pixels == oracle::disk_lattice_count(d.center_row, d.center_col, d.size_a, 64, 64));
    const double lo = M_PI * std::pow(spec.disk_radius_min - 1.0, 2);
    const double hi = M_PI * std::pow(spec.disk_radius_max + 1.0, 2);
    CHECK(pixels >= lo);
    CHECK(pixels <= hi);
  }
}

TEST_CASE("unsatisfiable rules raise a structured error") {
  SceneSpec spec = roadsim64();
  spec.classes = {{ShapeKind::kDisk, 30, 30, {0.8, 0.3, 0.3}}};
  try {
    generate_scene(spec, 0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerate);
  }
}

TEST_CASE("label noise injection") {
  const LabelMap clean(100, 100, 2);
  CHECK(inject_label_noise(clean, 0.0, 1, 5) == clean);
  const LabelMap all = inject_label_noise(clean, 1.0, 1, 5);
  CHECK(changed_pixels(all, clean) == 10000);
  for (int v : all.classes) CHECK((v >= 0 && v < 5));

  const LabelMap tenth = inject_label_noise(clean, 0.1, 42, 5);
  const double sigma = std::sqrt(10000 * 0.1 * 0.9);
  CHECK(std::abs(changed_pixels(tenth, clean) - 1000.0) <= 3 * sigma);
  CHECK(inject_label_noise(clean, 0.1, 42, 5) == tenth);
  CHECK_FALSE(inject_label_noise(clean, 0.1, 43, 5) == tenth);
  CHECK_THROWS_AS(inject_label_noise(clean, -0.1, 1, 5), Error);

  LabelMap masked = clean;
  masked.ignore.assign(masked.pixels(), 1);
  CHECK(inject_label_noise(masked, 1.0, 1, 5) == masked);

  // Resampled classes are uniform over the other four.
  std::vector<int> counts(5, 0);
  for (int v : all.classes) ++counts[std::size_t(v)];
  CHECK(counts[2] == 0);
  for (int k : {0, 1, 3, 4}) CHECK(std::abs(counts[std::size_t(k)] - 2500) < 200);
}

TEST_CASE("scene noise respects the ceiling") {
  SceneSpec spec = roadsim64();
  spec.noise_rate = 0.1;
  for (int i = 0; i < 10; ++i) {
    const Sample s = generate_scene(spec, i);
    const int bound = static_cast<int>(std::ceil(0.1 * 64 * 64));
    CHECK(changed_pixels(s.clean, s.noisy) <= bound);
    CHECK(changed_pixels(s.clean, s.noisy) > 0);
  }
}

TEST_CASE("augmentation") {
  SceneSpec spec = roadsim64();
  spec.noise_rate = 0.05;
  const Sample s = generate_scene(spec, 1);

  const Sample same = augment(s, {}, 5);
  CHECK(same.rgb == s.rgb);
  CHECK(same.clean == s.clean);
  CHECK(same.noisy == s.noisy);

  AugmentOptions flip;
  flip.flip = true;
  const Sample once = augment(s, flip, 5);
  const Sample twice = augment(once, flip, 5);
  CHECK(twice.rgb == s.rgb);
  CHECK(twice.clean == s.clean);
  CHECK_FALSE(once.clean == s.clean);
  std::vector<int> h0(5, 0), h1(5, 0);
  for (int v : s.clean.classes) ++h0[std::size_t(v)];
  for (int v : once.clean.classes) ++h1[std::size_t(v)];
  CHECK(h0 == h1);
  CHECK(once.clean.at(10, 0) == s.clean.at(10, 63));

  AugmentOptions crop;
  crop.crop_height = 32;
  crop.crop_width = 48;
  crop.jitter = 0.1;
  const Sample c = augment(s, crop, 9);
  CHECK(c.rgb.height() == 32);
  CHECK(c.rgb.width() == 48);
  CHECK(c.clean.height == 32);
  CHECK(c.noisy.width == 48);

  crop.crop_height = 65;
  CHECK_THROWS_AS(augment(s, crop, 1), Error);
}

TEST_CASE("dataset round trip through disk") {
  const auto dir = scratch("dataset");
  SceneSpec spec = roadsim64();
  spec.noise_rate = 0.1;
  const nlohmann::json manifest = write_dataset(spec, 12, dir);
  CHECK(manifest.at("n") == 12);
  CHECK(manifest.at("train_count") == 10);
  CHECK(std::filesystem::exists(dir / "images" / "0011.png"));
  CHECK(std::filesystem::exists(dir / "labels_clean" / "0000.png"));

  const Dataset disk = read_dataset(dir);
  const Dataset mem = generate_dataset(spec, 12, -1);
  REQUIRE(disk.samples.size() == 12);
  CHECK(disk.train().size() == 10);
  CHECK(disk.validation().size() == 2);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(disk.samples[i].rgb == mem.samples[i].rgb);
    CHECK(disk.samples[i].clean == mem.samples[i].clean);
    CHECK(disk.samples[i].noisy == mem.samples[i].noisy);
  }
  // Rewriting gives identical hashes.
  CHECK(write_dataset(spec, 12, dir) == manifest);

  // Tampered spec in the manifest.
  nlohmann::json bad = manifest;
  bad["spec"]["texture_noise"] = 0.5;
  std::ofstream(dir / "manifest.json") << bad.dump();
  CHECK_THROWS_AS(read_dataset(dir), Error);

  // Corrupt manifest.
  std::ofstream(dir / "manifest.json") << "{ not json";
  CHECK_THROWS_AS(read_dataset(dir), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("empty dataset") {
  const auto dir = scratch("empty");
  const nlohmann::json manifest = write_dataset(roadsim64(), 0, dir);
  CHECK(manifest.at("n") == 0);
  const Dataset d = read_dataset(dir);
  CHECK(d.samples.empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("five hundred samples write quickly") {
  const auto dir = scratch("timing");
  const auto start = std::chrono::steady_clock::now();
  write_dataset(roadsim64(), 500, dir);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(seconds < 60.0);
  std::filesystem::remove_all(dir);
}
