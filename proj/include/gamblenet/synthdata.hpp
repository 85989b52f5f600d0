#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gamblenet/tensor.hpp"
#include "json.hpp"

namespace gamblenet::synth {

enum class ShapeKind { kBar, kDisk, kRectangle, kPole };

const char* to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

using Color = std::array<double, 3>;

/// One foreground class: which primitive it draws, how many instances per
/// image and its base colour.
struct ClassSpec {
  ShapeKind kind = ShapeKind::kDisk;
  int min_count = 1;
  int max_count = 1;
  Color color{0.5, 0.5, 0.5};
};

struct SceneSpec {
  std::string name = "roadsim-64";
  int height = 64;
  int width = 64;
  Color background{0.36, 0.46, 0.34};
  /// Foreground classes 1..c-1; class 0 is background.
  std::vector<ClassSpec> classes;

  double disk_radius_min = 4.0;
  double disk_radius_max = 8.0;
  int rect_side_min = 7;
  int rect_side_max = 15;
  double bar_thickness_min = 5.0;
  double bar_thickness_max = 9.0;
  double bar_max_angle_deg = 25.0;
  int pole_width_min = 1;
  int pole_width_max = 2;
  int pole_length_min = 14;
  int pole_length_max = 28;
  /// Minimum visible pixels per placed shape after occlusion.
  int min_visible_pixels = 6;

  double noise_rate = 0.0;
  double texture_noise = 0.10;
  double color_jitter = 0.06;
  int blur_radius = 1;
  std::uint64_t seed = 1;

  int num_classes() const { return static_cast<int>(classes.size()) + 1; }
};

/// Default benchmark: 64x64, background + road bar, disk, rectangle, pole.
/// Disks and rectangles share a colour family so telling them apart needs shape.
SceneSpec roadsim64();

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j);
void validate(const SceneSpec& spec);
std::uint64_t spec_hash(const SceneSpec& spec);

/// Geometry of one drawn primitive, kept for rule audits.
struct ShapeRecord {
  int class_id = 0;
  ShapeKind kind = ShapeKind::kDisk;
  double center_row = 0.0;
  double center_col = 0.0;
  double size_a = 0.0;  // radius / half-thickness / height
  double size_b = 0.0;  // width or angle (radians) for bars
};

struct Sample {
  Tensor rgb;  // (3, H, W), multiples of 1/255
  LabelMap clean;
  LabelMap noisy;
  std::vector<ShapeRecord> shapes;
};

Sample generate_scene(const SceneSpec& spec, int index);

/// Independently resamples each pixel to a different class with probability `rate`.
LabelMap inject_label_noise(const LabelMap& label, double rate, std::uint64_t seed, int num_classes);

/// Resamples exactly round(rate * pixels) distinct pixels to a different class.
LabelMap inject_label_noise_exact(const LabelMap& label, double rate, std::uint64_t seed,
                                  int num_classes);

struct AuditResult {
  bool ok = true;
  std::vector<std::string> violations;
};

/// Checks the structural rules: one 4-connected component per bar class,
/// non-touching disks, and every placed shape still visible.
AuditResult audit_scene(const SceneSpec& spec, const Sample& sample);

/// Number of 4-connected components of `class_id`.
int count_components(const LabelMap& map, int class_id);

struct AugmentOptions {
  bool flip = false;
  int crop_height = 0;  // 0 = full height
  int crop_width = 0;
  double jitter = 0.0;  // brightness offset amplitude, rgb only
  friend bool operator==(const AugmentOptions&, const AugmentOptions&) = default;
};

Sample augment(const Sample& sample, const AugmentOptions& options, std::uint64_t seed);

// Dataset on disk -------------------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

struct Dataset {
  SceneSpec spec;
  std::vector<Sample> samples;
  int train_count = 0;

  std::span<const Sample> train() const { return std::span(samples).subspan(0, train_count); }
  std::span<const Sample> validation() const { return std::span(samples).subspan(train_count); }
  std::span<const Sample> split(const std::string& name) const;
};

/// Default split: five sixths training, the remainder validation.
int default_train_count(int n);

/// In-memory equivalent of write_dataset followed by read_dataset.
Dataset generate_dataset(const SceneSpec& spec, int n, int train_count);

/// Writes images/NNNN.png, labels/NNNN.png, labels_clean/NNNN.png and manifest.json.
/// Returns the manifest.
nlohmann::json write_dataset(const SceneSpec& spec, int n, const std::filesystem::path& out_dir,
                             int train_count = -1);
Dataset read_dataset(const std::filesystem::path& dir);

std::uint64_t sample_hash(const Sample& sample);

}  // namespace gamblenet::synth
