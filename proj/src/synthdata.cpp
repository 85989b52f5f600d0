#include "gamblenet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "gamblenet/png_io.hpp"
#include "gamblenet/rng.hpp"

namespace gamblenet::synth {
namespace {

constexpr int kMaxSceneAttempts = 64;
constexpr int kMaxPlacementTries = 40;
constexpr std::uint64_t kSceneSalt = 0x7363656e65ULL;
constexpr std::uint64_t kNoiseSalt = 0x6e6f697365ULL;
constexpr std::uint64_t kAugmentSalt = 0x6175676dULL;

std::string hex(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

std::string indexed_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d.png", index);
  return buf;
}

// Pixels covered by a shape, evaluated from its record alone.
bool covers(const ShapeRecord& s, int row, int col) {
  const double y = row;
  const double x = col;
  switch (s.kind) {
    case ShapeKind::kDisk: {
      const double dy = y - s.center_row;
      const double dx = x - s.center_col;
      return dy * dy + dx * dx <= s.size_a * s.size_a;
    }
    case ShapeKind::kRectangle:
    case ShapeKind::kPole: {
      // center is the top-left corner for axis-aligned boxes
      return y >= s.center_row && y < s.center_row + s.size_a && x >= s.center_col &&
             x < s.center_col + s.size_b;
    }
    case ShapeKind::kBar: {
      const double d = (y - s.center_row) * std::cos(s.size_b) - (x - s.center_col) * std::sin(s.size_b);
      return std::abs(d) <= s.size_a;
    }
  }
  return false;
}

int paint_order(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kRectangle: return 0;
    case ShapeKind::kDisk: return 1;
    case ShapeKind::kPole: return 2;
    case ShapeKind::kBar: return 3;
  }
  return 4;
}

bool disks_clear(const ShapeRecord& a, const ShapeRecord& b) {
  const double dy = a.center_row - b.center_row;
  const double dx = a.center_col - b.center_col;
  // A gap of more than one pixel keeps the two disks from being 4-adjacent.
  return std::sqrt(dy * dy + dx * dx) > a.size_a + b.size_a + 2.0;
}

bool place_shape(const SceneSpec& spec, const ClassSpec& cls, int class_id, Rng& rng,
                 std::vector<ShapeRecord>& placed) {
  const int h = spec.height;
  const int w = spec.width;
  for (int attempt = 0; attempt < kMaxPlacementTries; ++attempt) {
    ShapeRecord s;
    s.class_id = class_id;
    s.kind = cls.kind;
    switch (cls.kind) {
      case ShapeKind::kDisk: {
        const double r = rng.uniform(spec.disk_radius_min, spec.disk_radius_max);
        if (2.0 * r + 1.0 > std::min(h, w)) return false;
        s.size_a = r;
        s.center_row = rng.uniform(r, h - 1 - r);
        s.center_col = rng.uniform(r, w - 1 - r);
        break;
      }
      case ShapeKind::kRectangle: {
        const int rh = rng.uniform_int(spec.rect_side_min, spec.rect_side_max);
        const int rw = rng.uniform_int(spec.rect_side_min, spec.rect_side_max);
        if (rh > h || rw > w) return false;
        s.size_a = rh;
        s.size_b = rw;
        s.center_row = rng.uniform_int(0, h - rh);
        s.center_col = rng.uniform_int(0, w - rw);
        break;
      }
      case ShapeKind::kPole: {
        const int len = rng.uniform_int(spec.pole_length_min, spec.pole_length_max);
        const int pw = rng.uniform_int(spec.pole_width_min, spec.pole_width_max);
        if (len > h || pw > w) return false;
        s.size_a = len;
        s.size_b = pw;
        s.center_row = rng.uniform_int(0, h - len);
        s.center_col = rng.uniform_int(0, w - pw);
        break;
      }
      case ShapeKind::kBar: {
        const double angle = rng.uniform(-spec.bar_max_angle_deg, spec.bar_max_angle_deg) *
                             std::numbers::pi / 180.0;
        s.size_a = 0.5 * rng.uniform(spec.bar_thickness_min, spec.bar_thickness_max);
        s.size_b = angle;
        s.center_row = rng.uniform(0.25 * h, 0.75 * h);
        s.center_col = 0.5 * (w - 1);
        break;
      }
    }
    bool ok = true;
    if (s.kind == ShapeKind::kDisk) {
      for (const ShapeRecord& other : placed) {
        if (other.kind == ShapeKind::kDisk && !disks_clear(s, other)) ok = false;
      }
    }
    if (ok) {
      placed.push_back(s);
      return true;
    }
  }
  return false;
}

void paint(const std::vector<ShapeRecord>& shapes, LabelMap& map) {
  std::vector<const ShapeRecord*> ordered;
  for (const auto& s : shapes) ordered.push_back(&s);
  std::stable_sort(ordered.begin(), ordered.end(), [](const ShapeRecord* a, const ShapeRecord* b) {
    return paint_order(a->kind) < paint_order(b->kind);
  });
  for (const ShapeRecord* s : ordered) {
    for (int r = 0; r < map.height; ++r) {
      for (int c = 0; c < map.width; ++c) {
        if (covers(*s, r, c)) map.at(r, c) = s->class_id;
      }
    }
  }
}

int visible_pixels(const ShapeRecord& s, const LabelMap& map) {
  int n = 0;
  for (int r = 0; r < map.height; ++r) {
    for (int c = 0; c < map.width; ++c) {
      if (covers(s, r, c) && map.at(r, c) == s.class_id) ++n;
    }
  }
  return n;
}

Tensor render(const SceneSpec& spec, const LabelMap& labels, Rng& rng) {
  const int c = spec.num_classes();
  std::vector<Color> palette(static_cast<std::size_t>(c));
  palette[0] = spec.background;
  for (int k = 1; k < c; ++k) palette[k] = spec.classes[static_cast<std::size_t>(k - 1)].color;
  for (auto& color : palette) {
    for (double& v : color) v += rng.uniform(-spec.color_jitter, spec.color_jitter);
  }
  const int h = spec.height;
  const int w = spec.width;
  Tensor flat(3, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Color& col = palette[static_cast<std::size_t>(labels.at(y, x))];
      for (int ch = 0; ch < 3; ++ch) flat.at(ch, y, x) = col[ch];
    }
  }
  // Separable box blur softens class boundaries by blur_radius pixels.
  Tensor blurred = flat;
  const int rad = spec.blur_radius;
  if (rad > 0) {
    Tensor tmp(3, h, w);
    for (int ch = 0; ch < 3; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double s = 0.0;
          int n = 0;
          for (int d = -rad; d <= rad; ++d) {
            const int xx = x + d;
            if (xx < 0 || xx >= w) continue;
            s += flat.at(ch, y, xx);
            ++n;
          }
          tmp.at(ch, y, x) = s / n;
        }
      }
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double s = 0.0;
          int n = 0;
          for (int d = -rad; d <= rad; ++d) {
            const int yy = y + d;
            if (yy < 0 || yy >= h) continue;
            s += tmp.at(ch, yy, x);
            ++n;
          }
          blurred.at(ch, y, x) = s / n;
        }
      }
    }
  }
  for (double& v : blurred.values()) {
    v += spec.texture_noise * rng.normal();
    v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  }
  return blurred;
}

int resample_class(int old_class, int num_classes, Rng& rng) {
  int k = rng.uniform_int(0, num_classes - 2);
  return k >= old_class ? k + 1 : k;
}

}  // namespace

const char* to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kBar: return "bar";
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kRectangle: return "rectangle";
    case ShapeKind::kPole: return "pole";
  }
  return "unknown";
}

ShapeKind shape_kind_from_string(const std::string& name) {
  if (name == "bar") return ShapeKind::kBar;
  if (name == "disk") return ShapeKind::kDisk;
  if (name == "rectangle") return ShapeKind::kRectangle;
  if (name == "pole") return ShapeKind::kPole;
  fail(ErrorCode::kConfig, "unknown shape kind '" + name + "'");
}

SceneSpec roadsim64() {
  SceneSpec spec;
  spec.classes = {
      {ShapeKind::kBar, 1, 1, {0.44, 0.44, 0.48}},
      {ShapeKind::kDisk, 1, 2, {0.74, 0.36, 0.30}},
      {ShapeKind::kRectangle, 1, 2, {0.70, 0.38, 0.32}},
      {ShapeKind::kPole, 1, 3, {0.84, 0.78, 0.34}},
  };
  return spec;
}

nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : spec.classes) {
    classes.push_back({{"kind", to_string(c.kind)},
                       {"min_count", c.min_count},
                       {"max_count", c.max_count},
                       {"color", c.color}});
  }
  return {{"name", spec.name},
          {"height", spec.height},
          {"width", spec.width},
          {"background", spec.background},
          {"classes", classes},
          {"disk_radius_min", spec.disk_radius_min},
          {"disk_radius_max", spec.disk_radius_max},
          {"rect_side_min", spec.rect_side_min},
          {"rect_side_max", spec.rect_side_max},
          {"bar_thickness_min", spec.bar_thickness_min},
          {"bar_thickness_max", spec.bar_thickness_max},
          {"bar_max_angle_deg", spec.bar_max_angle_deg},
          {"pole_width_min", spec.pole_width_min},
          {"pole_width_max", spec.pole_width_max},
          {"pole_length_min", spec.pole_length_min},
          {"pole_length_max", spec.pole_length_max},
          {"min_visible_pixels", spec.min_visible_pixels},
          {"noise_rate", spec.noise_rate},
          {"texture_noise", spec.texture_noise},
          {"color_jitter", spec.color_jitter},
          {"blur_radius", spec.blur_radius},
          {"seed", spec.seed}};
}

SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec spec = roadsim64();
  try {
    spec.name = j.value("name", spec.name);
    spec.height = j.value("height", spec.height);
    spec.width = j.value("width", spec.width);
    if (j.contains("background")) spec.background = j.at("background").get<Color>();
    if (j.contains("classes")) {
      spec.classes.clear();
      for (const auto& c : j.at("classes")) {
        ClassSpec cls;
        cls.kind = shape_kind_from_string(c.at("kind").get<std::string>());
        cls.min_count = c.value("min_count", 1);
        cls.max_count = c.value("max_count", cls.min_count);
        cls.color = c.value("color", cls.color);
        spec.classes.push_back(cls);
      }
    }
    spec.disk_radius_min = j.value("disk_radius_min", spec.disk_radius_min);
    spec.disk_radius_max = j.value("disk_radius_max", spec.disk_radius_max);
    spec.rect_side_min = j.value("rect_side_min", spec.rect_side_min);
    spec.rect_side_max = j.value("rect_side_max", spec.rect_side_max);
    spec.bar_thickness_min = j.value("bar_thickness_min", spec.bar_thickness_min);
    spec.bar_thickness_max = j.value("bar_thickness_max", spec.bar_thickness_max);
    spec.bar_max_angle_deg = j.value("bar_max_angle_deg", spec.bar_max_angle_deg);
    spec.pole_width_min = j.value("pole_width_min", spec.pole_width_min);
    spec.pole_width_max = j.value("pole_width_max", spec.pole_width_max);
    spec.pole_length_min = j.value("pole_length_min", spec.pole_length_min);
    spec.pole_length_max = j.value("pole_length_max", spec.pole_length_max);
    spec.min_visible_pixels = j.value("min_visible_pixels", spec.min_visible_pixels);
    spec.noise_rate = j.value("noise_rate", spec.noise_rate);
    spec.texture_noise = j.value("texture_noise", spec.texture_noise);
    spec.color_jitter = j.value("color_jitter", spec.color_jitter);
    spec.blur_radius = j.value("blur_radius", spec.blur_radius);
    spec.seed = j.value("seed", spec.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, std::string("malformed scene spec: ") + e.what());
  }
  validate(spec);
  return spec;
}

void validate(const SceneSpec& spec) {
  const int c = spec.num_classes();
  require(c >= 2 && c <= 19, ErrorCode::kConfig, "class count must lie in [2, 19]");
  require(spec.noise_rate >= 0.0 && spec.noise_rate <= 1.0, ErrorCode::kConfig,
          "noise rate must lie in [0, 1]");
  require(spec.height >= 4 && spec.width >= 4, ErrorCode::kConfig, "image too small");
  require(spec.disk_radius_min > 0 && spec.disk_radius_min <= spec.disk_radius_max, ErrorCode::kConfig,
          "invalid disk radius range");
  require(spec.rect_side_min >= 1 && spec.rect_side_min <= spec.rect_side_max, ErrorCode::kConfig,
          "invalid rectangle size range");
  require(spec.bar_thickness_min > 0 && spec.bar_thickness_min <= spec.bar_thickness_max,
          ErrorCode::kConfig, "invalid bar thickness range");
  require(spec.pole_width_min >= 1 && spec.pole_width_min <= spec.pole_width_max &&
              spec.pole_length_min >= 1 && spec.pole_length_min <= spec.pole_length_max,
          ErrorCode::kConfig, "invalid pole size range");
  require(spec.texture_noise >= 0 && spec.color_jitter >= 0 && spec.blur_radius >= 0,
          ErrorCode::kConfig, "rendering parameters must be non-negative");
  for (const auto& cls : spec.classes) {
    require(cls.min_count >= 0 && cls.min_count <= cls.max_count, ErrorCode::kConfig,
            "invalid shape count range");
  }
}

std::uint64_t spec_hash(const SceneSpec& spec) {
  const std::string canonical = to_json(spec).dump();
  return fnv1a(canonical.data(), canonical.size());
}

Sample generate_scene(const SceneSpec& spec, int index) {
  validate(spec);
  require(index >= 0, ErrorCode::kInvalidArgument, "sample index must be non-negative");
  const auto seed = spec.seed;
  const auto idx = static_cast<std::uint64_t>(index);
  for (int attempt = 0; attempt < kMaxSceneAttempts; ++attempt) {
    Rng rng({seed, idx, static_cast<std::uint64_t>(attempt), kSceneSalt});
    std::vector<ShapeRecord> shapes;
    bool placed_all = true;
    for (int order = 0; order < 4 && placed_all; ++order) {
      for (std::size_t k = 0; k < spec.classes.size() && placed_all; ++k) {
        const ClassSpec& cls = spec.classes[k];
        if (paint_order(cls.kind) != order) continue;
        const int count = rng.uniform_int(cls.min_count, cls.max_count);
        for (int i = 0; i < count && placed_all; ++i) {
          placed_all = place_shape(spec, cls, static_cast<int>(k) + 1, rng, shapes);
        }
      }
    }
    if (!placed_all) continue;
    LabelMap clean(spec.height, spec.width, 0);
    paint(shapes, clean);
    const bool visible = std::all_of(shapes.begin(), shapes.end(), [&](const ShapeRecord& s) {
      return visible_pixels(s, clean) >= spec.min_visible_pixels;
    });
    if (!visible) continue;

    Sample sample;
    sample.rgb = render(spec, clean, rng);
    sample.noisy = spec.noise_rate > 0.0
                       ? inject_label_noise_exact(clean, spec.noise_rate, Rng::mix({seed, idx, kNoiseSalt}),
                                                  spec.num_classes())
                       : clean;
    sample.clean = std::move(clean);
    sample.shapes = std::move(shapes);
    return sample;
  }
  fail(ErrorCode::kDegenerate, "scene rules unsatisfiable after " + std::to_string(kMaxSceneAttempts) +
                                   " attempts for sample " + std::to_string(index));
}

LabelMap inject_label_noise(const LabelMap& label, double rate, std::uint64_t seed, int num_classes) {
  require(rate >= 0.0 && rate <= 1.0, ErrorCode::kInvalidArgument, "noise rate must lie in [0, 1]");
  require(num_classes >= 2 || rate == 0.0, ErrorCode::kInvalidArgument,
          "label noise needs at least two classes");
  LabelMap out = label;
  Rng rng({seed, kNoiseSalt});
  for (std::size_t i = 0; i < out.pixels(); ++i) {
    if (label.ignored(i)) continue;
    if (rng.bernoulli(rate)) out.classes[i] = resample_class(label.classes[i], num_classes, rng);
  }
  return out;
}

LabelMap inject_label_noise_exact(const LabelMap& label, double rate, std::uint64_t seed,
                                  int num_classes) {
  require(rate >= 0.0 && rate <= 1.0, ErrorCode::kInvalidArgument, "noise rate must lie in [0, 1]");
  require(num_classes >= 2 || rate == 0.0, ErrorCode::kInvalidArgument,
          "label noise needs at least two classes");
  LabelMap out = label;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < label.pixels(); ++i) {
    if (!label.ignored(i)) candidates.push_back(i);
  }
  const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(candidates.size())));
  Rng rng({seed, kNoiseSalt, 1});
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.next() % (candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
    const std::size_t p = candidates[i];
    out.classes[p] = resample_class(label.classes[p], num_classes, rng);
  }
  return out;
}

int count_components(const LabelMap& map, int class_id) {
  std::vector<std::uint8_t> seen(map.pixels(), 0);
  std::vector<std::size_t> stack;
  int components = 0;
  for (std::size_t start = 0; start < map.pixels(); ++start) {
    if (seen[start] || map.classes[start] != class_id) continue;
    ++components;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const int r = static_cast<int>(p) / map.width;
      const int c = static_cast<int>(p) % map.width;
      const int nr[4] = {r - 1, r + 1, r, r};
      const int nc[4] = {c, c, c - 1, c + 1};
      for (int n = 0; n < 4; ++n) {
        if (nr[n] < 0 || nr[n] >= map.height || nc[n] < 0 || nc[n] >= map.width) continue;
        const auto q = static_cast<std::size_t>(nr[n]) * map.width + nc[n];
        if (!seen[q] && map.classes[q] == class_id) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
  }
  return components;
}

AuditResult audit_scene(const SceneSpec& spec, const Sample& sample) {
  AuditResult result;
  auto violation = [&](std::string what) {
    result.ok = false;
    result.violations.push_back(std::move(what));
  };
  for (std::size_t k = 0; k < spec.classes.size(); ++k) {
    if (spec.classes[k].kind != ShapeKind::kBar) continue;
    const int id = static_cast<int>(k) + 1;
    const auto bars = std::count_if(sample.shapes.begin(), sample.shapes.end(),
                                    [&](const ShapeRecord& s) { return s.class_id == id; });
    const int components = count_components(sample.clean, id);
    if (bars > 0 && (components < 1 || components > bars)) {
      violation("bar class " + std::to_string(id) + " has " + std::to_string(components) +
                " components for " + std::to_string(bars) + " bars");
    }
  }
  for (std::size_t i = 0; i < sample.shapes.size(); ++i) {
    const ShapeRecord& a = sample.shapes[i];
    if (visible_pixels(a, sample.clean) < spec.min_visible_pixels) {
      violation("shape " + std::to_string(i) + " of class " + std::to_string(a.class_id) + " is occluded");
    }
    if (a.kind != ShapeKind::kDisk) continue;
    for (std::size_t j = i + 1; j < sample.shapes.size(); ++j) {
      const ShapeRecord& b = sample.shapes[j];
      if (b.kind == ShapeKind::kDisk && !disks_clear(a, b)) {
        violation("disks " + std::to_string(i) + " and " + std::to_string(j) + " touch");
      }
    }
  }
  return result;
}

Sample augment(const Sample& sample, const AugmentOptions& options, std::uint64_t seed) {
  const int h = sample.clean.height;
  const int w = sample.clean.width;
  const int ch = options.crop_height > 0 ? options.crop_height : h;
  const int cw = options.crop_width > 0 ? options.crop_width : w;
  require(ch <= h && cw <= w, ErrorCode::kInvalidArgument, "crop larger than the image");
  require(options.jitter >= 0.0, ErrorCode::kInvalidArgument, "jitter amplitude must be non-negative");
  Rng rng({seed, kAugmentSalt});
  const int top = rng.uniform_int(0, h - ch);
  const int left = rng.uniform_int(0, w - cw);
  const double offset = options.jitter > 0.0 ? rng.uniform(-options.jitter, options.jitter) : 0.0;

  auto src_col = [&](int x) { return left + (options.flip ? cw - 1 - x : x); };
  auto remap = [&](const LabelMap& in) {
    LabelMap out(ch, cw);
    if (!in.ignore.empty()) out.ignore.assign(out.pixels(), 0);
    for (int y = 0; y < ch; ++y) {
      for (int x = 0; x < cw; ++x) {
        const std::size_t s = static_cast<std::size_t>(top + y) * w + src_col(x);
        const std::size_t d = static_cast<std::size_t>(y) * cw + x;
        out.classes[d] = in.classes[s];
        if (!in.ignore.empty()) out.ignore[d] = in.ignore[s];
      }
    }
    return out;
  };

  Sample out;
  out.rgb = Tensor(3, ch, cw);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < ch; ++y) {
      for (int x = 0; x < cw; ++x) {
        double v = sample.rgb.at(c, top + y, src_col(x));
        if (offset != 0.0) v = std::clamp(v + offset, 0.0, 1.0);
        out.rgb.at(c, y, x) = v;
      }
    }
  }
  out.clean = remap(sample.clean);
  out.noisy = remap(sample.noisy);
  return out;
}

std::span<const Sample> Dataset::split(const std::string& name) const {
  if (name == "train") return train();
  if (name == "val" || name == "validation") return validation();
  if (name == "all") return samples;
  fail(ErrorCode::kConfig, "unknown split '" + name + "'");
}

int default_train_count(int n) { return n - static_cast<int>(std::lround(n / 6.0)); }

Dataset generate_dataset(const SceneSpec& spec, int n, int train_count) {
  require(n >= 0, ErrorCode::kInvalidArgument, "sample count must be non-negative");
  if (train_count < 0) train_count = default_train_count(n);
  require(train_count <= n, ErrorCode::kInvalidArgument, "train split larger than the dataset");
  Dataset ds;
  ds.spec = spec;
  ds.train_count = train_count;
  ds.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ds.samples.push_back(generate_scene(spec, i));
  return ds;
}

std::uint64_t sample_hash(const Sample& sample) {
  std::vector<std::uint8_t> rgb = io::to_rgb8(sample.rgb).pixels;
  std::uint64_t h = fnv1a(rgb.data(), rgb.size());
  h = fnv1a(sample.clean.classes.data(), sample.clean.classes.size() * sizeof(int), h);
  h = fnv1a(sample.noisy.classes.data(), sample.noisy.classes.size() * sizeof(int), h);
  return h;
}

nlohmann::json write_dataset(const SceneSpec& spec, int n, const std::filesystem::path& out_dir,
                             int train_count) {
  namespace fs = std::filesystem;
  validate(spec);
  require(n >= 0, ErrorCode::kInvalidArgument, "sample count must be non-negative");
  if (train_count < 0) train_count = default_train_count(n);
  require(train_count <= n, ErrorCode::kInvalidArgument, "train split larger than the dataset");
  std::error_code ec;
  for (const char* sub : {"images", "labels", "labels_clean"}) {
    fs::create_directories(out_dir / sub, ec);
    require(!ec, ErrorCode::kIo, "cannot create '" + (out_dir / sub).string() + "': " + ec.message());
  }
  nlohmann::json files = nlohmann::json::array();
  std::uint64_t dataset_hash = spec_hash(spec);
  for (int i = 0; i < n; ++i) {
    const Sample s = generate_scene(spec, i);
    const std::string name = indexed_name(i);
    io::write_png(out_dir / "images" / name, io::to_rgb8(s.rgb));
    io::write_png(out_dir / "labels" / name, io::to_gray8(s.noisy));
    io::write_png(out_dir / "labels_clean" / name, io::to_gray8(s.clean));
    const std::uint64_t h = sample_hash(s);
    dataset_hash = fnv1a(&h, sizeof h, dataset_hash);
    files.push_back({{"index", i}, {"file", name}, {"hash", hex(h)}});
  }
  nlohmann::json manifest = {{"format_version", kDatasetFormatVersion},
                             {"spec", to_json(spec)},
                             {"spec_hash", hex(spec_hash(spec))},
                             {"n", n},
                             {"train_count", train_count},
                             {"dataset_hash", hex(dataset_hash)},
                             {"files", files}};
  const fs::path tmp = out_dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write manifest in '" + out_dir.string() + "'");
    out << manifest.dump(2) << '\n';
    require(static_cast<bool>(out), ErrorCode::kIo, "failed writing manifest");
  }
  fs::rename(tmp, out_dir / "manifest.json", ec);
  require(!ec, ErrorCode::kIo, "cannot finalise manifest: " + ec.message());
  return manifest;
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(static_cast<bool>(in), ErrorCode::kIo, "no manifest.json in '" + dir.string() + "'");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, std::string("corrupt manifest: ") + e.what());
  }
  Dataset ds;
  int n = 0;
  std::string recorded_hash;
  try {
    require(manifest.at("format_version").get<int>() == kDatasetFormatVersion, ErrorCode::kIo,
            "unsupported dataset format version");
    ds.spec = scene_spec_from_json(manifest.at("spec"));
    recorded_hash = manifest.at("spec_hash").get<std::string>();
    n = manifest.at("n").get<int>();
    ds.train_count = manifest.at("train_count").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, std::string("corrupt manifest: ") + e.what());
  }
  require(recorded_hash == hex(spec_hash(ds.spec)), ErrorCode::kIo,
          "manifest spec hash does not match its spec");
  require(n >= 0 && ds.train_count >= 0 && ds.train_count <= n, ErrorCode::kIo,
          "manifest split sizes are inconsistent");
  const auto& files = manifest.at("files");
  require(files.is_array() && files.size() == static_cast<std::size_t>(n), ErrorCode::kIo,
          "manifest file list does not match n");
  ds.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::string name = indexed_name(i);
    Sample s;
    s.rgb = io::from_rgb8(io::read_png(dir / "images" / name));
    s.noisy = io::from_gray8(io::read_png(dir / "labels" / name));
    s.clean = io::from_gray8(io::read_png(dir / "labels_clean" / name));
    require(s.rgb.height() == ds.spec.height && s.rgb.width() == ds.spec.width &&
                s.noisy.height == ds.spec.height && s.noisy.width == ds.spec.width &&
                s.clean.height == ds.spec.height && s.clean.width == ds.spec.width,
            ErrorCode::kIo, "sample " + name + " does not match the manifest image size");
    require(hex(sample_hash(s)) == files[static_cast<std::size_t>(i)].value("hash", ""), ErrorCode::kIo,
            "sample " + name + " does not match its manifest hash");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace gamblenet::synth
