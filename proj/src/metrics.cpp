#include "gamblenet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace gamblenet::metrics {
namespace {

void check_maps(const LabelMap& pred, const LabelMap& label, int num_classes) {
  require(num_classes >= 1, ErrorCode::kInvalidArgument, "class count must be positive");
  require(pred.height == label.height && pred.width == label.width, ErrorCode::kShapeMismatch,
          "prediction and label maps differ in size");
  validate_labels(pred, num_classes);
  validate_labels(label, num_classes);
}

std::vector<bool> classes_present(const LabelMap& map, int num_classes) {
  std::vector<bool> present(static_cast<std::size_t>(num_classes), false);
  for (std::size_t i = 0; i < map.pixels(); ++i) {
    if (!map.ignored(i)) present[static_cast<std::size_t>(map.classes[i])] = true;
  }
  return present;
}

// Exact nearest distance via a row-bucketed scan: rows are visited outward
// from the query row and the scan stops once the row gap alone exceeds the
// best distance found so far.
class NearestIndex {
 public:
  NearestIndex(std::span<const Point> points, int height) : rows_(static_cast<std::size_t>(height)) {
    for (const Point& p : points) rows_[static_cast<std::size_t>(p.row)].push_back(p.col);
    for (auto& r : rows_) std::sort(r.begin(), r.end());
  }

  double nearest_squared(const Point& q) const {
    double best = std::numeric_limits<double>::infinity();
    const int height = static_cast<int>(rows_.size());
    for (int offset = 0; offset < height; ++offset) {
      const double dr2 = static_cast<double>(offset) * offset;
      if (dr2 > best) break;
      for (int sign : {1, -1}) {
        if (offset == 0 && sign < 0) continue;
        const int r = q.row + sign * offset;
        if (r < 0 || r >= height) continue;
        const auto& cols = rows_[static_cast<std::size_t>(r)];
        if (cols.empty()) continue;
        auto it = std::lower_bound(cols.begin(), cols.end(), q.col);
        if (it != cols.end()) {
          const double dc = *it - q.col;
          best = std::min(best, dr2 + dc * dc);
        }
        if (it != cols.begin()) {
          const double dc = q.col - *std::prev(it);
          best = std::min(best, dr2 + dc * dc);
        }
      }
    }
    return best;
  }

 private:
  std::vector<std::vector<int>> rows_;
};

int extent_rows(std::span<const Point> a, std::span<const Point> b) {
  int rows = 0;
  for (const Point& p : a) rows = std::max(rows, p.row + 1);
  for (const Point& p : b) rows = std::max(rows, p.row + 1);
  return rows;
}

double directed_mean(std::span<const Point> from, const NearestIndex& to) {
  double sum = 0.0;
  for (const Point& p : from) sum += std::sqrt(to.nearest_squared(p));
  return sum / static_cast<double>(from.size());
}

// Fraction of `from` points within tau of some point of `to`.
double matched_fraction(std::span<const Point> from, const NearestIndex& to, double tau) {
  const double tau2 = tau * tau;
  std::size_t matched = 0;
  for (const Point& p : from) matched += to.nearest_squared(p) <= tau2 ? 1 : 0;
  return static_cast<double>(matched) / static_cast<double>(from.size());
}

double mean_of(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  return n > 0 ? sum / n : 0.0;
}

}  // namespace

double default_bf_tolerance(int height, int width) {
  return kBfToleranceFraction * std::sqrt(static_cast<double>(height) * height +
                                          static_cast<double>(width) * width);
}

std::vector<long long> confusion_matrix(const LabelMap& pred, const LabelMap& label,
                                        int num_classes) {
  check_maps(pred, label, num_classes);
  std::vector<long long> confusion(static_cast<std::size_t>(num_classes) * num_classes, 0);
  for (std::size_t i = 0; i < label.pixels(); ++i) {
    if (label.ignored(i)) continue;
    ++confusion[static_cast<std::size_t>(label.classes[i]) * num_classes + pred.classes[i]];
  }
  return confusion;
}

IouResult iou_from_confusion(std::span<const long long> confusion, int num_classes) {
  IouResult out;
  out.per_class.resize(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    long long tp = confusion[static_cast<std::size_t>(k) * num_classes + k];
    long long fp = 0;
    long long fn = 0;
    for (int j = 0; j < num_classes; ++j) {
      if (j == k) continue;
      fn += confusion[static_cast<std::size_t>(k) * num_classes + j];
      fp += confusion[static_cast<std::size_t>(j) * num_classes + k];
    }
    const long long denom = tp + fp + fn;
    if (denom > 0) out.per_class[static_cast<std::size_t>(k)] = static_cast<double>(tp) / denom;
  }
  const bool any = std::any_of(out.per_class.begin(), out.per_class.end(),
                               [](const auto& v) { return v.has_value(); });
  require(any, ErrorCode::kDegenerate, "no class present in prediction or label");
  out.mean = mean_of(out.per_class);
  return out;
}

IouResult confusion_and_iou(const LabelMap& pred, const LabelMap& label, int num_classes) {
  const auto confusion = confusion_matrix(pred, label, num_classes);
  return iou_from_confusion(confusion, num_classes);
}

ContourSet extract_contours(const LabelMap& map, int num_classes) {
  validate_labels(map, num_classes);
  ContourSet out;
  out.per_class.resize(static_cast<std::size_t>(num_classes));
  constexpr int kDr[4] = {-1, 1, 0, 0};
  constexpr int kDc[4] = {0, 0, -1, 1};
  for (int r = 0; r < map.height; ++r) {
    for (int c = 0; c < map.width; ++c) {
      const int k = map.at(r, c);
      bool boundary = false;
      for (int n = 0; n < 4 && !boundary; ++n) {
        const int rr = r + kDr[n];
        const int cc = c + kDc[n];
        if (rr < 0 || rr >= map.height || cc < 0 || cc >= map.width) continue;
        boundary = map.at(rr, cc) != k;
      }
      if (boundary) out.per_class[static_cast<std::size_t>(k)].push_back({r, c});
    }
  }
  return out;
}

double modified_hausdorff(std::span<const Point> x, std::span<const Point> y) {
  require(!x.empty() && !y.empty(), ErrorCode::kDegenerate,
          "modified Hausdorff distance is undefined for an empty contour");
  for (const Point& p : x) require(p.row >= 0, ErrorCode::kInvalidArgument, "negative row");
  for (const Point& p : y) require(p.row >= 0, ErrorCode::kInvalidArgument, "negative row");
  const int rows = extent_rows(x, y);
  const NearestIndex to_y(y, rows);
  const NearestIndex to_x(x, rows);
  return 0.5 * (directed_mean(x, to_y) + directed_mean(y, to_x));
}

HausdorffResult image_hausdorff(const LabelMap& pred, const LabelMap& label, int num_classes) {
  check_maps(pred, label, num_classes);
  const ContourSet pc = extract_contours(pred, num_classes);
  const ContourSet lc = extract_contours(label, num_classes);
  const auto in_pred = classes_present(pred, num_classes);
  const auto in_label = classes_present(label, num_classes);
  HausdorffResult out;
  out.per_class.resize(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    const auto& x = pc.per_class[static_cast<std::size_t>(k)];
    const auto& y = lc.per_class[static_cast<std::size_t>(k)];
    if (!x.empty() && !y.empty()) {
      out.per_class[static_cast<std::size_t>(k)] = modified_hausdorff(x, y);
    } else if (x.empty() && y.empty() && in_pred[k] && in_label[k]) {
      // Boundary-free class in both maps: both maps are this class everywhere.
      out.per_class[static_cast<std::size_t>(k)] = 0.0;
    }
  }
  const bool any = std::any_of(out.per_class.begin(), out.per_class.end(),
                               [](const auto& v) { return v.has_value(); });
  require(any, ErrorCode::kDegenerate, "no class has contours in both maps");
  out.mean = mean_of(out.per_class);
  return out;
}

BfResult bf_score(const LabelMap& pred, const LabelMap& label, int num_classes, double tau) {
  require(tau >= 0.0, ErrorCode::kInvalidArgument, "BF tolerance must be non-negative");
  check_maps(pred, label, num_classes);
  const ContourSet pc = extract_contours(pred, num_classes);
  const ContourSet lc = extract_contours(label, num_classes);
  const auto in_pred = classes_present(pred, num_classes);
  const auto in_label = classes_present(label, num_classes);
  BfResult out;
  out.per_class.resize(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    if (!(in_pred[k] && in_label[k])) continue;
    const auto& x = pc.per_class[static_cast<std::size_t>(k)];
    const auto& y = lc.per_class[static_cast<std::size_t>(k)];
    double score = 0.0;
    if (x.empty() && y.empty()) {
      score = 1.0;
    } else if (!x.empty() && !y.empty()) {
      const int rows = pred.height;
      const double precision = matched_fraction(x, NearestIndex(y, rows), tau);
      const double recall = matched_fraction(y, NearestIndex(x, rows), tau);
      score = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    out.per_class[static_cast<std::size_t>(k)] = score;
  }
  out.mean = mean_of(out.per_class);
  return out;
}

BfResult bf_score(const LabelMap& pred, const LabelMap& label, int num_classes) {
  return bf_score(pred, label, num_classes, default_bf_tolerance(label.height, label.width));
}

Confidence mean_max_confidence(std::span<const Tensor> preds) {
  require(!preds.empty(), ErrorCode::kDegenerate, "mean-max confidence of an empty batch");
  double sum = 0.0;
  double sq = 0.0;
  long long n = 0;
  for (const Tensor& pred : preds) {
    const int plane = pred.plane();
    for (int p = 0; p < plane; ++p) {
      double best = 0.0;
      for (int c = 0; c < pred.channels(); ++c) {
        best = std::max(best, pred[static_cast<std::size_t>(c) * plane + p]);
      }
      sum += best;
      sq += best * best;
      ++n;
    }
  }
  require(n > 0, ErrorCode::kDegenerate, "mean-max confidence over zero pixels");
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
  return {mean, std::sqrt(var)};
}

Evaluator::Evaluator(int num_classes, std::optional<double> bf_tolerance)
    : num_classes_(num_classes),
      tau_(bf_tolerance),
      confusion_(static_cast<std::size_t>(num_classes) * num_classes, 0),
      bf_sum_(static_cast<std::size_t>(num_classes), 0.0),
      hd_sum_(static_cast<std::size_t>(num_classes), 0.0),
      bf_count_(static_cast<std::size_t>(num_classes), 0),
      hd_count_(static_cast<std::size_t>(num_classes), 0) {
  require(num_classes >= 1, ErrorCode::kInvalidArgument, "class count must be positive");
}

void Evaluator::add(const LabelMap& pred, const LabelMap& label) {
  const auto confusion = confusion_matrix(pred, label, num_classes_);
  for (std::size_t i = 0; i < confusion.size(); ++i) confusion_[i] += confusion[i];

  const double tau = tau_.value_or(default_bf_tolerance(label.height, label.width));
  const BfResult bf = bf_score(pred, label, num_classes_, tau);
  bool any_bf = false;
  for (int k = 0; k < num_classes_; ++k) {
    if (const auto& v = bf.per_class[static_cast<std::size_t>(k)]) {
      bf_sum_[k] += *v;
      ++bf_count_[k];
      any_bf = true;
    }
  }
  if (any_bf) {
    image_bf_sum_ += bf.mean;
    ++image_bf_count_;
  }

  try {
    const HausdorffResult hd = image_hausdorff(pred, label, num_classes_);
    for (int k = 0; k < num_classes_; ++k) {
      if (const auto& v = hd.per_class[static_cast<std::size_t>(k)]) {
        hd_sum_[k] += *v;
        ++hd_count_[k];
      }
    }
    image_hd_sum_ += hd.mean;
    ++image_hd_count_;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerate) throw;
  }
  ++images_;
}

void Evaluator::add(const Tensor& soft_pred, const LabelMap& label) {
  add(argmax(soft_pred), label);
  const int plane = soft_pred.plane();
  for (int p = 0; p < plane; ++p) {
    double best = 0.0;
    for (int c = 0; c < soft_pred.channels(); ++c) {
      best = std::max(best, soft_pred[static_cast<std::size_t>(c) * plane + p]);
    }
    conf_sum_ += best;
    conf_sq_sum_ += best * best;
    ++conf_count_;
  }
}

MetricReport Evaluator::report() const {
  MetricReport out;
  out.num_classes = num_classes_;
  out.images = images_;
  out.hausdorff_images = image_hd_count_;
  bool any_pixels = false;
  for (long long v : confusion_) any_pixels = any_pixels || v > 0;
  if (any_pixels) {
    const IouResult iou = iou_from_confusion(confusion_, num_classes_);
    out.iou = iou.per_class;
    out.mean_iou = iou.mean;
  } else {
    out.iou.resize(static_cast<std::size_t>(num_classes_));
  }
  out.bf.resize(static_cast<std::size_t>(num_classes_));
  out.hausdorff.resize(static_cast<std::size_t>(num_classes_));
  for (int k = 0; k < num_classes_; ++k) {
    if (bf_count_[k] > 0) out.bf[k] = bf_sum_[k] / bf_count_[k];
    if (hd_count_[k] > 0) out.hausdorff[k] = hd_sum_[k] / hd_count_[k];
  }
  out.mean_bf = image_bf_count_ > 0 ? image_bf_sum_ / image_bf_count_ : 0.0;
  out.mean_hausdorff = image_hd_count_ > 0 ? image_hd_sum_ / image_hd_count_ : 0.0;
  if (conf_count_ > 0) {
    const double mean = conf_sum_ / static_cast<double>(conf_count_);
    const double var = std::max(0.0, conf_sq_sum_ / static_cast<double>(conf_count_) - mean * mean);
    out.confidence = {mean, std::sqrt(var)};
  }
  return out;
}

std::string report_csv(const MetricReport& report) {
  std::ostringstream out;
  out.precision(10);
  auto cell = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  out << "class,iou,bf_score,hausdorff\n";
  for (int k = 0; k < report.num_classes; ++k) {
    out << k << ',';
    cell(report.iou[k]);
    out << ',';
    cell(report.bf[k]);
    out << ',';
    cell(report.hausdorff[k]);
    out << '\n';
  }
  out << "mean," << report.mean_iou << ',' << report.mean_bf << ',' << report.mean_hausdorff
      << '\n';
  return out.str();
}

std::string report_json(const MetricReport& report) {
  using nlohmann::json;
  auto column = [](const std::vector<std::optional<double>>& values) {
    json arr = json::array();
    for (const auto& v : values) arr.push_back(v ? json(*v) : json(nullptr));
    return arr;
  };
  json j;
  j["num_classes"] = report.num_classes;
  j["images"] = report.images;
  j["iou"] = column(report.iou);
  j["bf_score"] = column(report.bf);
  j["hausdorff"] = column(report.hausdorff);
  j["mean_iou"] = report.mean_iou;
  j["mean_bf_score"] = report.mean_bf;
  j["mean_hausdorff"] = report.mean_hausdorff;
  j["mean_max_confidence"] = {{"mean", report.confidence.mean}, {"std", report.confidence.std}};
  return j.dump(2);
}

}  // namespace gamblenet::metrics
