#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gamblenet/tensor.hpp"

namespace gamblenet::metrics {

struct Point {
  int row = 0;
  int col = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Per-class boundary pixels: pixels with at least one 4-neighbour of a
/// different class. The image border by itself does not create contours.
struct ContourSet {
  std::vector<std::vector<Point>> per_class;
};

struct IouResult {
  std::vector<std::optional<double>> per_class;  // empty when absent from both maps
  double mean = 0.0;
};

struct BfResult {
  std::vector<std::optional<double>> per_class;
  double mean = 0.0;
};

struct HausdorffResult {
  std::vector<std::optional<double>> per_class;
  double mean = 0.0;
};

struct Confidence {
  double mean = 0.0;
  double std = 0.0;
};

/// Fraction of the image diagonal used as the default BF tolerance.
inline constexpr double kBfToleranceFraction = 0.0075;
double default_bf_tolerance(int height, int width);

/// Row-major (truth, predicted) pixel counts; ignored pixels are skipped.
std::vector<long long> confusion_matrix(const LabelMap& pred, const LabelMap& label,
                                        int num_classes);
IouResult iou_from_confusion(std::span<const long long> confusion, int num_classes);
IouResult confusion_and_iou(const LabelMap& pred, const LabelMap& label, int num_classes);

ContourSet extract_contours(const LabelMap& map, int num_classes);

/// Symmetric mean of directed mean nearest-neighbour distances.
double modified_hausdorff(std::span<const Point> x, std::span<const Point> y);

HausdorffResult image_hausdorff(const LabelMap& pred, const LabelMap& label, int num_classes);

BfResult bf_score(const LabelMap& pred, const LabelMap& label, int num_classes, double tau);
BfResult bf_score(const LabelMap& pred, const LabelMap& label, int num_classes);

/// Mean and population standard deviation of the per-pixel max probability.
Confidence mean_max_confidence(std::span<const Tensor> preds);

/// Aggregate over a set of images.
struct MetricReport {
  int num_classes = 0;
  std::vector<std::optional<double>> iou;
  std::vector<std::optional<double>> bf;
  std::vector<std::optional<double>> hausdorff;
  double mean_iou = 0.0;
  double mean_bf = 0.0;
  double mean_hausdorff = 0.0;
  Confidence confidence;
  int images = 0;
  int hausdorff_images = 0;  // images where at least one class was scored
};

/// Streaming accumulator: IoU from the pooled confusion matrix, BF and
/// Hausdorff averaged per class over the images where they are defined.
class Evaluator {
 public:
  explicit Evaluator(int num_classes, std::optional<double> bf_tolerance = std::nullopt);

  void add(const LabelMap& pred, const LabelMap& label);
  /// Also accumulates confidence statistics from the soft prediction.
  void add(const Tensor& soft_pred, const LabelMap& label);

  MetricReport report() const;

 private:
  int num_classes_;
  std::optional<double> tau_;
  std::vector<long long> confusion_;
  std::vector<double> bf_sum_, hd_sum_;
  std::vector<int> bf_count_, hd_count_;
  double image_bf_sum_ = 0.0, image_hd_sum_ = 0.0;
  int image_bf_count_ = 0, image_hd_count_ = 0;
  double conf_sum_ = 0.0, conf_sq_sum_ = 0.0;
  long long conf_count_ = 0;
  int images_ = 0;
};

std::string report_csv(const MetricReport& report);
std::string report_json(const MetricReport& report);

}  // namespace gamblenet::metrics
