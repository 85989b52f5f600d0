#include "gamblenet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gamblenet {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNotNormalized: return "not_normalized";
    case ErrorCode::kDegenerate: return "degenerate";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

Tensor::Tensor(int channels, int height, int width, double fill)
    : channels_(channels), height_(height), width_(width) {
  require(channels >= 0 && height >= 0 && width >= 0, ErrorCode::kInvalidArgument,
          "tensor dimensions must be non-negative");
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

std::string Tensor::shape_string() const {
  std::ostringstream out;
  out << "(" << channels_ << ", " << height_ << ", " << width_ << ")";
  return out.str();
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void validate_labels(const LabelMap& labels, int num_classes) {
  require(labels.classes.size() == static_cast<std::size_t>(labels.height) * labels.width,
          ErrorCode::kShapeMismatch, "label map storage does not match its dimensions");
  require(labels.ignore.empty() || labels.ignore.size() == labels.classes.size(),
          ErrorCode::kShapeMismatch, "ignore mask size does not match label map");
  for (std::size_t i = 0; i < labels.classes.size(); ++i) {
    if (labels.ignored(i)) continue;
    const int k = labels.classes[i];
    if (k < 0 || k >= num_classes) {
      fail(ErrorCode::kInvalidArgument,
           "label " + std::to_string(k) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

void validate_prediction(const Tensor& pred, double tolerance) {
  require(pred.channels() >= 1, ErrorCode::kShapeMismatch, "prediction has no channels");
  const int plane = pred.plane();
  for (int p = 0; p < plane; ++p) {
    double sum = 0.0;
    for (int c = 0; c < pred.channels(); ++c) {
      const double v = pred[static_cast<std::size_t>(c) * plane + p];
      if (!(v >= 0.0 && v <= 1.0)) {
        fail(ErrorCode::kNotNormalized, "prediction entry outside [0,1]");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > tolerance) {
      fail(ErrorCode::kNotNormalized, "prediction vector does not sum to one");
    }
  }
}

LabelMap argmax(const Tensor& pred) {
  LabelMap out(pred.height(), pred.width());
  const int plane = pred.plane();
  for (int p = 0; p < plane; ++p) {
    int best = 0;
    double best_value = pred[static_cast<std::size_t>(p)];
    for (int c = 1; c < pred.channels(); ++c) {
      const double v = pred[static_cast<std::size_t>(c) * plane + p];
      if (v > best_value) {
        best_value = v;
        best = c;
      }
    }
    out.classes[static_cast<std::size_t>(p)] = best;
  }
  return out;
}

Tensor one_hot(const LabelMap& labels, int num_classes) {
  validate_labels(labels, num_classes);
  Tensor out(num_classes, labels.height, labels.width);
  const int plane = out.plane();
  for (int p = 0; p < plane; ++p) {
    if (labels.ignored(static_cast<std::size_t>(p))) continue;
    out[static_cast<std::size_t>(labels.classes[p]) * plane + p] = 1.0;
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.height() == b.height() && a.width() == b.width(), ErrorCode::kShapeMismatch,
          "cannot concatenate " + a.shape_string() + " with " + b.shape_string());
  Tensor out(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
  return out;
}

}  // namespace gamblenet
