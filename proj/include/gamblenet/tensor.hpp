#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gamblenet/error.hpp"

namespace gamblenet {

/// Dense channel-major (C, H, W) array of doubles. Network activations,
/// prediction maps, betting maps and parameters all use this layout.
class Tensor {
 public:
  // Fixed alignment keeps vectorised reductions in the same order on every run.
  using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0);

  int channels() const noexcept { return channels_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int plane() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data_[index(c, y, x)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() & noexcept { return data_; }
  std::span<const double> values() const& noexcept { return data_; }
  // Temporaries hand over their storage so range-for stays valid.
  Storage values() && noexcept { return std::move(data_); }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  std::span<double> channel(int c) {
    return std::span<double>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }
  std::span<const double> channel(int c) const {
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }

  bool same_shape(const Tensor& other) const noexcept {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }
  std::string shape_string() const;

  void fill(double value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int c, int y, int x) const noexcept {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  Storage data_;
};

/// Per-pixel integer class map with an optional ignore mask.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> classes;
  std::vector<std::uint8_t> ignore;  // empty, or one flag per pixel

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0)
      : height(h), width(w), classes(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t pixels() const noexcept { return classes.size(); }
  int& at(int y, int x) { return classes[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return classes[static_cast<std::size_t>(y) * width + x]; }
  bool ignored(std::size_t i) const noexcept { return !ignore.empty() && ignore[i] != 0; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Throws unless every non-ignored class index lies in [0, num_classes).
void validate_labels(const LabelMap& labels, int num_classes);

/// Throws unless the tensor is a valid prediction map: entries in [0,1] and
/// every per-pixel vector summing to one within `tolerance`.
void validate_prediction(const Tensor& pred, double tolerance = 1e-6);

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
LabelMap argmax(const Tensor& pred);

/// One-hot encoding of a label map into `num_classes` channels. Ignored
/// pixels encode as all-zero vectors.
Tensor one_hot(const LabelMap& labels, int num_classes);

/// Stacks tensors of equal spatial size along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);

}  // namespace gamblenet
