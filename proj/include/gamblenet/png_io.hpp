#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gamblenet/tensor.hpp"

namespace gamblenet::io {

/// 8-bit interleaved image.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Image8& image);
Image8 read_png(const std::filesystem::path& path);

/// (3, H, W) tensor in [0,1] <-> 8-bit RGB, rounding to nearest.
Image8 to_rgb8(const Tensor& rgb);
Tensor from_rgb8(const Image8& image);

/// Class-index map <-> single-channel 8-bit image.
Image8 to_gray8(const LabelMap& labels);
LabelMap from_gray8(const Image8& image);

/// Single-channel tensor scaled by its maximum into [0, 255].
Image8 to_gray8_normalized(const Tensor& map);

}  // namespace gamblenet::io
