#include "gamblenet/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace gamblenet::io {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Image8& image) {
  require(image.channels == 1 || image.channels == 3, ErrorCode::kInvalidArgument,
          "PNG writer supports 1 or 3 channels");
  require(image.pixels.size() == static_cast<std::size_t>(image.width) * image.height * image.channels,
          ErrorCode::kShapeMismatch, "image buffer does not match its dimensions");
  File file(std::fopen(path.c_str(), "wb"));
  require(file != nullptr, ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::kIo, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::kIo, "failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, image.pixels.data() + stride * y);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 read_png(const std::filesystem::path& path) {
  File file(std::fopen(path.c_str(), "rb"));
  require(file != nullptr, ErrorCode::kIo, "cannot open '" + path.string() + "'");
  unsigned char header[8] = {};
  require(std::fread(header, 1, 8, file.get()) == 8 && png_sig_cmp(header, 0, 8) == 0, ErrorCode::kIo,
          "'" + path.string() + "' is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::kIo, "libpng initialisation failed");
  }
  Image8 image;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::kIo, "corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  image.width = static_cast<int>(png_get_image_width(png, info));
  image.height = static_cast<int>(png_get_image_height(png, info));
  image.channels = static_cast<int>(png_get_channels(png, info));
  image.pixels.resize(static_cast<std::size_t>(image.width) * image.height * image.channels);
  const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
  for (int y = 0; y < image.height; ++y) png_read_row(png, image.pixels.data() + stride * y, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

Image8 to_rgb8(const Tensor& rgb) {
  require(rgb.channels() == 3, ErrorCode::kShapeMismatch, "RGB tensor must have three channels");
  Image8 image{rgb.width(), rgb.height(), 3, {}};
  image.pixels.resize(static_cast<std::size_t>(rgb.plane()) * 3);
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(rgb.at(c, y, x), 0.0, 1.0);
        image.pixels[(static_cast<std::size_t>(y) * rgb.width() + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return image;
}

Tensor from_rgb8(const Image8& image) {
  require(image.channels == 3, ErrorCode::kShapeMismatch, "expected an RGB image");
  Tensor rgb(3, image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        rgb.at(c, y, x) = image.pixels[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] / 255.0;
      }
    }
  }
  return rgb;
}

Image8 to_gray8(const LabelMap& labels) {
  Image8 image{labels.width, labels.height, 1, {}};
  image.pixels.resize(labels.pixels());
  for (std::size_t i = 0; i < labels.pixels(); ++i) {
    const int k = labels.classes[i];
    require(k >= 0 && k <= 255, ErrorCode::kInvalidArgument, "class index does not fit in 8 bits");
    image.pixels[i] = static_cast<std::uint8_t>(k);
  }
  return image;
}

LabelMap from_gray8(const Image8& image) {
  require(image.channels == 1, ErrorCode::kShapeMismatch, "label PNG must be single-channel");
  LabelMap labels(image.height, image.width);
  for (std::size_t i = 0; i < labels.pixels(); ++i) labels.classes[i] = image.pixels[i];
  return labels;
}

Image8 to_gray8_normalized(const Tensor& map) {
  require(map.channels() == 1, ErrorCode::kShapeMismatch, "expected a single-channel map");
  double peak = 0.0;
  for (double v : map.values()) peak = std::max(peak, v);
  Image8 image{map.width(), map.height(), 1, {}};
  image.pixels.resize(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = peak > 0.0 ? std::clamp(map[i] / peak, 0.0, 1.0) : 0.0;
    image.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return image;
}

}  // namespace gamblenet::io
