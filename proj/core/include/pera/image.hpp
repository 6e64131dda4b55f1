#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace pera {

/// Interleaved RGB image, row-major HWC, float values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

/// Bilinear resampling with half-pixel centers (align_corners = false).
Image resize_bilinear(const Image& src, int out_h, int out_w);

/// Samples the source region (top, left, height, width) into an out_h x out_w
/// image. The region may be fractional; samples outside are clamped to edge.
Image crop_resize_bilinear(const Image& src, double top, double left, double height,
                           double width, int out_h, int out_w);

/// Decodes PNG or JPEG (detected from magic bytes). Gray and RGBA are
/// converted to RGB; 16-bit PNG is reduced to 8-bit.
Image read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image& image);

/// Quantizes to 8-bit with round-half-up and clamping.
std::vector<std::uint8_t> to_rgb8(const Image& image);

}  // namespace pera
