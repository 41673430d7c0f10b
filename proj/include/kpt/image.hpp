#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "kpt/keypoints.hpp"

namespace kpt {

/// Planar float image [channels, height, width].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  static Image zeros(std::size_t c, std::size_t h, std::size_t w) {
    return {c, h, w, std::vector<float>(c * h * w, 0.0f)};
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

/// Rounds every value to the nearest k/255 with k in 0..255.
void quantize_255(std::vector<float>& values);
inline float from_byte(std::uint8_t k) { return static_cast<float>(k) / 255.0f; }

/// Bilinear sample with zero outside the image.
float sample_bilinear(const Image& img, std::size_t channel, double x, double y);

/// out(q) = src(m^-1 q) for every output pixel q; `m` maps source pixel
/// coordinates to output pixel coordinates.
Image warp_affine(const Image& src, const Affine2& m, std::size_t out_height, std::size_t out_width);

/// Binary P5 (one channel) and P6 (three channels), maxval 255.
void write_pgm(const std::filesystem::path& path, const Image& img, std::size_t channel);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width,
                                   std::size_t& height);

/// Reads P5/P6 (.pgm, .ppm, .pnm) or JPEG (.jpg, .jpeg) into a 3-channel
/// image with values in [0, 1]. Grayscale input is replicated.
Image read_image(const std::filesystem::path& path);

}  // namespace kpt
