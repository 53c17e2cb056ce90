// SPDX-License-Identifier: Apache-2.0
//
// Planar images and the plain interchange formats used on disk: binary PPM
// (P6), PGM (P5) and little-endian PFM.
#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace sfmc {

/// Planar [C,H,W] array of doubles.
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  [[nodiscard]] std::size_t pixels() const { return height * width; }
  [[nodiscard]] double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  [[nodiscard]] double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
};

/// RGB in [0,1]; values are clamped and rounded to 8 bits.
void write_ppm(const std::filesystem::path& path, const Image& rgb);
Image read_ppm(const std::filesystem::path& path);

/// Single-channel 8-bit. Binary masks are stored as 0/255 and read back as
/// 0/1 when `as_mask` is set.
void write_pgm(const std::filesystem::path& path, const Image& gray, bool as_mask);
Image read_pgm(const std::filesystem::path& path, bool as_mask);

/// Single-channel float32, little-endian ("Pf", scale -1), rows stored
/// bottom-to-top as the format requires.
void write_pfm(const std::filesystem::path& path, const Image& map);
Image read_pfm(const std::filesystem::path& path);

}  // namespace sfmc
