#pragma once

// 8-bit RGB rasters and PNG IO.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace iimt {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel

  static Image filled(int width, int height, Rgb color);

  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  Rgb rgb(int x, int y) const { return {at(x, y, 0), at(x, y, 1), at(x, y, 2)}; }
  bool operator==(const Image&) const = default;
};

// Throws IoError with the path on any failure. Grayscale, palette, alpha and
// 16-bit inputs are converted to 8-bit RGB.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

// Channel values scaled to [0, 1] and back (rounded, clamped).
std::vector<double> to_unit(const Image& img);
Image from_unit(std::span<const double> values, int width, int height);

}  // namespace iimt
