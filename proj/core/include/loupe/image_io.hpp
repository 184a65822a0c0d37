#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace loupe {

/// Greyscale raster as stored in a binary PGM (P5) file.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint16_t max_value = 255; // 255 (8-bit) or 65535 (16-bit, big-endian on disk)
  std::vector<std::uint16_t> pixels; // row-major

  std::uint16_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
};

void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

} // namespace loupe
