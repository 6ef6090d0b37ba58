#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace actnet {

// Grayscale raster as read from disk; samples hold the raw 8- or 16-bit values.
struct GrayImage {
  int width = 0;
  int height = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

// Reads an 8- or 16-bit single-channel PNG. Throws DataError naming the file
// for anything else (palette, RGB, alpha, unreadable).
GrayImage read_png_gray(const std::filesystem::path& path);

// Writes an 8-bit grayscale PNG. Output bytes depend only on the pixels.
void write_png_gray8(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& pixels);

}  // namespace actnet
