#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kdseg {

// Binary PPM (P6) / PGM (P5), 8-bit, maxval 255 only. channels is 3 or 1.
struct PnmImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

PnmImage read_pnm(const std::filesystem::path& path);

void write_ppm(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> rgb);
void write_pgm(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> gray);

}  // namespace kdseg
