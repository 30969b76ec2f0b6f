#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace backdoor {

class Image;

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;  // interleaved RGB, row-major

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return &data[3 * (y * width + x)]; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const {
    return &data[3 * (y * width + x)];
  }
};

// Binary (P5) 8-bit PGM.
void write_pgm(const Image& img, const std::filesystem::path& path);
Image read_pgm(const std::filesystem::path& path);

// 8-bit RGB PNG, zlib-compressed IDAT, no filtering.
void write_png(const RgbImage& img, const std::filesystem::path& path);

}  // namespace backdoor
