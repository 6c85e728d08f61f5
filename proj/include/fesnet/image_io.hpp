#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fesnet/tensor.hpp"

namespace fesnet {

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB), row-major.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::size_t c)
      : width(w), height(h), channels(c), pixels(w * h * c, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

class ImageError : public Error {
 public:
  using Error::Error;
};

/// Decodes PNG (8-bit; alpha dropped), binary PGM (P5) or PPM (P6) with
/// maxval 255. The format is chosen from the file's magic bytes.
Image8 read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image8& image);
/// Binary PGM for 1 channel, PPM for 3.
void write_pnm(const std::filesystem::path& path, const Image8& image);

/// 1 x channels x H x W float tensor with values 0..255.
Tensor<float> image_to_tensor(const Image8& image);

}  // namespace fesnet
