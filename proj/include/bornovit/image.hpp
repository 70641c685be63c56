#pragma once

#include "bornovit/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bornovit {

/// 8-bit image, row-major HWC, RGB channel order when channels == 3.
struct Image {
  Index height = 0;
  Index width = 0;
  Index channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(Index h, Index w, Index c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), fill) {}

  std::uint8_t& at(Index y, Index x, Index c) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  std::uint8_t at(Index y, Index x, Index c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool empty() const { return height == 0 || width == 0; }
  bool operator==(const Image&) const = default;
};

/// Decodes PNG/JPEG into 1 or 3 channels (alpha dropped, 16-bit scaled down).
/// Throws DataError naming the path on failure.
Image read_image(const std::filesystem::path& path);

/// Writes a 1- or 3-channel PNG. Throws DataError on failure.
void write_png(const std::filesystem::path& path, const Image& image);

/// Bilinear resize of one float plane [h, w] to [out_h, out_w] with the
/// align-corners convention: corner samples map onto corner samples.
Eigen::ArrayXXf resize_bilinear(const Eigen::ArrayXXf& plane, Index out_h, Index out_w);

/// [3, size, size] in [0, 1]; grayscale is replicated to three channels.
/// Throws DataError on an empty image.
Tensor<float> resize_to_input(const Image& image, Index size = 224);

/// [3, H, W] tensor in [0, 1] back to an RGB image (rounded, clamped).
Image tensor_to_image(const Tensor<float>& chw);

}  // namespace bornovit
