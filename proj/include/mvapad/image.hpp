#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mvapad/tensor.hpp"

namespace mvapad {

/// 8-bit grayscale raster, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

/// Binary PGM (P5) with maxval <= 255. Throws FormatError on an unsupported
/// format (including PNG, which is recognized but not decoded) or a corrupt
/// payload; `source` names the input in messages.
GrayImage decode_pgm(const std::string& bytes, const std::string& source = "<memory>");
std::string encode_pgm(const GrayImage& image);

GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& image);

/// [1,H,W] tensor with values pixel / 255.
Tensor image_to_tensor(const GrayImage& image, DType dtype = DType::f32);
/// Inverse of image_to_tensor for [H,W] or [1,H,W]: clamps to [0,1] and
/// rounds to the nearest level.
GrayImage tensor_to_image(const Tensor& t);

/// Bilinear resampling of a [C,H,W] tensor with half-pixel centers and edge
/// clamping. Identity when the size already matches.
Tensor resize_bilinear(const Tensor& image, std::size_t out_height, std::size_t out_width);

/// Reads a PGM and returns it as [1,size,size] in [0,1].
Tensor decode_image(const std::string& path, std::size_t size, DType dtype = DType::f32);

/// Min-max maps `values` (height*width) to 0..255. A constant map gives 0.
GrayImage normalize_to_image(const std::vector<double>& values, std::size_t height, std::size_t width);

}  // namespace mvapad
