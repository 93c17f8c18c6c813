#pragma once

#include <string>
#include <vector>

#include "draglab/tensor.hpp"

namespace draglab {

/// RGB PNG <-> [3, H, W] tensor in [-1, 1].
Tensor read_png_rgb(const std::string& path);
Tensor decode_png_rgb(const std::string& bytes);
void write_png_rgb(const std::string& path, const Tensor& image);
std::string encode_png_rgb(const Tensor& image);

/// Grayscale PNG <-> [H, W] binary mask (pixel >= 128 is editable).
Tensor read_png_mask(const std::string& path);
Tensor decode_png_mask(const std::string& bytes);
void write_png_mask(const std::string& path, const Tensor& mask);
std::string encode_png_mask(const Tensor& mask);

/// Same 8-bit quantisation the PNG writer applies.
Tensor quantize_rgb(const Tensor& image);

}  // namespace draglab
