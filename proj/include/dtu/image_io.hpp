#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dtu/tensor.hpp"

namespace dtu {

// PNG/JPEG codecs (OpenCV imgcodecs behind this interface).

// Decode to (3,h,w) float in [0,1]; grayscale inputs are replicated.
Tensor<float> read_image_rgb01(const std::string& path);

// Decode to (h,w,3) 8-bit RGB for palette mapping.
Tensor<uint8_t> read_image_rgb8(const std::string& path);

// Write a (c,h,w) float image in [0,1]; c must be 1 or 3.
void write_image_png(const std::string& path, const Tensor<float>& image);

// Write class indices as an 8-bit grayscale PNG (pixel value = class id).
void write_mask_png(const std::string& path, const Tensor<int32_t>& mask);

// Blend a fixed per-class color over the image for quick inspection.
void write_overlay_png(const std::string& path, const Tensor<float>& image,
                       const Tensor<int32_t>& mask);

// Fixed display colors, indexed by class id (class 0 is transparent in
// overlays).
std::array<uint8_t, 3> class_color(int32_t cls);

}  // namespace dtu
