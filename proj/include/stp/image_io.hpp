#pragma once

#include <string>

#include "stp/tensor.hpp"

namespace stp {

// Images move through the pipeline as float C x H x W tensors in [0, 1].

Tensor<float> read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor<float>& image);

Tensor<float> read_png(const std::string& path);
void write_png(const std::string& path, const Tensor<float>& image);

// Dispatch on extension (.ppm / .png).
Tensor<float> read_image(const std::string& path);
void write_image(const std::string& path, const Tensor<float>& image);

// Bilinear resample of the crop rectangle (x0, y0, w, h) to out_h x out_w
// (half-pixel centers, clamped borders).
Tensor<float> bilinear_resize(const Tensor<float>& image, int x0, int y0, int w, int h, int out_h,
                              int out_w);

}  // namespace stp
