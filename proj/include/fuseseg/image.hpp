#pragma once

#include <cstdint>
#include <vector>

#include "fuseseg/tensor.hpp"

namespace fuseseg {

// Plain single-channel image in [0,1], row major. The tape-free carrier used
// by the data pipeline and metrics.
struct GrayImage {
  int h = 0;
  int w = 0;
  std::vector<double> px;

  double at(int i, int j) const { return px[static_cast<std::size_t>(i) * w + j]; }
  double& at(int i, int j) { return px[static_cast<std::size_t>(i) * w + j]; }
  static GrayImage filled(int h, int w, double v) {
    return GrayImage{h, w, std::vector<double>(static_cast<std::size_t>(h) * w, v)};
  }
};

struct LabelImage {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> px;

  uint8_t at(int i, int j) const { return px[static_cast<std::size_t>(i) * w + j]; }
  uint8_t& at(int i, int j) { return px[static_cast<std::size_t>(i) * w + j]; }
  static LabelImage filled(int h, int w, uint8_t v) {
    return LabelImage{h, w, std::vector<uint8_t>(static_cast<std::size_t>(h) * w, v)};
  }
};

inline Tensor to_tensor(const GrayImage& im) {
  return Tensor::from({1, im.h, im.w}, im.px);
}

inline GrayImage to_image(const Tensor& t) {
  if (t.ndim() == 3 && t.dim(0) == 1) return GrayImage{t.dim(1), t.dim(2), t.values()};
  if (t.ndim() == 2) return GrayImage{t.dim(0), t.dim(1), t.values()};
  throw TensorError("to_image: expected [1,H,W] or [H,W], got " + shape_str(t.shape()));
}

}  // namespace fuseseg
