#pragma once

#include "fuseseg/image.hpp"
#include "fuseseg/params.hpp"
#include "fuseseg/rng.hpp"
#include "fuseseg/tensor.hpp"

namespace fuseseg::models {

struct SegOutput {
  Tensor logits;  // [K,H,W]
  Tensor probs;   // softmax over classes, per pixel
};

struct SegConfig {
  int classes = 3;
  int base_channels = 16;  // channel plan base -> 2x -> 4x
  int d_k = 16;
};

// Small U-shaped net: three conv stages down, single-head attention
// bottleneck, three stages up with skip concatenation. Every stage ends with
// a 1x1 adapter added residually; skips are taken after the adapter.
class SegModel {
 public:
  SegModel(const SegConfig& cfg, Rng init);

  const SegConfig& config() const { return cfg_; }
  ParamSet& params() { return ws_; }
  const ParamSet& params() const { return ws_; }

  SegOutput segment(const Tensor& img) const;

 private:
  struct Stage {
    Tensor w, b;          // 3x3 conv
    Tensor ad_w, ad_b;    // 1x1 adapter
  };

  Tensor run_stage(const Stage& s, const Tensor& x) const;

  SegConfig cfg_;
  ParamSet ws_;
  Stage enc1_, enc2_, enc3_;
  Tensor bn_ln_g_, bn_ln_b_, bn_wq_, bn_wk_, bn_wv_;
  Stage dec3_, dec2_, dec1_;
  Tensor head_w_, head_b_;
};

// Per-pixel argmax; ties resolve to the lower class index.
LabelImage predict_mask(const SegOutput& out);

}  // namespace fuseseg::models
