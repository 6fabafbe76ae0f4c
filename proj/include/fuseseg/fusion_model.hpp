#pragma once

#include <vector>

#include "fuseseg/params.hpp"
#include "fuseseg/rng.hpp"
#include "fuseseg/tensor.hpp"

namespace fuseseg::models {

// Dual-stream decomposition: a downsampled attention branch for global
// structure and a full-resolution invertible branch for local detail.
struct FeaturePair {
  Tensor low;   // [C_L, H/4, W/4]
  Tensor high;  // [C_H, H, W]
};

struct FusedImage {
  Tensor image;  // [1,H,W], sigmoid output
  Tensor attn_m1_to_m2;  // row-stochastic, undefined when attention disabled
  Tensor attn_m2_to_m1;
};

struct FusionConfig {
  int channels_low = 16;
  int channels_high = 16;
  int inn_blocks = 2;
  int attn_blocks = 2;
  int d_k = 16;
  bool cross_attention = true;  // false: plain feature averaging
  bool use_decoder = true;      // false: fixed channel-mean readout
};

struct CrossAttnResult {
  Tensor attended;  // [T, D]
  Tensor weights;   // [T, T], rows sum to 1
};

// Eq-style single-head cross attention: rows of q_tokens attend over rows of
// kv_tokens; returns A * (kv_tokens W_v).
CrossAttnResult cross_attention(const Tensor& q_tokens, const Tensor& kv_tokens,
                                const Tensor& wq, const Tensor& wk,
                                const Tensor& wv);

class FusionModel {
 public:
  FusionModel(const FusionConfig& cfg, Rng init);

  const FusionConfig& config() const { return cfg_; }
  ParamSet& fusion_params() { return wf_; }
  const ParamSet& fusion_params() const { return wf_; }
  ParamSet& discriminator_params() { return wd_; }

  FeaturePair encode(const Tensor& image) const;
  Tensor decode(const FeaturePair& f) const;
  Tensor inn_forward(const Tensor& x) const;
  Tensor inn_inverse(const Tensor& y) const;
  FusedImage fuse(const Tensor& x, const Tensor& y) const;
  // Variant exposing the per-modality encoder features (the correlation
  // loss consumes them during cooperative training).
  FusedImage fuse(const Tensor& x, const Tensor& y, FeaturePair* f1_out,
                  FeaturePair* f2_out) const;
  // which: 0 for modality-1 discriminator, 1 for modality-2.
  Tensor discriminate(const Tensor& img, int which) const;

  // Untuned pairwise cascade for >2 modality inputs: fold left.
  FusedImage fuse_cascade(const std::vector<Tensor>& images) const;

 private:
  struct AttnBlock {
    Tensor dw_w, dw_b, ln_g, ln_b, wq, wk, wv;
  };
  struct CouplingNet {
    Tensor w1, b1, w2, b2;
  };
  struct InnBlock {
    CouplingNet s, t;
  };
  struct BandAttention {
    Tensor wq, wk, wv;
  };
  struct Discriminator {
    Tensor w1, b1, w2, b2, w3, b3, w4, b4;
  };

  Tensor coupling_net(const CouplingNet& n, const Tensor& x) const;
  Tensor fuse_band(const Tensor& t1, const Tensor& t2, const BandAttention& ba,
                   Tensor* a12, Tensor* a21) const;

  FusionConfig cfg_;
  ParamSet wf_;
  ParamSet wd_;

  // encoder
  Tensor stem1_w_, stem1_b_, stem2_w_, stem2_b_;
  std::vector<AttnBlock> attn_;
  Tensor lift_w_, lift_b_;
  std::vector<InnBlock> inn_;
  // decoder
  Tensor up1_w_, up1_b_, up2_w_, up2_b_;
  Tensor merge1_w_, merge1_b_, merge2_w_, merge2_b_;
  // fusion attention per band
  BandAttention low_attn_, high_attn_;
  Discriminator disc_[2];
};

}  // namespace fuseseg::models
