#include "fuseseg/seg_model.hpp"

#include <cmath>

#include "fuseseg/fusion_model.hpp"

namespace fuseseg::models {

namespace {

std::vector<double> normal_vec(Rng& rng, std::size_t n, double std) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * std;
  return v;
}

Tensor tokens_of(const Tensor& fmap) {
  const int c = fmap.dim(0), t = fmap.dim(1) * fmap.dim(2);
  return transpose(reshape(fmap, {c, t}));
}

}  // namespace

SegModel::SegModel(const SegConfig& cfg, Rng init) : cfg_(cfg) {
  auto conv_p = [&](const std::string& name, int co, int ci, int k) {
    double std = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    return ws_.add(Tensor::from({co, ci, k, k},
                                normal_vec(init, static_cast<std::size_t>(co) * ci * k * k, std),
                                true, name));
  };
  auto bias_p = [&](const std::string& name, int n) {
    return ws_.add(Tensor::zeros({n}, true, name));
  };
  auto mat_p = [&](const std::string& name, int din, int dout) {
    double std = std::sqrt(2.0 / static_cast<double>(din + dout));
    return ws_.add(Tensor::from({din, dout},
                                normal_vec(init, static_cast<std::size_t>(din) * dout, std),
                                true, name));
  };
  auto stage = [&](const std::string& name, int co, int ci) {
    Stage s;
    s.w = conv_p(name + ".w", co, ci, 3);
    s.b = bias_p(name + ".b", co);
    s.ad_w = conv_p(name + ".adapter.w", co, co, 1);
    s.ad_b = bias_p(name + ".adapter.b", co);
    return s;
  };

  const int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1;
  enc1_ = stage("seg.enc1", c1, 1);
  enc2_ = stage("seg.enc2", c2, c1);
  enc3_ = stage("seg.enc3", c3, c2);
  bn_ln_g_ = ws_.add(Tensor::from({c3}, std::vector<double>(static_cast<std::size_t>(c3), 1.0), true, "seg.bottleneck.ln.g"));
  bn_ln_b_ = bias_p("seg.bottleneck.ln.b", c3);
  bn_wq_ = mat_p("seg.bottleneck.wq", c3, cfg.d_k);
  bn_wk_ = mat_p("seg.bottleneck.wk", c3, cfg.d_k);
  bn_wv_ = mat_p("seg.bottleneck.wv", c3, c3);
  dec3_ = stage("seg.dec3", c2, c3 + c3);
  dec2_ = stage("seg.dec2", c1, c2 + c2);
  dec1_ = stage("seg.dec1", c1, c1 + c1);
  head_w_ = conv_p("seg.head.w", cfg.classes, c1, 1);
  head_b_ = bias_p("seg.head.b", cfg.classes);
}

Tensor SegModel::run_stage(const Stage& s, const Tensor& x) const {
  Tensor e = relu(conv2d(x, s.w, s.b, 1));
  return add(e, conv2d(e, s.ad_w, s.ad_b, 0));
}

SegOutput SegModel::segment(const Tensor& img) const {
  if (img.ndim() != 3 || img.dim(0) != 1) {
    throw TensorError("segment: expects [1,H,W], got " + shape_str(img.shape()));
  }
  if (img.dim(1) % 8 != 0 || img.dim(2) % 8 != 0) {
    throw TensorError("segment: spatial size must be a multiple of 8, got " +
                      shape_str(img.shape()));
  }
  // z-score the input so intensity scale and offset of the fused image do
  // not matter to the downstream features
  Tensor centered = sub_bcast(img, mean(img));
  Tensor norm = mul_bcast(centered, div(Tensor::scalar(1.0), sqrt(variance(img))));

  Tensor a1 = run_stage(enc1_, norm);         // [c1, H, W]
  Tensor a2 = run_stage(enc2_, avg_pool2(a1));  // [c2, H/2, W/2]
  Tensor a3 = run_stage(enc3_, avg_pool2(a2));  // [c3, H/4, W/4]
  Tensor z = avg_pool2(a3);                     // [c3, H/8, W/8]

  const int c3 = z.dim(0), h8 = z.dim(1), w8 = z.dim(2);
  Tensor t = tokens_of(z);
  Tensor tn = layer_norm(t, bn_ln_g_, bn_ln_b_);
  CrossAttnResult attn = cross_attention(tn, tn, bn_wq_, bn_wk_, bn_wv_);
  z = add(z, reshape(transpose(attn.attended), {c3, h8, w8}));

  Tensor d3 = run_stage(dec3_, concat({upsample_nearest2(z), a3}, 0));
  Tensor d2 = run_stage(dec2_, concat({upsample_nearest2(d3), a2}, 0));
  Tensor d1 = run_stage(dec1_, concat({upsample_nearest2(d2), a1}, 0));

  SegOutput out;
  out.logits = conv2d(d1, head_w_, head_b_, 0);
  out.probs = softmax(out.logits, 0);
  return out;
}

LabelImage predict_mask(const SegOutput& out) {
  const int k = out.probs.dim(0), h = out.probs.dim(1), w = out.probs.dim(2);
  LabelImage m = LabelImage::filled(h, w, 0);
  const auto& p = out.probs.values();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    double bv = p[i];
    for (int c = 1; c < k; ++c) {
      double v = p[static_cast<std::size_t>(c) * plane + i];
      if (v > bv) {  // strict: ties keep the lower class
        bv = v;
        best = c;
      }
    }
    m.px[i] = static_cast<uint8_t>(best);
  }
  return m;
}

}  // namespace fuseseg::models
