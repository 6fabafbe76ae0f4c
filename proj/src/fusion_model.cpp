#include "fuseseg/fusion_model.hpp"

#include <cmath>

namespace fuseseg::models {

namespace {

std::vector<double> normal_vec(Rng& rng, std::size_t n, double std) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * std;
  return v;
}

Tensor tokens_of(const Tensor& fmap) {
  // [C,h,w] -> [h*w, C]
  const int c = fmap.dim(0), t = fmap.dim(1) * fmap.dim(2);
  return transpose(reshape(fmap, {c, t}));
}

Tensor map_of(const Tensor& tokens, int c, int h, int w) {
  return reshape(transpose(tokens), {c, h, w});
}

}  // namespace

CrossAttnResult cross_attention(const Tensor& q_tokens, const Tensor& kv_tokens,
                                const Tensor& wq, const Tensor& wk,
                                const Tensor& wv) {
  if (q_tokens.ndim() != 2 || kv_tokens.ndim() != 2 ||
      q_tokens.dim(1) != kv_tokens.dim(1)) {
    throw TensorError("cross_attention: token dim mismatch " +
                      shape_str(q_tokens.shape()) + " vs " +
                      shape_str(kv_tokens.shape()));
  }
  if (wq.dim(0) != q_tokens.dim(1) || wk.dim(0) != kv_tokens.dim(1) ||
      wv.dim(0) != kv_tokens.dim(1)) {
    throw TensorError("cross_attention: projection dims do not match tokens");
  }
  const int dk = wq.dim(1);
  Tensor q = matmul(q_tokens, wq);
  Tensor k = matmul(kv_tokens, wk);
  Tensor logits = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor a = softmax(logits, 1);
  Tensor v = matmul(kv_tokens, wv);
  return {matmul(a, v), a};
}

FusionModel::FusionModel(const FusionConfig& cfg, Rng init) : cfg_(cfg) {
  if (cfg.channels_high % 2 != 0) {
    throw TensorError("fusion: channels_high must be even for coupling blocks");
  }
  auto conv_p = [&](const std::string& name, int co, int ci, int k, double scale) {
    double std = scale * std::sqrt(2.0 / static_cast<double>(ci * k * k));
    Shape s{co, ci, k, k};
    return wf_.add(Tensor::from(s, normal_vec(init, numel(s), std), true, name));
  };
  auto bias_p = [&](const std::string& name, int n) {
    return wf_.add(Tensor::zeros({n}, true, name));
  };
  auto mat_p = [&](const std::string& name, int din, int dout) {
    double std = std::sqrt(2.0 / static_cast<double>(din + dout));
    return wf_.add(Tensor::from({din, dout}, normal_vec(init, static_cast<std::size_t>(din) * dout, std), true, name));
  };

  const int cl = cfg.channels_low, ch = cfg.channels_high;
  stem1_w_ = conv_p("enc.stem1.w", cl, 1, 3, 1.0);
  stem1_b_ = bias_p("enc.stem1.b", cl);
  stem2_w_ = conv_p("enc.stem2.w", cl, cl, 3, 1.0);
  stem2_b_ = bias_p("enc.stem2.b", cl);
  for (int k = 0; k < cfg.attn_blocks; ++k) {
    AttnBlock b;
    std::string p = "enc.attn" + std::to_string(k) + ".";
    b.dw_w = wf_.add(Tensor::from({cl, 1, 3, 3}, normal_vec(init, static_cast<std::size_t>(cl) * 9, std::sqrt(2.0 / 9.0)), true, p + "dw.w"));
    b.dw_b = bias_p(p + "dw.b", cl);
    b.ln_g = wf_.add(Tensor::from({cl}, std::vector<double>(static_cast<std::size_t>(cl), 1.0), true, p + "ln.g"));
    b.ln_b = bias_p(p + "ln.b", cl);
    b.wq = mat_p(p + "wq", cl, cfg.d_k);
    b.wk = mat_p(p + "wk", cl, cfg.d_k);
    b.wv = mat_p(p + "wv", cl, cl);
    attn_.push_back(b);
  }
  lift_w_ = conv_p("enc.lift.w", ch, 1, 3, 1.0);
  lift_b_ = bias_p("enc.lift.b", ch);
  const int half = ch / 2;
  for (int k = 0; k < cfg.inn_blocks; ++k) {
    InnBlock b;
    std::string p = "enc.inn" + std::to_string(k) + ".";
    b.s.w1 = conv_p(p + "s.w1", half, half, 3, 1.0);
    b.s.b1 = bias_p(p + "s.b1", half);
    b.s.w2 = conv_p(p + "s.w2", half, half, 3, 0.05);  // near-identity coupling at init
    b.s.b2 = bias_p(p + "s.b2", half);
    b.t.w1 = conv_p(p + "t.w1", half, half, 3, 1.0);
    b.t.b1 = bias_p(p + "t.b1", half);
    b.t.w2 = conv_p(p + "t.w2", half, half, 3, 0.05);
    b.t.b2 = bias_p(p + "t.b2", half);
    inn_.push_back(b);
  }

  up1_w_ = conv_p("dec.up1.w", cl, cl, 3, 1.0);
  up1_b_ = bias_p("dec.up1.b", cl);
  up2_w_ = conv_p("dec.up2.w", cl, cl, 3, 1.0);
  up2_b_ = bias_p("dec.up2.b", cl);
  merge1_w_ = conv_p("dec.merge1.w", 16, cl + ch, 3, 1.0);
  merge1_b_ = bias_p("dec.merge1.b", 16);
  merge2_w_ = conv_p("dec.merge2.w", 1, 16, 3, 1.0);
  merge2_b_ = bias_p("dec.merge2.b", 1);

  low_attn_.wq = mat_p("xattn.low.wq", cl, cfg.d_k);
  low_attn_.wk = mat_p("xattn.low.wk", cl, cfg.d_k);
  low_attn_.wv = mat_p("xattn.low.wv", cl, cl);
  const int dh = ch * 16;  // 4x4 patches
  high_attn_.wq = mat_p("xattn.high.wq", dh, cfg.d_k);
  high_attn_.wk = mat_p("xattn.high.wk", dh, cfg.d_k);
  high_attn_.wv = mat_p("xattn.high.wv", dh, dh);

  auto dconv_p = [&](const std::string& name, int co, int ci) {
    double std = std::sqrt(2.0 / static_cast<double>(ci * 9));
    return wd_.add(Tensor::from({co, ci, 3, 3}, normal_vec(init, static_cast<std::size_t>(co) * ci * 9, std), true, name));
  };
  auto dbias_p = [&](const std::string& name, int n) {
    return wd_.add(Tensor::zeros({n}, true, name));
  };
  for (int d = 0; d < 2; ++d) {
    std::string p = "disc" + std::to_string(d) + ".";
    disc_[d].w1 = dconv_p(p + "c1.w", 8, 1);
    disc_[d].b1 = dbias_p(p + "c1.b", 8);
    disc_[d].w2 = dconv_p(p + "c2.w", 16, 8);
    disc_[d].b2 = dbias_p(p + "c2.b", 16);
    disc_[d].w3 = dconv_p(p + "c3.w", 16, 16);
    disc_[d].b3 = dbias_p(p + "c3.b", 16);
    disc_[d].w4 = dconv_p(p + "c4.w", 1, 16);
    disc_[d].b4 = dbias_p(p + "c4.b", 1);
  }
}

Tensor FusionModel::coupling_net(const CouplingNet& n, const Tensor& x) const {
  return conv2d(relu(conv2d(x, n.w1, n.b1, 1)), n.w2, n.b2, 1);
}

FeaturePair FusionModel::encode(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(0) != 1) {
    throw TensorError("encode: expects [1,H,W], got " + shape_str(image.shape()));
  }
  if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0) {
    throw TensorError("encode: spatial size must be a multiple of 4, got " +
                      shape_str(image.shape()));
  }
  Tensor z = avg_pool2(relu(conv2d(image, stem1_w_, stem1_b_, 1)));
  z = avg_pool2(relu(conv2d(z, stem2_w_, stem2_b_, 1)));
  const int cl = cfg_.channels_low, h4 = z.dim(1), w4 = z.dim(2);
  for (const auto& b : attn_) {
    z = add(z, depthwise_conv2d(z, b.dw_w, b.dw_b, 1));
    Tensor t = tokens_of(z);
    Tensor tn = layer_norm(t, b.ln_g, b.ln_b);
    CrossAttnResult self_attn = cross_attention(tn, tn, b.wq, b.wk, b.wv);
    z = add(z, map_of(self_attn.attended, cl, h4, w4));
  }
  Tensor high = inn_forward(conv2d(image, lift_w_, lift_b_, 1));
  return {z, high};
}

Tensor FusionModel::inn_forward(const Tensor& x) const {
  if (x.dim(0) % 2 != 0) {
    throw TensorError("inn_forward: channel count must be even, got " + shape_str(x.shape()));
  }
  const int c = x.dim(0), half = c / 2;
  Tensor cur = x;
  for (std::size_t k = 0; k < inn_.size(); ++k) {
    Tensor a = slice(cur, 0, 0, half);
    Tensor b = slice(cur, 0, half, c);
    const bool cond_on_first = (k % 2 == 0);
    const Tensor& cond = cond_on_first ? a : b;
    const Tensor& tgt = cond_on_first ? b : a;
    Tensor s = mul_scalar(tanh(coupling_net(inn_[k].s, cond)), 2.0);
    Tensor t = coupling_net(inn_[k].t, cond);
    Tensor y = add(mul(tgt, exp(s)), t);
    cur = cond_on_first ? concat({cond, y}, 0) : concat({y, cond}, 0);
  }
  return cur;
}

Tensor FusionModel::inn_inverse(const Tensor& y) const {
  if (y.dim(0) % 2 != 0) {
    throw TensorError("inn_inverse: channel count must be even, got " + shape_str(y.shape()));
  }
  const int c = y.dim(0), half = c / 2;
  Tensor cur = y;
  for (std::size_t ri = inn_.size(); ri-- > 0;) {
    Tensor a = slice(cur, 0, 0, half);
    Tensor b = slice(cur, 0, half, c);
    const bool cond_on_first = (ri % 2 == 0);
    const Tensor& cond = cond_on_first ? a : b;
    const Tensor& tgt = cond_on_first ? b : a;
    Tensor s = mul_scalar(tanh(coupling_net(inn_[ri].s, cond)), 2.0);
    Tensor t = coupling_net(inn_[ri].t, cond);
    Tensor x = mul(sub(tgt, t), exp(neg(s)));
    cur = cond_on_first ? concat({cond, x}, 0) : concat({x, cond}, 0);
  }
  return cur;
}

Tensor FusionModel::decode(const FeaturePair& f) const {
  if (f.low.ndim() != 3 || f.high.ndim() != 3 ||
      f.high.dim(1) != 4 * f.low.dim(1) || f.high.dim(2) != 4 * f.low.dim(2)) {
    throw TensorError("decode: branch shape mismatch low " + shape_str(f.low.shape()) +
                      " vs high " + shape_str(f.high.shape()));
  }
  Tensor u = relu(conv2d(upsample_nearest2(f.low), up1_w_, up1_b_, 1));
  u = relu(conv2d(upsample_nearest2(u), up2_w_, up2_b_, 1));
  Tensor m = relu(conv2d(concat({u, f.high}, 0), merge1_w_, merge1_b_, 1));
  return sigmoid(conv2d(m, merge2_w_, merge2_b_, 1));
}

Tensor FusionModel::fuse_band(const Tensor& t1, const Tensor& t2,
                              const BandAttention& ba, Tensor* a12,
                              Tensor* a21) const {
  if (!cfg_.cross_attention) {
    return mul_scalar(add(t1, t2), 0.5);
  }
  CrossAttnResult r12 = cross_attention(t1, t2, ba.wq, ba.wk, ba.wv);
  CrossAttnResult r21 = cross_attention(t2, t1, ba.wq, ba.wk, ba.wv);
  if (a12) *a12 = r12.weights;
  if (a21) *a21 = r21.weights;
  return mul_scalar(add(add(t1, t2), add(r12.attended, r21.attended)), 0.25);
}

FusedImage FusionModel::fuse(const Tensor& x, const Tensor& y) const {
  return fuse(x, y, nullptr, nullptr);
}

FusedImage FusionModel::fuse(const Tensor& x, const Tensor& y, FeaturePair* f1_out,
                             FeaturePair* f2_out) const {
  if (x.shape() != y.shape()) {
    throw TensorError("fuse: inputs must be aligned, got " + shape_str(x.shape()) +
                      " vs " + shape_str(y.shape()));
  }
  FeaturePair f1 = encode(x);
  FeaturePair f2 = encode(y);
  if (f1_out) *f1_out = f1;
  if (f2_out) *f2_out = f2;
  const int cl = cfg_.channels_low, ch = cfg_.channels_high;
  const int h4 = f1.low.dim(1), w4 = f1.low.dim(2);

  FusedImage out;
  Tensor low_tok = fuse_band(tokens_of(f1.low), tokens_of(f2.low), low_attn_,
                             &out.attn_m1_to_m2, &out.attn_m2_to_m1);
  Tensor fused_low = map_of(low_tok, cl, h4, w4);

  Tensor p1 = tokens_of(space_to_depth(f1.high, 4));
  Tensor p2 = tokens_of(space_to_depth(f2.high, 4));
  Tensor high_tok = fuse_band(p1, p2, high_attn_, nullptr, nullptr);
  Tensor fused_high = depth_to_space(map_of(high_tok, ch * 16, h4, w4), 4);

  if (cfg_.use_decoder) {
    out.image = decode({fused_low, fused_high});
  } else {
    Tensor up = upsample_nearest2(upsample_nearest2(fused_low));
    Tensor feat = concat({up, fused_high}, 0);
    Tensor z = mean(feat, 0);
    out.image = sigmoid(mul_scalar(reshape(z, {1, feat.dim(1), feat.dim(2)}), 4.0));
  }
  return out;
}

FusedImage FusionModel::fuse_cascade(const std::vector<Tensor>& images) const {
  if (images.size() < 2) throw TensorError("fuse_cascade: needs at least two inputs");
  FusedImage r = fuse(images[0], images[1]);
  for (std::size_t i = 2; i < images.size(); ++i) r = fuse(r.image, images[i]);
  return r;
}

Tensor FusionModel::discriminate(const Tensor& img, int which) const {
  if (img.ndim() != 3 || img.dim(0) != 1) {
    throw TensorError("discriminate: expects [1,H,W], got " + shape_str(img.shape()));
  }
  if (img.dim(1) % 8 != 0 || img.dim(2) % 8 != 0) {
    throw TensorError("discriminate: spatial size must be a multiple of 8, got " +
                      shape_str(img.shape()));
  }
  if (which != 0 && which != 1) throw TensorError("discriminate: which must be 0 or 1");
  const Discriminator& d = disc_[which];
  Tensor z = avg_pool2(relu(conv2d(img, d.w1, d.b1, 1)));
  z = avg_pool2(relu(conv2d(z, d.w2, d.b2, 1)));
  z = avg_pool2(relu(conv2d(z, d.w3, d.b3, 1)));
  z = conv2d(z, d.w4, d.b4, 1);
  return sigmoid(mean(z));
}

}  // namespace fuseseg::models
