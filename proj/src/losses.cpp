#include "fuseseg/losses.hpp"

#include <algorithm>
#include <string>

namespace fuseseg::losses {

Tensor cc(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("cc: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  if (a.ndim() == 2) return pearson(a, b);
  if (a.ndim() != 3) throw TensorError("cc: expects [C,H,W] or [H,W]");
  const int c = a.dim(0);
  Tensor acc;
  for (int ch = 0; ch < c; ++ch) {
    Tensor r = pearson(slice(a, 0, ch, ch + 1), slice(b, 0, ch, ch + 1));
    acc = ch == 0 ? r : add(acc, r);
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(c));
}

Tensor loss_correlation(const models::FeaturePair& f1, const models::FeaturePair& f2) {
  Tensor ch = cc(f1.high, f2.high);
  Tensor cl = cc(f1.low, f2.low);
  return div(mul(ch, ch), add_scalar(cl, LossWeights::kCorrEpsilon));
}

Tensor loss_adv_generator(const std::vector<Tensor>& d_out_1,
                          const std::vector<Tensor>& d_out_2) {
  if (d_out_1.empty() || d_out_1.size() != d_out_2.size()) {
    throw TensorError("loss_adv_generator: batches must be non-empty and equal length");
  }
  Tensor acc;
  for (std::size_t i = 0; i < d_out_1.size(); ++i) {
    Tensor term = add(log(rsub_scalar(1.0, d_out_1[i])), log(rsub_scalar(1.0, d_out_2[i])));
    acc = i == 0 ? term : add(acc, term);
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(d_out_1.size()));
}

Tensor ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  Tensor x = a.ndim() == 2 ? reshape(a, {1, a.dim(0), a.dim(1)}) : a;
  Tensor y = b.ndim() == 2 ? reshape(b, {1, b.dim(0), b.dim(1)}) : b;
  const int hw_min = std::min(x.dim(1), x.dim(2));
  int radius = std::min(5, (hw_min - 1) / 2);
  if (radius < 1) throw TensorError("ssim: image too small");
  const double sigma = 1.5;
  const double c1 = 1e-4, c2 = 9e-4;  // (K1*L)^2, (K2*L)^2 with L=1

  Tensor mu1 = gaussian_blur(x, radius, sigma, 0);
  Tensor mu2 = gaussian_blur(y, radius, sigma, 0);
  Tensor s11 = sub(gaussian_blur(mul(x, x), radius, sigma, 0), mul(mu1, mu1));
  Tensor s22 = sub(gaussian_blur(mul(y, y), radius, sigma, 0), mul(mu2, mu2));
  Tensor s12 = sub(gaussian_blur(mul(x, y), radius, sigma, 0), mul(mu1, mu2));

  Tensor num = mul(add_scalar(mul_scalar(mul(mu1, mu2), 2.0), c1),
                   add_scalar(mul_scalar(s12, 2.0), c2));
  Tensor den = mul(add_scalar(add(mul(mu1, mu1), mul(mu2, mu2)), c1),
                   add_scalar(add(s11, s22), c2));
  return mean(div(num, den));
}

Tensor loss_content_pretrain(const Tensor& x, const Tensor& recon) {
  if (x.shape() != recon.shape()) {
    throw TensorError("loss_content_pretrain: shape mismatch " + shape_str(x.shape()) +
                      " vs " + shape_str(recon.shape()));
  }
  Tensor diff = sub(x, recon);
  Tensor l2 = mean(mul(diff, diff));
  return add(l2, rsub_scalar(1.0, ssim(x, recon)));
}

Tensor loss_enc_total(const Tensor& adv, const Tensor& corr, const Tensor& content,
                      const LossWeights& w) {
  return add(mul_scalar(adv, w.lambda_adv),
             add(mul_scalar(corr, w.sigma), mul_scalar(content, 1.0 - w.sigma)));
}

Tensor loss_text(const Tensor& fused, const Tensor& x, const Tensor& y) {
  if (fused.shape() != x.shape() || fused.shape() != y.shape()) {
    throw TensorError("loss_text: shape mismatch");
  }
  Tensor gf = sobel_magnitude(fused);
  Tensor gmax = max(sobel_magnitude(x), sobel_magnitude(y));
  return mean(abs(sub(gf, gmax)));
}

Tensor loss_fusion_total(const Tensor& adv, const Tensor& corr, const Tensor& text,
                         const LossWeights& w) {
  return add(mul_scalar(adv, w.lambda_adv),
             add(mul_scalar(corr, w.sigma), mul_scalar(text, 1.0 - w.sigma)));
}

Tensor loss_seg(const models::SegOutput& out, const LabelImage& gt,
                const LossWeights& w) {
  const int k = out.probs.dim(0), h = out.probs.dim(1), wd = out.probs.dim(2);
  if (gt.h != h || gt.w != wd) {
    throw TensorError("loss_seg: mask " + std::to_string(gt.h) + "x" +
                      std::to_string(gt.w) + " does not match probs " +
                      shape_str(out.probs.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * wd;
  std::vector<double> onehot(static_cast<std::size_t>(k) * plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i) {
    int label = gt.px[i];
    if (label < 0 || label >= k) {
      throw TensorError("loss_seg: label " + std::to_string(label) + " out of range [0," +
                        std::to_string(k) + ")");
    }
    onehot[static_cast<std::size_t>(label) * plane + i] = 1.0;
  }
  Tensor g = Tensor::from({k, h, wd}, std::move(onehot));

  Tensor ce = mul_scalar(mean(sum(mul(g, log(out.probs)), 0)), -1.0);

  const double smooth = 1e-5;
  Tensor dice_acc;
  for (int c = 0; c < k; ++c) {
    Tensor p = slice(out.probs, 0, c, c + 1);
    Tensor t = slice(g, 0, c, c + 1);
    Tensor num = add_scalar(mul_scalar(sum(mul(p, t)), 2.0), smooth);
    Tensor den = add_scalar(add(sum(p), sum(t)), smooth);
    Tensor d = div(num, den);
    dice_acc = c == 0 ? d : add(dice_acc, d);
  }
  Tensor dice_loss = rsub_scalar(1.0, mul_scalar(dice_acc, 1.0 / static_cast<double>(k)));

  return add(mul_scalar(ce, w.alpha_ce), mul_scalar(dice_loss, w.beta_dice));
}

Tensor loss_joint(const Tensor& ls, const Tensor& lf, const LossWeights& w) {
  return add(ls, mul_scalar(lf, w.lambda_fuse));
}

Tensor discriminator_bce(const std::vector<Tensor>& d_real,
                         const std::vector<Tensor>& d_fake) {
  if (d_real.empty() || d_real.size() != d_fake.size()) {
    throw TensorError("discriminator_bce: batches must be non-empty and equal length");
  }
  Tensor acc;
  for (std::size_t i = 0; i < d_real.size(); ++i) {
    Tensor term = add(log(d_real[i]), log(rsub_scalar(1.0, d_fake[i])));
    acc = i == 0 ? term : add(acc, term);
  }
  return mul_scalar(acc, -1.0 / static_cast<double>(d_real.size()));
}

}  // namespace fuseseg::losses
