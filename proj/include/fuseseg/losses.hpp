#pragma once

#include <vector>

#include "fuseseg/fusion_model.hpp"
#include "fuseseg/image.hpp"
#include "fuseseg/seg_model.hpp"
#include "fuseseg/tensor.hpp"

namespace fuseseg::losses {

struct LossWeights {
  double lambda_adv = 0.1;
  double sigma = 0.5;        // correlation vs content trade-off, in [0,1]
  double lambda_fuse = 0.5;  // joint-objective weight on the fusion loss
  double alpha_ce = 0.5;
  double beta_dice = 0.5;
  static constexpr double kCorrEpsilon = 1.01;  // fixed
};

// Mean over channels of per-channel Pearson correlation of the flattened
// maps; a zero-variance channel contributes exactly 0.
Tensor cc(const Tensor& a, const Tensor& b);

// CC(high1,high2)^2 / (CC(low1,low2) + 1.01)
Tensor loss_correlation(const models::FeaturePair& f1, const models::FeaturePair& f2);

// mean over the batch of log(1 - D1) + log(1 - D2); generator objective.
Tensor loss_adv_generator(const std::vector<Tensor>& d_out_1,
                          const std::vector<Tensor>& d_out_2);

// |x - recon|_2^2 / N + (1 - SSIM(x, recon))
Tensor loss_content_pretrain(const Tensor& x, const Tensor& recon);

Tensor loss_enc_total(const Tensor& adv, const Tensor& corr, const Tensor& content,
                      const LossWeights& w);

// (1/HW) * | |grad(fused)| - max(|grad x|, |grad y|) |_1, Sobel gradients.
Tensor loss_text(const Tensor& fused, const Tensor& x, const Tensor& y);

Tensor loss_fusion_total(const Tensor& adv, const Tensor& corr, const Tensor& text,
                         const LossWeights& w);

// alpha*CE + beta*(1 - mean soft Dice), smoothing 1e-5.
Tensor loss_seg(const models::SegOutput& out, const LabelImage& gt,
                const LossWeights& w);

Tensor loss_joint(const Tensor& ls, const Tensor& lf, const LossWeights& w);

// Differentiable single-scale SSIM matching the evaluation metric: 11x11
// Gaussian window (sigma 1.5, shrunk on tiny images), K1=0.01, K2=0.03,
// range 1, mean over valid windows.
Tensor ssim(const Tensor& a, const Tensor& b);

// Discriminator objective: -(mean log D(real) + mean log(1 - D(fake))).
Tensor discriminator_bce(const std::vector<Tensor>& d_real,
                         const std::vector<Tensor>& d_fake);

}  // namespace fuseseg::losses
