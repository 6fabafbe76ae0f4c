#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fuseseg/losses.hpp"
#include "fuseseg/metrics.hpp"
#include "fuseseg/rng.hpp"
#include "support/testutil.hpp"

using namespace fuseseg;
using namespace fuseseg::models;
using fuseseg::losses::LossWeights;

namespace {

Tensor rand_t(Rng& rng, Shape s, double lo = 0.0, double hi = 1.0) {
  return Tensor::from(s, testutil::random_vec(rng, numel(s), lo, hi));
}

}  // namespace

TEST_CASE("cc: self-correlation 1, anti-correlation -1, shuffles decorrelate") {
  Rng rng(301);
  Tensor x = rand_t(rng, {2, 6, 6});
  CHECK(losses::cc(x, x).scalar_value() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(losses::cc(x, neg(x)).scalar_value() == doctest::Approx(-1.0).epsilon(1e-6));

  double acc = 0.0;
  const int n = 64;
  for (int k = 0; k < n; ++k) {
    std::vector<double> v = testutil::random_vec(rng, 64, 0.0, 1.0);
    std::vector<double> shuffled = v;
    for (std::size_t i = shuffled.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
      std::swap(shuffled[i - 1], shuffled[j]);
    }
    acc += losses::cc(Tensor::from({1, 8, 8}, v), Tensor::from({1, 8, 8}, shuffled)).scalar_value();
  }
  CHECK(std::abs(acc / n) < 0.1);

  // zero-variance channel contributes exactly zero
  Tensor flat = Tensor::full({1, 4, 4}, 0.5);
  CHECK(losses::cc(flat, rand_t(rng, {1, 4, 4})).scalar_value() == 0.0);

  CHECK_THROWS_AS(losses::cc(rand_t(rng, {1, 4, 4}), rand_t(rng, {1, 4, 5})), TensorError);
}

TEST_CASE("loss_correlation: pinned arithmetic cases") {
  Rng rng(302);
  // CC_H = 0 (flat high features), CC_L = 1 -> 0
  Tensor low = rand_t(rng, {2, 4, 4});
  FeaturePair f1{low, Tensor::full({2, 8, 8}, 0.3)};
  FeaturePair f2{low, rand_t(rng, {2, 8, 8})};
  CHECK(losses::loss_correlation(f1, f2).scalar_value() == doctest::Approx(0.0).epsilon(1e-9));

  // CC_H = 1, CC_L = 1 -> 1/2.01
  Tensor high = rand_t(rng, {2, 8, 8});
  FeaturePair g1{low, high};
  FeaturePair g2{low, high};
  CHECK(losses::loss_correlation(g1, g2).scalar_value() ==
        doctest::Approx(1.0 / 2.01).epsilon(1e-6));

  // CC_H = 1, CC_L = -1 -> 1/0.01 = 100 (worst case, finite)
  FeaturePair h1{low, high};
  FeaturePair h2{neg(low), high};
  CHECK(losses::loss_correlation(h1, h2).scalar_value() == doctest::Approx(100.0).epsilon(1e-6));
}

TEST_CASE("loss_adv_generator: pinned values and symmetry") {
  Tensor half = Tensor::scalar(0.5);
  double v = losses::loss_adv_generator({half}, {half}).scalar_value();
  CHECK(v == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-9));

  // D -> 1 saturates at the log guard instead of -inf
  Tensor one = Tensor::scalar(1.0);
  double sat = losses::loss_adv_generator({one}, {one}).scalar_value();
  CHECK(std::isfinite(sat));
  CHECK(sat == doctest::Approx(2.0 * std::log(1e-12)).epsilon(1e-9));

  Tensor a = Tensor::scalar(0.3), b = Tensor::scalar(0.8);
  CHECK(losses::loss_adv_generator({a}, {b}).scalar_value() ==
        doctest::Approx(losses::loss_adv_generator({b}, {a}).scalar_value()));
}

TEST_CASE("loss_content_pretrain: zero at identity, pinned extreme, nonnegative") {
  Rng rng(303);
  Tensor x = rand_t(rng, {1, 16, 16});
  CHECK(std::abs(losses::loss_content_pretrain(x, x).scalar_value()) < 1e-9);

  GrayImage zeros_img = GrayImage::filled(16, 16, 0.0);
  GrayImage ones_img = GrayImage::filled(16, 16, 1.0);
  double want = 1.0 + (1.0 - metrics::ssim(zeros_img, ones_img));
  double got = losses::loss_content_pretrain(to_tensor(zeros_img), to_tensor(ones_img)).scalar_value();
  CHECK(got == doctest::Approx(want).epsilon(1e-9));

  for (int k = 0; k < 5; ++k) {
    Tensor a = rand_t(rng, {1, 16, 16});
    Tensor b = rand_t(rng, {1, 16, 16});
    CHECK(losses::loss_content_pretrain(a, b).scalar_value() >= 0.0);
  }
}

TEST_CASE("loss_enc_total: weighting arithmetic") {
  LossWeights w;
  Tensor adv = Tensor::scalar(1.0), corr = Tensor::scalar(2.0), content = Tensor::scalar(3.0);
  w.lambda_adv = 0.1;
  w.sigma = 0.5;
  CHECK(losses::loss_enc_total(adv, corr, content, w).scalar_value() ==
        doctest::Approx(2.6).epsilon(1e-12));
  w.lambda_adv = 0.0;
  w.sigma = 0.0;
  CHECK(losses::loss_enc_total(adv, corr, content, w).scalar_value() ==
        doctest::Approx(3.0).epsilon(1e-12));
  w.sigma = 1.0;
  CHECK(losses::loss_enc_total(adv, corr, content, w).scalar_value() ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("loss_text: zero at identity, flat fused, brute-force oracle") {
  Rng rng(304);
  Tensor x = rand_t(rng, {1, 8, 8});
  CHECK(losses::loss_text(x, x, x).scalar_value() == doctest::Approx(0.0).epsilon(1e-12));

  Tensor flat = Tensor::full({1, 8, 8}, 0.5);
  Tensor y = rand_t(rng, {1, 8, 8});
  Tensor gx = sobel_magnitude(x);
  Tensor gy = sobel_magnitude(y);
  double want = 0.0;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    want += std::max(gx.values()[i], gy.values()[i]);
  }
  want /= static_cast<double>(gx.size());
  CHECK(losses::loss_text(flat, x, y).scalar_value() == doctest::Approx(want).epsilon(1e-12));

  // brute-force pixelwise evaluation of the full expression
  Tensor f = rand_t(rng, {1, 8, 8});
  auto sob = [](const Tensor& t, int i, int j) {
    static const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    static const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    double gxx = 0, gyy = 0;
    for (int u = 0; u < 3; ++u) {
      for (int v = 0; v < 3; ++v) {
        int si = std::clamp(i + u - 1, 0, 7), sj = std::clamp(j + v - 1, 0, 7);
        gxx += kx[u * 3 + v] * t.values()[static_cast<std::size_t>(si) * 8 + sj];
        gyy += ky[u * 3 + v] * t.values()[static_cast<std::size_t>(si) * 8 + sj];
      }
    }
    return 0.5 * (std::abs(gxx) + std::abs(gyy));
  };
  double direct = 0.0;
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      direct += std::abs(sob(f, i, j) - std::max(sob(x, i, j), sob(y, i, j)));
    }
  }
  direct /= 64.0;
  CHECK(losses::loss_text(f, x, y).scalar_value() == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("loss_fusion_total: reductions and differentiability") {
  LossWeights w;
  w.lambda_adv = 0.0;
  w.sigma = 0.0;
  Tensor adv = Tensor::scalar(-1.0), corr = Tensor::scalar(0.4), text = Tensor::scalar(0.7);
  CHECK(losses::loss_fusion_total(adv, corr, text, w).scalar_value() ==
        doctest::Approx(0.7).epsilon(1e-12));
  w.lambda_adv = 0.1;
  w.sigma = 0.5;
  CHECK(std::isfinite(losses::loss_fusion_total(adv, corr, text, w).scalar_value()));
}

TEST_CASE("loss_seg: pinned values and label validation") {
  LossWeights w;
  w.alpha_ce = 1.0;
  w.beta_dice = 0.0;

  // uniform prediction over K=3 -> CE = log 3
  const int h = 4, wd = 4;
  SegOutput uni;
  uni.probs = Tensor::full({3, h, wd}, 1.0 / 3.0);
  uni.logits = uni.probs;
  LabelImage gt = LabelImage::filled(h, wd, 1);
  CHECK(losses::loss_seg(uni, gt, w).scalar_value() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-9));

  // perfect one-hot prediction -> loss ~ 0 for both terms
  std::vector<double> onehot(3 * h * wd, 0.0);
  for (int i = 0; i < h * wd; ++i) onehot[static_cast<std::size_t>(h * wd) + i] = 1.0;
  SegOutput perfect;
  perfect.probs = Tensor::from({3, h, wd}, onehot);
  perfect.logits = perfect.probs;
  w.beta_dice = 1.0;
  CHECK(losses::loss_seg(perfect, gt, w).scalar_value() == doctest::Approx(0.0).epsilon(1e-6));

  // fully disjoint hard prediction -> dice loss ~ 1 per affected class
  std::vector<double> wrong(3 * h * wd, 0.0);
  for (int i = 0; i < h * wd; ++i) wrong[static_cast<std::size_t>(2 * h * wd) + i] = 1.0;
  SegOutput bad;
  bad.probs = Tensor::from({3, h, wd}, wrong);
  bad.logits = bad.probs;
  w.alpha_ce = 0.0;
  w.beta_dice = 1.0;
  // classes 1 and 2 fully disjoint, class 0 empty-empty (smoothed to ~1)
  CHECK(losses::loss_seg(bad, gt, w).scalar_value() == doctest::Approx(2.0 / 3.0).epsilon(1e-3));

  LabelImage out_of_range = LabelImage::filled(h, wd, 7);
  CHECK_THROWS_AS(losses::loss_seg(uni, out_of_range, w), TensorError);
}

TEST_CASE("loss_joint: weighting") {
  LossWeights w;
  w.lambda_fuse = 0.0;
  CHECK(losses::loss_joint(Tensor::scalar(1.0), Tensor::scalar(2.0), w).scalar_value() ==
        doctest::Approx(1.0));
  w.lambda_fuse = 0.5;
  CHECK(losses::loss_joint(Tensor::scalar(1.0), Tensor::scalar(2.0), w).scalar_value() ==
        doctest::Approx(2.0));
}

TEST_CASE("losses are finite-difference differentiable w.r.t. tensor inputs") {
  Rng rng(305);
  LossWeights w;

  auto grad_check = [&](const std::function<Tensor(const Tensor&)>& f, Tensor x0) {
    Tensor x = Tensor::from(x0.shape(), x0.values(), true);
    Tape tape;
    Tensor loss;
    {
      TapeScope sc(tape);
      loss = f(x);
    }
    tape.backward(loss);
    std::vector<double> an = x.grad();
    auto eval = [&](const std::vector<double>& p) {
      return f(Tensor::from(x0.shape(), p)).scalar_value();
    };
    std::vector<double> fd = testutil::fd_gradient(eval, x0.values(), 1e-6);
    return testutil::rel_err(an, fd);
  };

  Tensor img = rand_t(rng, {1, 16, 16}, 0.2, 0.8);
  Tensor other = rand_t(rng, {1, 16, 16}, 0.2, 0.8);

  CHECK(grad_check([&](const Tensor& t) { return losses::loss_content_pretrain(other, t); }, img) < 1e-4);
  CHECK(grad_check([&](const Tensor& t) { return losses::loss_text(t, other, img); }, img) < 1e-4);
  CHECK(grad_check([&](const Tensor& t) { return losses::cc(t, other); }, img) < 1e-4);

  LabelImage gt = LabelImage::filled(16, 16, 0);
  for (int i = 4; i < 10; ++i) {
    for (int j = 4; j < 10; ++j) gt.at(i, j) = 1;
  }
  CHECK(grad_check(
            [&](const Tensor& t) {
              SegOutput o;
              o.logits = t;
              o.probs = softmax(t, 0);
              return losses::loss_seg(o, gt, w);
            },
            rand_t(rng, {3, 16, 16}, -1.0, 1.0)) < 1e-4);
}
