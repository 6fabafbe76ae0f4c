#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fuseseg/fusion_model.hpp"
#include "fuseseg/losses.hpp"
#include "fuseseg/seg_model.hpp"
#include "support/testutil.hpp"

using namespace fuseseg;
using namespace fuseseg::models;

namespace {

Tensor random_image(Rng& rng, int h, int w) {
  std::vector<double> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({1, h, w}, std::move(v));
}

FusionModel default_fusion(uint64_t seed = 1) {
  return FusionModel(FusionConfig{}, Rng::stream(seed, "init/fusion"));
}

}  // namespace

TEST_CASE("encode produces the documented shapes and is deterministic") {
  FusionModel m = default_fusion();
  Rng rng(5);
  Tensor x = random_image(rng, 32, 32);
  FeaturePair f = m.encode(x);
  CHECK(f.low.shape() == Shape{16, 8, 8});
  CHECK(f.high.shape() == Shape{16, 32, 32});
  FeaturePair f2 = m.encode(x);
  CHECK(std::memcmp(f.low.values().data(), f2.low.values().data(),
                    f.low.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(f.high.values().data(), f2.high.values().data(),
                    f.high.size() * sizeof(double)) == 0);

  CHECK_THROWS_AS(m.encode(random_image(rng, 30, 32)), TensorError);
}

TEST_CASE("encode of a zero image is finite and its high branch passes through") {
  FusionModel m = default_fusion();
  Tensor zero = Tensor::zeros({1, 32, 32});
  FeaturePair f = m.encode(zero);
  CHECK(all_finite(f.low));
  CHECK(all_finite(f.high));
  // all biases start at zero, so an all-zero input rides through the lift
  // conv and every coupling block unchanged
  for (double v : f.high.values()) CHECK(v == 0.0);
}

TEST_CASE("coupling blocks with zeroed nets are exactly the identity") {
  FusionModel m = default_fusion();
  for (auto& t : m.fusion_params().items()) {
    if (t.name().find("enc.inn") != std::string::npos) {
      for (auto& v : t.mutable_values()) v = 0.0;
    }
  }
  Rng rng(6);
  std::vector<double> v(16 * 8 * 8);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  Tensor h = Tensor::from({16, 8, 8}, v);
  Tensor out = m.inn_forward(h);
  CHECK(testutil::rel_err(out.values(), h.values()) == 0.0);
}

TEST_CASE("inn round-trips below 1e-8 for 1..4 blocks with random weights") {
  Rng data_rng(7);
  for (int blocks = 1; blocks <= 4; ++blocks) {
    FusionConfig cfg;
    cfg.inn_blocks = blocks;
    FusionModel m(cfg, Rng::stream(40 + static_cast<uint64_t>(blocks), "init/fusion"));
    // randomize the zero-initialized final coupling layers too
    for (auto& t : m.fusion_params().items()) {
      if (t.name().find(".s.w2") != std::string::npos ||
          t.name().find(".t.w2") != std::string::npos ||
          t.name().find(".s.b2") != std::string::npos ||
          t.name().find(".t.b2") != std::string::npos) {
        for (auto& v : t.mutable_values()) v = data_rng.uniform(-0.3, 0.3);
      }
    }
    for (int k = 0; k < 8; ++k) {
      std::vector<double> v(16 * 8 * 8);
      for (auto& x : v) x = data_rng.uniform(-1.0, 1.0);
      Tensor x = Tensor::from({16, 8, 8}, v);
      Tensor rt = m.inn_inverse(m.inn_forward(x));
      double err = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        err = std::max(err, std::abs(rt.values()[i] - v[i]));
      }
      CHECK(err < 1e-8);
    }
  }
  // odd channel counts are rejected
  FusionModel m = default_fusion();
  CHECK_THROWS_AS(m.inn_forward(Tensor::zeros({3, 8, 8})), TensorError);
}

TEST_CASE("cross attention: uniform rows for identical keys, row-stochastic, permutation") {
  Rng rng(8);
  const int t = 4, d = 6, dk = 3;
  auto mat = [&](int r, int c) {
    return Tensor::from({r, c}, testutil::random_vec(rng, static_cast<std::size_t>(r) * c));
  };
  Tensor wq = mat(d, dk), wk = mat(d, dk), wv = mat(d, d);

  // identical kv tokens -> uniform attention -> attended = W_v^T token
  std::vector<double> row = testutil::random_vec(rng, d);
  std::vector<double> kv;
  for (int i = 0; i < t; ++i) kv.insert(kv.end(), row.begin(), row.end());
  CrossAttnResult r = cross_attention(mat(t, d), Tensor::from({t, d}, kv), wq, wk, wv);
  for (double a : r.weights.values()) CHECK(a == doctest::Approx(0.25).epsilon(1e-9));
  // every attended row equals the projected common token
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < d; ++j) {
      double want = 0.0;
      for (int u = 0; u < d; ++u) want += row[static_cast<std::size_t>(u)] * wv.values()[static_cast<std::size_t>(u) * d + j];
      CHECK(r.attended.values()[static_cast<std::size_t>(i) * d + j] == doctest::Approx(want).epsilon(1e-9));
    }
  }

  // general tokens: rows sum to 1; permuting kv permutes A columns only
  Tensor q = mat(t, d);
  Tensor kv2 = mat(t, d);
  CrossAttnResult base = cross_attention(q, kv2, wq, wk, wv);
  for (int i = 0; i < t; ++i) {
    double s = 0.0;
    for (int j = 0; j < t; ++j) s += base.weights.values()[static_cast<std::size_t>(i) * t + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  const int perm[4] = {2, 0, 3, 1};
  std::vector<double> kvp(static_cast<std::size_t>(t) * d);
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < d; ++j) kvp[static_cast<std::size_t>(i) * d + j] = kv2.values()[static_cast<std::size_t>(perm[i]) * d + j];
  }
  CrossAttnResult permuted = cross_attention(q, Tensor::from({t, d}, kvp), wq, wk, wv);
  CHECK(testutil::rel_err(permuted.attended.values(), base.attended.values()) < 1e-9);
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < t; ++j) {
      CHECK(permuted.weights.values()[static_cast<std::size_t>(i) * t + j] ==
            doctest::Approx(base.weights.values()[static_cast<std::size_t>(i) * t + perm[j]]).epsilon(1e-9));
    }
  }

  CHECK_THROWS_AS(cross_attention(mat(4, 5), mat(4, 6), wq, wk, wv), TensorError);
}

TEST_CASE("decode stays in [0,1], is deterministic, and validates branch shapes") {
  FusionModel m = default_fusion();
  Rng rng(9);
  Tensor x = random_image(rng, 32, 32);
  FeaturePair f = m.encode(x);
  Tensor img = m.decode(f);
  CHECK(img.shape() == Shape{1, 32, 32});
  for (double v : img.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  Tensor img2 = m.decode(f);
  CHECK(testutil::rel_err(img.values(), img2.values()) == 0.0);

  FeaturePair bad{f.low, Tensor::zeros({16, 16, 16})};
  CHECK_THROWS_AS(m.decode(bad), TensorError);
}

TEST_CASE("fuse: output shape, row-stochastic maps, asymmetry tolerated, errors") {
  FusionModel m = default_fusion();
  Rng rng(10);
  Tensor x = random_image(rng, 32, 32);
  Tensor y = random_image(rng, 32, 32);
  FusedImage fi = m.fuse(x, y);
  CHECK(fi.image.shape() == x.shape());
  for (double v : fi.image.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  REQUIRE(fi.attn_m1_to_m2.defined());
  REQUIRE(fi.attn_m2_to_m1.defined());
  for (const Tensor* a : {&fi.attn_m1_to_m2, &fi.attn_m2_to_m1}) {
    const int t = a->dim(0);
    for (int i = 0; i < t; ++i) {
      double s = 0.0;
      for (int j = 0; j < t; ++j) s += a->values()[static_cast<std::size_t>(i) * t + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  // order swap changes values but keeps shape and range
  FusedImage fr = m.fuse(y, x);
  CHECK(fr.image.shape() == fi.image.shape());

  CHECK_THROWS_AS(m.fuse(x, random_image(rng, 16, 16)), TensorError);
}

TEST_CASE("gradients reach every fusion parameter from a loss on the fused image") {
  FusionModel m = default_fusion();
  Rng rng(11);
  Tensor x = random_image(rng, 32, 32);
  Tensor y = random_image(rng, 32, 32);
  m.fusion_params().zero_grad();
  Tape tape;
  Tensor loss;
  {
    TapeScope sc(tape);
    FusedImage fi = m.fuse(x, y);
    loss = mean(mul(fi.image, fi.image));
  }
  tape.backward(loss);
  for (const auto& t : m.fusion_params().items()) {
    INFO("parameter ", t.name());
    REQUIRE(t.has_grad());
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("discriminator outputs probabilities and stays deterministic") {
  FusionModel m = default_fusion();
  Rng rng(12);
  Tensor x = random_image(rng, 32, 32);
  for (int which = 0; which < 2; ++which) {
    Tensor p = m.discriminate(x, which);
    REQUIRE(p.size() == 1);
    CHECK(p.scalar_value() > 0.0);
    CHECK(p.scalar_value() < 1.0);
    CHECK(p.scalar_value() == doctest::Approx(m.discriminate(x, which).scalar_value()));
  }
  CHECK_THROWS_AS(m.discriminate(Tensor::zeros({1, 30, 30}), 0), TensorError);
}

TEST_CASE("fuse_cascade folds extra modalities") {
  FusionModel m = default_fusion();
  Rng rng(13);
  std::vector<Tensor> imgs{random_image(rng, 32, 32), random_image(rng, 32, 32),
                           random_image(rng, 32, 32)};
  FusedImage fi = m.fuse_cascade(imgs);
  CHECK(fi.image.shape() == Shape{1, 32, 32});
  CHECK_THROWS_AS(m.fuse_cascade({imgs[0]}), TensorError);
}

TEST_CASE("segment: simplex outputs, shape, size validation") {
  SegModel seg(SegConfig{}, Rng::stream(2, "init/seg"));
  Rng rng(14);
  Tensor img = random_image(rng, 32, 32);
  SegOutput out = seg.segment(img);
  CHECK(out.logits.shape() == Shape{3, 32, 32});
  CHECK(out.probs.shape() == Shape{3, 32, 32});
  const std::size_t plane = 32 * 32;
  for (std::size_t i = 0; i < plane; ++i) {
    double s = out.probs.values()[i] + out.probs.values()[plane + i] +
               out.probs.values()[2 * plane + i];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_THROWS_AS(seg.segment(random_image(rng, 20, 20)), TensorError);
}

TEST_CASE("predict_mask: one-hot, tie toward lower class, rescale invariance") {
  SegOutput o;
  o.probs = Tensor::from({3, 1, 2}, {0.0, 1.0 / 3, 1.0, 1.0 / 3, 0.0, 1.0 / 3});
  o.logits = o.probs;
  LabelImage m = predict_mask(o);
  CHECK(m.px[0] == 1);  // one-hot winner
  CHECK(m.px[1] == 0);  // exact three-way tie resolves to class 0

  Rng rng(15);
  SegModel seg(SegConfig{}, Rng::stream(3, "init/seg"));
  Tensor img = random_image(rng, 16, 16);
  SegOutput a = seg.segment(img);
  LabelImage ma = predict_mask(a);
  SegOutput scaled;
  scaled.logits = mul_scalar(a.logits, 3.5);
  scaled.probs = softmax(scaled.logits, 0);
  LabelImage mb = predict_mask(scaled);
  CHECK(ma.px == mb.px);
}

TEST_CASE("cooperative gradients reach fusion parameters through the fused image") {
  FusionModel fusion = default_fusion();
  SegModel seg(SegConfig{}, Rng::stream(4, "init/seg"));
  Rng rng(16);
  Tensor x = random_image(rng, 32, 32);
  Tensor y = random_image(rng, 32, 32);
  LabelImage gt = LabelImage::filled(32, 32, 0);
  for (int i = 10; i < 20; ++i) {
    for (int j = 10; j < 20; ++j) gt.at(i, j) = 1;
  }
  fusion.fusion_params().zero_grad();
  seg.params().zero_grad();
  Tape tape;
  Tensor ls;
  {
    TapeScope sc(tape);
    FusedImage fi = fusion.fuse(x, y);
    SegOutput out = seg.segment(fi.image);
    ls = losses::loss_seg(out, gt, losses::LossWeights{});
  }
  tape.backward(ls);
  double wf_norm = 0.0;
  for (const auto& t : fusion.fusion_params().items()) {
    if (t.has_grad()) {
      for (double g : t.grad()) wf_norm += g * g;
    }
  }
  CHECK(wf_norm > 0.0);
  double ws_norm = 0.0;
  for (const auto& t : seg.params().items()) {
    if (t.has_grad()) {
      for (double g : t.grad()) ws_norm += g * g;
    }
  }
  CHECK(ws_norm > 0.0);
}
