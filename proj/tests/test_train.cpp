#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fuseseg/losses.hpp"
#include "fuseseg/optim.hpp"
#include "fuseseg/train.hpp"
#include "support/testutil.hpp"

using namespace fuseseg;
using namespace fuseseg::models;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seed = 11;
  cfg.epochs_pretrain = 2;
  cfg.epochs_fusion = 2;
  cfg.batch = 4;
  cfg.patch = 32;
  return cfg;
}

}  // namespace

TEST_CASE("sgd: zero gradient leaves parameters unchanged; weight decay shrinks") {
  ParamSet ps;
  Tensor p = ps.add(Tensor::from({2}, {1.0, -2.0}, true, "p"));
  MomentumSgd plain(0.1, 0.9, 0.0);
  plain.step(ps);  // no grad buffer at all
  CHECK(p.values()[0] == 1.0);
  CHECK(p.values()[1] == -2.0);

  MomentumSgd decayed(0.1, 0.0, 1e-4);
  decayed.step(ps);
  CHECK(p.values()[0] == doctest::Approx(1.0 * (1.0 - 0.1 * 1e-4)).epsilon(1e-12));
  CHECK(p.values()[1] == doctest::Approx(-2.0 * (1.0 - 0.1 * 1e-4)).epsilon(1e-12));
}

TEST_CASE("adam drives |p| down monotonically on f(p)=p^2") {
  ParamSet ps;
  Tensor p = ps.add(Tensor::from({1}, {1.0}, true, "p"));
  Adam opt(0.01);
  double prev = 1.0;
  for (int step = 0; step < 100; ++step) {
    ps.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope sc(tape);
      loss = mul(p, p);
    }
    tape.backward(loss);
    opt.step(ps);
    double cur = std::abs(p.values()[0]);
    CHECK(cur < prev);
    prev = cur;
  }
  CHECK(prev < 0.5);
}

TEST_CASE("fusion learning-rate schedule halves every 20 epochs exactly") {
  for (int e = 0; e < 100; ++e) {
    double want = 1e-4 * std::pow(0.5, e / 20);
    CHECK(halving_lr_schedule(1e-4, e) == want);
  }
}

TEST_CASE("joint tape gradient equals the explicit two-chain assembly") {
  RunConfig cfg = tiny_config();
  data::Dataset ds = data::generate_dataset(12, 5, 32);
  FusionModel fusion = train::make_fusion_model(cfg);
  SegModel seg = train::make_seg_model(cfg);
  const losses::LossWeights w = cfg.loss_weights();

  Rng rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    const data::CaseRecord& rec = ds.cases[static_cast<std::size_t>(rng.uniform_int(0, 11))];
    Tensor x = to_tensor(rec.images.at("A"));
    Tensor y = to_tensor(rec.images.at("B"));

    auto forward_loss = [&](int which) {
      // which: 0 joint, 1 seg chain only, 2 fusion chain only
      FeaturePair f1, f2;
      FusedImage fi = fusion.fuse(x, y, &f1, &f2);
      Tensor adv = losses::loss_adv_generator({fusion.discriminate(fi.image, 0)},
                                              {fusion.discriminate(fi.image, 1)});
      Tensor lf = losses::loss_fusion_total(adv, losses::loss_correlation(f1, f2),
                                            losses::loss_text(fi.image, x, y), w);
      Tensor ls = losses::loss_seg(seg.segment(fi.image), rec.mask, w);
      if (which == 1) return ls;
      if (which == 2) return lf;
      return losses::loss_joint(ls, lf, w);
    };

    auto grad_wf = [&](int which) {
      fusion.fusion_params().zero_grad();
      seg.params().zero_grad();
      fusion.discriminator_params().zero_grad();
      Tape tape;
      Tensor loss;
      {
        TapeScope sc(tape);
        loss = forward_loss(which);
      }
      tape.backward(loss);
      return fusion.fusion_params().flat_grads();
    };

    std::vector<double> joint = grad_wf(0);
    std::vector<double> chain_seg = grad_wf(1);
    std::vector<double> chain_fuse = grad_wf(2);
    std::vector<double> assembled(joint.size());
    for (std::size_t i = 0; i < joint.size(); ++i) {
      assembled[i] = chain_seg[i] + w.lambda_fuse * chain_fuse[i];
    }
    INFO("trial ", trial);
    CHECK(testutil::rel_err(joint, assembled) < 1e-6);
  }
}

TEST_CASE("lambda_fuse = 0 reduces the fusion-parameter gradient to the seg chain") {
  RunConfig cfg = tiny_config();
  data::Dataset ds = data::generate_dataset(4, 6, 32);
  FusionModel fusion = train::make_fusion_model(cfg);
  SegModel seg = train::make_seg_model(cfg);
  losses::LossWeights w = cfg.loss_weights();

  const data::CaseRecord& rec = ds.cases[0];
  Tensor x = to_tensor(rec.images.at("A"));
  Tensor y = to_tensor(rec.images.at("B"));

  auto run = [&](bool with_fusion_loss) {
    fusion.fusion_params().zero_grad();
    seg.params().zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope sc(tape);
      FeaturePair f1, f2;
      FusedImage fi = fusion.fuse(x, y, &f1, &f2);
      Tensor ls = losses::loss_seg(seg.segment(fi.image), rec.mask, w);
      if (with_fusion_loss) {
        Tensor lf = losses::loss_fusion_total(Tensor::scalar(0.0),
                                              losses::loss_correlation(f1, f2),
                                              losses::loss_text(fi.image, x, y), w);
        losses::LossWeights wz = w;
        wz.lambda_fuse = 0.0;
        loss = losses::loss_joint(ls, lf, wz);
      } else {
        loss = ls;
      }
    }
    tape.backward(loss);
    return fusion.fusion_params().flat_grads();
  };
  CHECK(testutil::rel_err(run(true), run(false)) < 1e-12);
}

TEST_CASE("pretrain is deterministic and improves validation reconstruction") {
  RunConfig cfg = tiny_config();
  cfg.epochs_pretrain = 2;
  data::Dataset ds = data::generate_dataset(15, 7, 32);

  FusionModel f1 = train::make_fusion_model(cfg);
  double before = train::mean_recon_ssim(f1, ds.split("val"));
  train::pretrain_stage(f1, ds, cfg, "");
  double after = train::mean_recon_ssim(f1, ds.split("val"));
  CHECK(after > before);

  FusionModel f2 = train::make_fusion_model(cfg);
  train::pretrain_stage(f2, ds, cfg, "");
  CHECK(f1.fusion_params().flat_values() == f2.fusion_params().flat_values());
  CHECK(f1.discriminator_params().flat_values() == f2.discriminator_params().flat_values());
}

TEST_CASE("freeze_fusion leaves fusion parameters bit-identical") {
  RunConfig cfg = tiny_config();
  cfg.freeze_fusion = true;
  cfg.epochs_fusion = 1;
  data::Dataset ds = data::generate_dataset(10, 8, 32);
  FusionModel fusion = train::make_fusion_model(cfg);
  SegModel seg = train::make_seg_model(cfg);
  std::vector<double> before = fusion.fusion_params().flat_values();
  std::vector<double> seg_before = seg.params().flat_values();
  train::cooperative_stage(fusion, seg, ds, cfg, "");
  CHECK(fusion.fusion_params().flat_values() == before);
  CHECK(seg.params().flat_values() != seg_before);
}

TEST_CASE("modality-only input trains the segmenter without touching fusion") {
  RunConfig cfg = tiny_config();
  cfg.seg_input = "m1";
  cfg.epochs_fusion = 1;
  data::Dataset ds = data::generate_dataset(10, 9, 32);
  FusionModel fusion = train::make_fusion_model(cfg);
  SegModel seg = train::make_seg_model(cfg);
  std::vector<double> before = fusion.fusion_params().flat_values();
  train::cooperative_stage(fusion, seg, ds, cfg, "");
  CHECK(fusion.fusion_params().flat_values() == before);
}
