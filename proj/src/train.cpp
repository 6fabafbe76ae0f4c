#include "fuseseg/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "fuseseg/losses.hpp"
#include "fuseseg/optim.hpp"
#include "fuseseg/rng.hpp"

namespace fuseseg::train {

namespace {

using models::FeaturePair;
using models::FusedImage;
using models::FusionModel;
using models::SegModel;
using Clock = std::chrono::steady_clock;

void append_log(const std::string& run_dir, const std::string& file, const nlohmann::json& rec) {
  if (run_dir.empty()) return;
  std::filesystem::create_directories(run_dir);
  std::ofstream f(std::filesystem::path(run_dir) / file, std::ios::app);
  f << rec.dump() << '\n';
}

// epoch-shuffled batches of case indices; incomplete tails are dropped
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at + static_cast<std::size_t>(batch) <= n; at += static_cast<std::size_t>(batch)) {
    batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(at),
                         idx.begin() + static_cast<std::ptrdiff_t>(at + static_cast<std::size_t>(batch)));
  }
  return batches;
}

Tensor detached(const Tensor& t) { return Tensor::from(t.shape(), t.values()); }

struct ModalityPair {
  Tensor x, y;
  const std::string* name_x;
  const std::string* name_y;
};

ModalityPair tensors_of(const data::CaseRecord& rec, const data::Dataset& ds) {
  const std::string& m0 = ds.manifest.modalities.at(0);
  const std::string& m1 = ds.manifest.modalities.at(1);
  return {to_tensor(rec.images.at(m0)), to_tensor(rec.images.at(m1)), &m0, &m1};
}

}  // namespace

FusionModel make_fusion_model(const RunConfig& cfg) {
  return FusionModel(cfg.fusion_config(), Rng::stream(cfg.seed, "init/fusion"));
}

SegModel make_seg_model(const RunConfig& cfg) {
  return SegModel(cfg.seg_config(), Rng::stream(cfg.seed, "init/seg"));
}

void pretrain_stage(models::FusionModel& fusion, const data::Dataset& ds,
                    const RunConfig& cfg, const std::string& run_dir) {
  auto train_cases = ds.split("train");
  if (train_cases.empty()) throw TensorError("pretrain: empty training split");
  auto val_cases = ds.split("val");
  const losses::LossWeights w = cfg.loss_weights();
  const bool adversarial = !cfg.no_adv_pretrain && !cfg.no_decoder;
  const bool content_on = !cfg.no_decoder;

  Adam gen_opt(cfg.lr_fusion);
  Adam disc_opt(cfg.lr_fusion);
  Rng data_rng = Rng::stream(cfg.seed, "data/pretrain");

  for (int epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
    auto t0 = Clock::now();
    double lr = halving_lr_schedule(cfg.lr_fusion, epoch);
    gen_opt.set_lr(lr);
    disc_opt.set_lr(lr);

    double sum_total = 0, sum_adv = 0, sum_corr = 0, sum_content = 0, sum_disc = 0;
    auto batches = make_batches(train_cases.size(), cfg.batch, data_rng);
    for (const auto& batch : batches) {
      std::vector<data::CaseRecord> crops;
      crops.reserve(batch.size());
      for (std::size_t ci : batch) {
        crops.push_back(data::sample_patch(*train_cases[ci], cfg.patch, data_rng));
      }

      // generator step
      fusion.fusion_params().zero_grad();
      Tape tape;
      Tensor loss;
      std::vector<std::vector<double>> recon_values;  // reused by the D step
      {
        TapeScope sc(tape);
        std::vector<Tensor> d1s, d2s;
        Tensor corr, content;
        for (const auto& crop : crops) {
          ModalityPair mp = tensors_of(crop, ds);
          FeaturePair f1 = fusion.encode(mp.x);
          FeaturePair f2 = fusion.encode(mp.y);
          Tensor c = losses::loss_correlation(f1, f2);
          corr = corr.defined() ? add(corr, c) : c;
          if (content_on) {
            Tensor rx = fusion.decode(f1);
            Tensor ry = fusion.decode(f2);
            recon_values.push_back(rx.values());
            recon_values.push_back(ry.values());
            Tensor ct = add(losses::loss_content_pretrain(mp.x, rx),
                            losses::loss_content_pretrain(mp.y, ry));
            content = content.defined() ? add(content, ct) : ct;
            if (adversarial) {
              d1s.push_back(fusion.discriminate(rx, 0));
              d2s.push_back(fusion.discriminate(ry, 1));
            }
          }
        }
        double inv = 1.0 / static_cast<double>(crops.size());
        corr = mul_scalar(corr, inv);
        Tensor adv = adversarial ? losses::loss_adv_generator(d1s, d2s) : Tensor::scalar(0.0);
        content = content_on ? mul_scalar(content, inv) : Tensor::scalar(0.0);
        losses::LossWeights gw = w;
        if (!adversarial) gw.lambda_adv = 0.0;
        loss = losses::loss_enc_total(adv, corr, content, gw);
        sum_adv += adv.scalar_value();
        sum_corr += corr.scalar_value();
        sum_content += content.scalar_value();
      }
      if (!all_finite(loss)) throw TensorError("pretrain: non-finite encoder loss");
      sum_total += loss.scalar_value();
      tape.backward(loss);
      gen_opt.step(fusion.fusion_params());

      // discriminator step on real vs (detached) reconstruction
      if (adversarial) {
        fusion.discriminator_params().zero_grad();
        Tape dtape;
        Tensor dloss;
        {
          TapeScope sc(dtape);
          std::vector<Tensor> real1, real2, fake1, fake2;
          for (std::size_t bi = 0; bi < crops.size(); ++bi) {
            ModalityPair mp = tensors_of(crops[bi], ds);
            Tensor rx = Tensor::from(mp.x.shape(), recon_values[2 * bi]);
            Tensor ry = Tensor::from(mp.y.shape(), recon_values[2 * bi + 1]);
            real1.push_back(fusion.discriminate(mp.x, 0));
            real2.push_back(fusion.discriminate(mp.y, 1));
            fake1.push_back(fusion.discriminate(rx, 0));
            fake2.push_back(fusion.discriminate(ry, 1));
          }
          dloss = add(losses::discriminator_bce(real1, fake1),
                      losses::discriminator_bce(real2, fake2));
        }
        sum_disc += dloss.scalar_value();
        dtape.backward(dloss);
        disc_opt.step(fusion.discriminator_params());
      }
    }

    double val_ssim = val_cases.empty() ? 0.0 : mean_recon_ssim(fusion, val_cases);
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
    const double nb = batches.empty() ? 1.0 : static_cast<double>(batches.size());
    append_log(run_dir, "pretrain_log.jsonl",
               {{"stage", "pretrain"},
                {"epoch", epoch + 1},
                {"loss_total", sum_total / nb},
                {"loss_adv", sum_adv / nb},
                {"loss_corr", sum_corr / nb},
                {"loss_content", sum_content / nb},
                {"loss_disc", sum_disc / nb},
                {"val_recon_ssim", val_ssim},
                {"lr", lr},
                {"wall_ms", ms}});
  }
}

void cooperative_stage(models::FusionModel& fusion, models::SegModel& seg,
                       const data::Dataset& ds, const RunConfig& cfg,
                       const std::string& run_dir) {
  auto train_cases = ds.split("train");
  if (train_cases.empty()) throw TensorError("cooperative: empty training split");
  const losses::LossWeights w = cfg.loss_weights();
  const bool fused_input = cfg.seg_input == "fused";
  const bool may_train_fusion = fused_input && !cfg.freeze_fusion;
  // Follower warm-up: the first quarter of the stage trains omega_s against
  // the frozen pre-trained fusion so its feedback into omega_f is informed
  // rather than noise. The leader joins once the follower tracks its best
  // response.
  const int warmup_epochs = may_train_fusion ? cfg.epochs_fusion / 4 : 0;

  Adam fuse_opt(cfg.lr_fusion);
  Adam disc_opt(cfg.lr_fusion);
  MomentumSgd seg_opt(cfg.lr_seg, 0.9, 1e-4);
  Rng data_rng = Rng::stream(cfg.seed, "data/coop");

  for (int epoch = 0; epoch < cfg.epochs_fusion; ++epoch) {
    auto t0 = Clock::now();
    const bool train_fusion = may_train_fusion && epoch >= warmup_epochs;
    const bool adversarial = train_fusion && !cfg.no_adv_coop;
    double lr = halving_lr_schedule(cfg.lr_fusion, epoch);
    fuse_opt.set_lr(lr);
    disc_opt.set_lr(lr);

    double sum_seg = 0, sum_fuse = 0, sum_total = 0, sum_disc = 0;
    auto batches = make_batches(train_cases.size(), cfg.batch, data_rng);
    for (const auto& batch : batches) {
      std::vector<data::CaseRecord> crops;
      crops.reserve(batch.size());
      for (std::size_t ci : batch) {
        crops.push_back(data::sample_patch(*train_cases[ci], cfg.patch, data_rng));
      }

      fusion.fusion_params().zero_grad();
      seg.params().zero_grad();
      Tape tape;
      Tensor total;
      std::vector<std::vector<double>> fused_values;
      {
        TapeScope sc(tape);
        Tensor ls_acc, lf_acc;
        for (const auto& crop : crops) {
          ModalityPair mp = tensors_of(crop, ds);
          Tensor seg_in;
          if (fused_input) {
            if (train_fusion) {
              FeaturePair f1, f2;
              FusedImage fi = fusion.fuse(mp.x, mp.y, &f1, &f2);
              seg_in = fi.image;
              fused_values.push_back(fi.image.values());
              Tensor adv = Tensor::scalar(0.0);
              if (adversarial) {
                adv = losses::loss_adv_generator({fusion.discriminate(fi.image, 0)},
                                                 {fusion.discriminate(fi.image, 1)});
              }
              losses::LossWeights fw = w;
              if (!adversarial) fw.lambda_adv = 0.0;
              Tensor lf = losses::loss_fusion_total(
                  adv, losses::loss_correlation(f1, f2),
                  losses::loss_text(fi.image, mp.x, mp.y), fw);
              lf_acc = lf_acc.defined() ? add(lf_acc, lf) : lf;
            } else {
              // frozen fusion: produce the input outside the tape
              Tensor frozen;
              {
                Tape scratch;
                TapeScope inner(scratch);
                frozen = fusion.fuse(mp.x, mp.y).image;
              }
              seg_in = detached(frozen);
            }
          } else {
            seg_in = cfg.seg_input == "m1" ? mp.x : mp.y;
          }
          models::SegOutput out = seg.segment(seg_in);
          Tensor ls = losses::loss_seg(out, crop.mask, w);
          ls_acc = ls_acc.defined() ? add(ls_acc, ls) : ls;
        }
        double inv = 1.0 / static_cast<double>(crops.size());
        Tensor ls_mean = mul_scalar(ls_acc, inv);
        sum_seg += ls_mean.scalar_value();
        if (lf_acc.defined()) {
          Tensor lf_mean = mul_scalar(lf_acc, inv);
          sum_fuse += lf_mean.scalar_value();
          total = losses::loss_joint(ls_mean, lf_mean, w);
        } else {
          total = ls_mean;
        }
      }
      if (!all_finite(total)) {
        throw TensorError("cooperative: non-finite joint loss (seg=" + std::to_string(sum_seg) +
                          ", fuse=" + std::to_string(sum_fuse) + ")");
      }
      sum_total += total.scalar_value();
      tape.backward(total);
      seg_opt.step(seg.params());
      if (train_fusion) fuse_opt.step(fusion.fusion_params());

      // discriminators: sources real, fused image fake
      if (adversarial) {
        fusion.discriminator_params().zero_grad();
        Tape dtape;
        Tensor dloss;
        {
          TapeScope sc(dtape);
          std::vector<Tensor> real1, real2, fake1, fake2;
          for (std::size_t bi = 0; bi < crops.size(); ++bi) {
            ModalityPair mp = tensors_of(crops[bi], ds);
            Tensor fused_const = Tensor::from(mp.x.shape(), fused_values[bi]);
            real1.push_back(fusion.discriminate(mp.x, 0));
            real2.push_back(fusion.discriminate(mp.y, 1));
            fake1.push_back(fusion.discriminate(fused_const, 0));
            fake2.push_back(fusion.discriminate(fused_const, 1));
          }
          dloss = add(losses::discriminator_bce(real1, fake1),
                      losses::discriminator_bce(real2, fake2));
        }
        sum_disc += dloss.scalar_value();
        dtape.backward(dloss);
        disc_opt.step(fusion.discriminator_params());
      }
    }

    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
    const double nb = batches.empty() ? 1.0 : static_cast<double>(batches.size());
    append_log(run_dir, "train_log.jsonl",
               {{"stage", "cooperative"},
                {"epoch", epoch + 1},
                {"fusion_updates", train_fusion},
                {"loss_total", sum_total / nb},
                {"loss_seg", sum_seg / nb},
                {"loss_fusion", sum_fuse / nb},
                {"loss_disc", sum_disc / nb},
                {"lr_fusion", lr},
                {"lr_seg", cfg.lr_seg},
                {"wall_ms", ms}});
  }
}

GrayImage fuse_case(const models::FusionModel& fusion, const data::CaseRecord& rec) {
  auto it = rec.images.begin();
  const GrayImage& a = it->second;
  const GrayImage& b = std::next(it)->second;
  return to_image(fusion.fuse(to_tensor(a), to_tensor(b)).image);
}

GrayImage seg_input_image(const models::FusionModel& fusion,
                          const data::CaseRecord& rec, const RunConfig& cfg) {
  auto it = rec.images.begin();
  if (cfg.seg_input == "m1") return it->second;
  if (cfg.seg_input == "m2") return std::next(it)->second;
  return fuse_case(fusion, rec);
}

double mean_recon_ssim(const models::FusionModel& fusion,
                       const std::vector<const data::CaseRecord*>& cases) {
  double acc = 0.0;
  long n = 0;
  for (const auto* rec : cases) {
    for (const auto& [mod, img] : rec->images) {
      Tensor x = to_tensor(img);
      Tensor r = fusion.decode(fusion.encode(x));
      acc += metrics::ssim(img, to_image(r));
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

std::vector<std::pair<std::string, metrics::FusionMetricsReport>> eval_fusion_cases(
    const models::FusionModel& fusion, const std::vector<const data::CaseRecord*>& cases) {
  std::vector<std::pair<std::string, metrics::FusionMetricsReport>> rows;
  for (const auto* rec : cases) {
    auto it = rec->images.begin();
    const GrayImage& a = it->second;
    const GrayImage& b = std::next(it)->second;
    GrayImage fused = fuse_case(fusion, *rec);
    rows.emplace_back(rec->case_id, metrics::fusion_metrics(fused, a, b));
  }
  return rows;
}

std::vector<std::pair<std::string, metrics::FusionMetricsReport>> eval_average_fusion_cases(
    const std::vector<const data::CaseRecord*>& cases) {
  std::vector<std::pair<std::string, metrics::FusionMetricsReport>> rows;
  for (const auto* rec : cases) {
    auto it = rec->images.begin();
    const GrayImage& a = it->second;
    const GrayImage& b = std::next(it)->second;
    GrayImage avg = a;
    for (std::size_t i = 0; i < avg.px.size(); ++i) avg.px[i] = 0.5 * (a.px[i] + b.px[i]);
    rows.emplace_back(rec->case_id, metrics::fusion_metrics(avg, a, b));
  }
  return rows;
}

std::vector<std::pair<std::string, metrics::SegMetricsReport>> eval_seg_cases(
    const models::FusionModel& fusion, const models::SegModel& seg,
    const std::vector<const data::CaseRecord*>& cases, const RunConfig& cfg) {
  std::vector<std::pair<std::string, metrics::SegMetricsReport>> rows;
  for (const auto* rec : cases) {
    GrayImage input = seg_input_image(fusion, *rec, cfg);
    LabelImage pred = models::predict_mask(seg.segment(to_tensor(input)));
    rows.emplace_back(rec->case_id, metrics::seg_metrics(pred, rec->mask));
  }
  return rows;
}

double mean_of(const std::vector<std::pair<std::string, metrics::FusionMetricsReport>>& rows,
               double metrics::FusionMetricsReport::* field) {
  double acc = 0.0;
  for (const auto& [id, r] : rows) acc += r.*field;
  return rows.empty() ? 0.0 : acc / static_cast<double>(rows.size());
}

double mean_lesion_dice(const std::vector<std::pair<std::string, metrics::SegMetricsReport>>& rows) {
  double acc = 0.0;
  for (const auto& [id, r] : rows) acc += r.dice_lesion;
  return rows.empty() ? 0.0 : acc / static_cast<double>(rows.size());
}

}  // namespace fuseseg::train
