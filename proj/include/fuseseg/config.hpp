#pragma once

#include <cstdint>
#include <string>

#include "fuseseg/fusion_model.hpp"
#include "fuseseg/losses.hpp"
#include "fuseseg/seg_model.hpp"

namespace fuseseg {

// Line-oriented key=value configuration. Every key has a default; unknown
// keys are rejected. '#' starts a comment.
struct RunConfig {
  uint64_t seed = 42;
  int patch = 32;
  int batch = 4;
  int epochs_pretrain = 10;
  int epochs_fusion = 20;
  double lr_fusion = 1e-4;
  double lr_seg = 0.01;
  double lambda_adv = 0.1;
  double sigma = 0.5;
  double lambda_fuse = 0.5;
  double alpha_ce = 0.5;
  double beta_dice = 0.5;
  int channels_low = 16;
  int channels_high = 16;
  bool no_decoder = false;
  bool no_adv_pretrain = false;
  bool no_adv_coop = false;
  bool no_cross_attention = false;
  bool freeze_fusion = false;
  std::string seg_input = "fused";  // fused | m1 | m2

  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);

  // Full key=value dump in fixed key order (the config echo).
  std::string serialize() const;
  void validate() const;

  losses::LossWeights loss_weights() const;
  models::FusionConfig fusion_config() const;
  models::SegConfig seg_config() const;
};

}  // namespace fuseseg
