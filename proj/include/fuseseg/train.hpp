#pragma once

#include <string>
#include <vector>

#include "fuseseg/config.hpp"
#include "fuseseg/dataset.hpp"
#include "fuseseg/fusion_model.hpp"
#include "fuseseg/metrics.hpp"
#include "fuseseg/seg_model.hpp"

namespace fuseseg::train {

models::FusionModel make_fusion_model(const RunConfig& cfg);
models::SegModel make_seg_model(const RunConfig& cfg);

// Alternating generator/discriminator pre-training on reconstructions.
// Appends one JSONL record per epoch to <run_dir>/pretrain_log.jsonl when
// run_dir is non-empty.
void pretrain_stage(models::FusionModel& fusion, const data::Dataset& ds,
                    const RunConfig& cfg, const std::string& run_dir);

// Relaxed joint objective: one tape backward populates both parameter
// groups, then each optimizer steps its own set. Honors freeze_fusion,
// no_adv_coop and seg_input.
void cooperative_stage(models::FusionModel& fusion, models::SegModel& seg,
                       const data::Dataset& ds, const RunConfig& cfg,
                       const std::string& run_dir);

// Inference-side input selection (fused | m1 | m2); tape-free.
GrayImage seg_input_image(const models::FusionModel& fusion,
                          const data::CaseRecord& rec, const RunConfig& cfg);

GrayImage fuse_case(const models::FusionModel& fusion, const data::CaseRecord& rec);

// Mean reconstruction SSIM of decode(encode(x)) over both modalities.
double mean_recon_ssim(const models::FusionModel& fusion,
                       const std::vector<const data::CaseRecord*>& cases);

std::vector<std::pair<std::string, metrics::FusionMetricsReport>> eval_fusion_cases(
    const models::FusionModel& fusion, const std::vector<const data::CaseRecord*>& cases);

// Pixelwise-average fusion baseline, same report shape.
std::vector<std::pair<std::string, metrics::FusionMetricsReport>> eval_average_fusion_cases(
    const std::vector<const data::CaseRecord*>& cases);

std::vector<std::pair<std::string, metrics::SegMetricsReport>> eval_seg_cases(
    const models::FusionModel& fusion, const models::SegModel& seg,
    const std::vector<const data::CaseRecord*>& cases, const RunConfig& cfg);

double mean_of(const std::vector<std::pair<std::string, metrics::FusionMetricsReport>>& rows,
               double metrics::FusionMetricsReport::* field);
double mean_lesion_dice(const std::vector<std::pair<std::string, metrics::SegMetricsReport>>& rows);

}  // namespace fuseseg::train
