#pragma once

#include <string>
#include <vector>

#include "fuseseg/image.hpp"

namespace fuseseg::metrics {

struct FusionMetricsReport {
  double en = 0, sd = 0, sf = 0, mi = 0, scd = 0, vif = 0, qabf = 0, ssim = 0;
};

// Unsupervised fusion metrics. Histogram metrics quantize [0,1] images to
// 256 bins; SD/SF/VIF work on the 0-255 intensity scale.
double en(const GrayImage& img);
double sd(const GrayImage& img);
double sf(const GrayImage& img);
double mi(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2);
double scd(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2);
double vif(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2);
double qabf(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2);
double ssim(const GrayImage& a, const GrayImage& b);

// EN/SD/SF on the fused image alone; the rest against both sources (SSIM as
// the mean of the two pairings).
FusionMetricsReport fusion_metrics(const GrayImage& fused, const GrayImage& src1,
                                   const GrayImage& src2);

// Hard-label overlap metrics. Empty-empty classes count as perfect.
double dice(const LabelImage& pred, const LabelImage& gt, int cls);
double iou(const LabelImage& pred, const LabelImage& gt, int cls);
double miou(const LabelImage& pred, const LabelImage& gt, int num_classes);
// 95th percentile (linear interpolation) of symmetric boundary distances;
// returns +inf when either boundary set is empty.
double hd95(const LabelImage& pred, const LabelImage& gt, int cls);

struct SegMetricsReport {
  double dice_tissue = 0, dice_lesion = 0, miou = 0;
  double hd95_tissue = 0, hd95_lesion = 0;
};

SegMetricsReport seg_metrics(const LabelImage& pred, const LabelImage& gt);

// CSV rows in the fixed column order plus a JSON summary of per-column means.
void write_fusion_report(const std::string& csv_path,
                         const std::vector<std::pair<std::string, FusionMetricsReport>>& rows);
void write_seg_report(const std::string& csv_path,
                      const std::vector<std::pair<std::string, SegMetricsReport>>& rows);

}  // namespace fuseseg::metrics
