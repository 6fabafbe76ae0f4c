#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "fuseseg/image.hpp"

namespace fuseseg::data {

struct CaseRecord {
  std::string case_id;
  std::map<std::string, GrayImage> images;  // modality name -> image in [0,1]
  LabelImage mask;                          // 0 background, 1 tissue, 2 lesion
  enum class Provenance { kGenerated, kIngested } provenance = Provenance::kGenerated;
  LabelImage fg_mask;  // Otsu foreground, filled at ingest; reporting only
};

// Deterministic two-modality phantom: an elliptical head with internal
// tissue structures and one lesion blob. Modality A carries the anatomy
// contrast and hides the lesion; modality B shows the lesion and flattens
// the anatomy. Gaussian noise sigma=0.02 on both; the mask is exact.
CaseRecord gen_phantom_case(uint64_t seed, int size);

}  // namespace fuseseg::data
