#pragma once

#include <map>
#include <string>
#include <vector>

#include "fuseseg/phantom.hpp"
#include "fuseseg/rng.hpp"

namespace fuseseg::data {

struct ManifestCase {
  std::string case_id;
  std::map<std::string, std::string> image_paths;  // modality -> relative path
  std::string mask_path;
};

struct Manifest {
  int version = 1;
  uint64_t seed = 0;
  int size = 0;
  std::string generator;
  std::vector<std::string> modalities;
  std::vector<ManifestCase> cases;
  std::map<std::string, std::vector<std::string>> splits;  // train/val/test
};

// Writes PGM files plus manifest.json under out_dir and returns the
// manifest. Case ids are hashed into a deterministic 80/10/10 split with
// exact bucket sizes. The manifest write is atomic (temp file + rename).
Manifest build_dataset(int n_cases, uint64_t seed, const std::string& out_dir, int size);

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);

struct IngestError {
  std::string case_id;
  std::string message;
};

struct Dataset {
  Manifest manifest;
  std::string root;  // directory holding the referenced files
  std::vector<CaseRecord> cases;
  std::vector<IngestError> errors;

  const CaseRecord* find(const std::string& case_id) const;
  std::vector<const CaseRecord*> split(const std::string& name) const;
};

// Loads every manifest case it can; per-case failures (missing files, size
// mismatches, bad labels) land in `errors` and the case is skipped.
Dataset ingest_slices(const std::string& manifest_path);

// In-memory dataset without file round-trips (tests, quick experiments).
Dataset generate_dataset(int n_cases, uint64_t seed, int size);

// Identical crop window on every modality and the mask, then an optional
// horizontal flip (p=0.5). Draw order: row, column, flip.
CaseRecord sample_patch(const CaseRecord& c, int patch, Rng& rng);

LabelImage otsu_foreground(const GrayImage& img);

}  // namespace fuseseg::data
