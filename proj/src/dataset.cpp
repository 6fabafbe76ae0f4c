#include "fuseseg/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "fuseseg/pgm.hpp"

namespace fuseseg::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string case_name(int idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%04d", idx);
  return buf;
}

void assign_splits(Manifest& m) {
  // order by (hash, id) then cut exact 80/10/10 buckets
  std::vector<std::pair<uint64_t, std::string>> order;
  order.reserve(m.cases.size());
  for (const auto& c : m.cases) order.emplace_back(Rng::hash_name(c.case_id), c.case_id);
  std::sort(order.begin(), order.end());
  const std::size_t n = order.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  m.splits.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const char* bucket = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    m.splits[bucket].push_back(order[i].second);
  }
  for (auto& [name, ids] : m.splits) std::sort(ids.begin(), ids.end());
}

json manifest_to_json(const Manifest& m) {
  json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["size"] = m.size;
  j["generator"] = m.generator;
  j["modalities"] = m.modalities;
  j["cases"] = json::array();
  for (const auto& c : m.cases) {
    json jc;
    jc["case_id"] = c.case_id;
    jc["images"] = c.image_paths;
    jc["mask"] = c.mask_path;
    j["cases"].push_back(jc);
  }
  j["splits"] = m.splits;
  return j;
}

Manifest manifest_from_json(const json& j) {
  for (const char* key : {"version", "seed", "size", "generator", "modalities", "cases", "splits"}) {
    if (!j.contains(key)) throw std::runtime_error(std::string("manifest: missing key '") + key + "'");
  }
  Manifest m;
  m.version = j["version"].get<int>();
  m.seed = j["seed"].get<uint64_t>();
  m.size = j["size"].get<int>();
  m.generator = j["generator"].get<std::string>();
  m.modalities = j["modalities"].get<std::vector<std::string>>();
  for (const auto& jc : j["cases"]) {
    for (const char* key : {"case_id", "images", "mask"}) {
      if (!jc.contains(key)) throw std::runtime_error(std::string("manifest: case missing '") + key + "'");
    }
    ManifestCase c;
    c.case_id = jc["case_id"].get<std::string>();
    c.image_paths = jc["images"].get<std::map<std::string, std::string>>();
    c.mask_path = jc["mask"].get<std::string>();
    m.cases.push_back(std::move(c));
  }
  m.splits = j["splits"].get<std::map<std::string, std::vector<std::string>>>();
  std::vector<std::string> seen;
  for (const auto& c : m.cases) seen.push_back(c.case_id);
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    throw std::runtime_error("manifest: duplicate case ids");
  }
  return m;
}

}  // namespace

void save_manifest(const Manifest& m, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw std::runtime_error("manifest: cannot write " + tmp);
    f << manifest_to_json(m).dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("manifest: cannot open " + path);
  json j;
  f >> j;
  return manifest_from_json(j);
}

Manifest build_dataset(int n_cases, uint64_t seed, const std::string& out_dir, int size) {
  if (n_cases <= 0) throw std::runtime_error("build_dataset: n_cases must be positive");
  fs::create_directories(fs::path(out_dir) / "cases");

  Manifest m;
  m.seed = seed;
  m.size = size;
  m.generator = "phantom-v1";
  m.modalities = {"A", "B"};
  Rng root(seed);
  for (int i = 0; i < n_cases; ++i) {
    CaseRecord rec = gen_phantom_case(root.substream(static_cast<uint64_t>(i)).next_u64(), size);
    rec.case_id = case_name(i);
    ManifestCase mc;
    mc.case_id = rec.case_id;
    for (const auto& [mod, img] : rec.images) {
      std::string rel = "cases/" + rec.case_id + "_" + mod + ".pgm";
      write_pgm((fs::path(out_dir) / rel).string(), img);
      mc.image_paths[mod] = rel;
    }
    mc.mask_path = "cases/" + rec.case_id + "_mask.pgm";
    write_pgm_labels((fs::path(out_dir) / mc.mask_path).string(), rec.mask);
    m.cases.push_back(std::move(mc));
  }
  assign_splits(m);
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  return m;
}

const CaseRecord* Dataset::find(const std::string& case_id) const {
  for (const auto& c : cases) {
    if (c.case_id == case_id) return &c;
  }
  return nullptr;
}

std::vector<const CaseRecord*> Dataset::split(const std::string& name) const {
  std::vector<const CaseRecord*> out;
  auto it = manifest.splits.find(name);
  if (it == manifest.splits.end()) return out;
  for (const auto& id : it->second) {
    if (const CaseRecord* c = find(id)) out.push_back(c);
  }
  return out;
}

LabelImage otsu_foreground(const GrayImage& img) {
  long hist[256] = {0};
  for (double v : img.px) {
    int q = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
    hist[q] += 1;
  }
  const double total = static_cast<double>(img.px.size());
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) sum_all += i * static_cast<double>(hist[i]);
  double sum_b = 0.0, w_b = 0.0, best_var = -1.0;
  int threshold = 127;
  for (int t = 0; t < 256; ++t) {
    w_b += static_cast<double>(hist[t]);
    if (w_b == 0.0) continue;
    double w_f = total - w_b;
    if (w_f == 0.0) break;
    sum_b += t * static_cast<double>(hist[t]);
    double m_b = sum_b / w_b;
    double m_f = (sum_all - sum_b) / w_f;
    double between = w_b * w_f * (m_b - m_f) * (m_b - m_f);
    if (between > best_var) {
      best_var = between;
      threshold = t;
    }
  }
  LabelImage fg = LabelImage::filled(img.h, img.w, 0);
  for (std::size_t i = 0; i < img.px.size(); ++i) {
    fg.px[i] = img.px[i] * 255.0 > threshold ? 1 : 0;
  }
  return fg;
}

Dataset ingest_slices(const std::string& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  ds.root = fs::path(manifest_path).parent_path().string();
  for (const auto& mc : ds.manifest.cases) {
    try {
      CaseRecord rec;
      rec.case_id = mc.case_id;
      rec.provenance = CaseRecord::Provenance::kIngested;
      int h = -1, w = -1;
      for (const auto& [mod, rel] : mc.image_paths) {
        fs::path p = fs::path(ds.root) / rel;
        if (!fs::exists(p)) throw std::runtime_error("missing image file " + rel);
        GrayImage img = read_pgm(p.string());
        if (h < 0) {
          h = img.h;
          w = img.w;
        } else if (img.h != h || img.w != w) {
          throw std::runtime_error("modality size mismatch in " + rel);
        }
        rec.images.emplace(mod, std::move(img));
      }
      if (rec.images.size() < 2) throw std::runtime_error("needs at least two modalities");
      fs::path mp = fs::path(ds.root) / mc.mask_path;
      if (!fs::exists(mp)) throw std::runtime_error("missing mask file " + mc.mask_path);
      rec.mask = read_pgm_labels(mp.string());
      if (rec.mask.h != h || rec.mask.w != w) {
        throw std::runtime_error("mask size mismatch in " + mc.mask_path);
      }
      for (uint8_t v : rec.mask.px) {
        if (v > 2) throw std::runtime_error("mask label out of {0,1,2} in " + mc.mask_path);
      }
      rec.fg_mask = otsu_foreground(rec.images.begin()->second);
      ds.cases.push_back(std::move(rec));
    } catch (const std::exception& e) {
      ds.errors.push_back({mc.case_id, e.what()});
    }
  }
  return ds;
}

Dataset generate_dataset(int n_cases, uint64_t seed, int size) {
  Dataset ds;
  ds.manifest.seed = seed;
  ds.manifest.size = size;
  ds.manifest.generator = "phantom-v1";
  ds.manifest.modalities = {"A", "B"};
  Rng root(seed);
  for (int i = 0; i < n_cases; ++i) {
    CaseRecord rec = gen_phantom_case(root.substream(static_cast<uint64_t>(i)).next_u64(), size);
    rec.case_id = case_name(i);
    ManifestCase mc;
    mc.case_id = rec.case_id;
    ds.manifest.cases.push_back(mc);
    ds.cases.push_back(std::move(rec));
  }
  assign_splits(ds.manifest);
  return ds;
}

CaseRecord sample_patch(const CaseRecord& c, int patch, Rng& rng) {
  const GrayImage& first = c.images.begin()->second;
  if (patch > first.h || patch > first.w) {
    throw std::runtime_error("sample_patch: patch " + std::to_string(patch) +
                             " exceeds image " + std::to_string(first.h) + "x" +
                             std::to_string(first.w));
  }
  const int i0 = rng.uniform_int(0, first.h - patch);
  const int j0 = rng.uniform_int(0, first.w - patch);
  const bool flip = rng.coin();

  CaseRecord out;
  out.case_id = c.case_id;
  out.provenance = c.provenance;
  auto crop_gray = [&](const GrayImage& src) {
    GrayImage dst = GrayImage::filled(patch, patch, 0.0);
    for (int i = 0; i < patch; ++i) {
      for (int j = 0; j < patch; ++j) {
        int sj = flip ? j0 + patch - 1 - j : j0 + j;
        dst.at(i, j) = src.at(i0 + i, sj);
      }
    }
    return dst;
  };
  for (const auto& [mod, img] : c.images) out.images.emplace(mod, crop_gray(img));
  out.mask = LabelImage::filled(patch, patch, 0);
  for (int i = 0; i < patch; ++i) {
    for (int j = 0; j < patch; ++j) {
      int sj = flip ? j0 + patch - 1 - j : j0 + j;
      out.mask.at(i, j) = c.mask.at(i0 + i, sj);
    }
  }
  return out;
}

}  // namespace fuseseg::data
