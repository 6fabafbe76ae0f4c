#include "fuseseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "fuseseg/rng.hpp"

namespace fuseseg::data {

namespace {

struct Ellipse {
  double cx, cy, a, b, phi;

  bool contains(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double c = std::cos(phi), s = std::sin(phi);
    double u = (dx * c + dy * s) / a;
    double v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
  }
};

void rasterize(const Ellipse& e, int size, std::vector<uint8_t>& out) {
  out.assign(static_cast<std::size_t>(size) * size, 0);
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      if (e.contains(j + 0.5, i + 0.5)) out[static_cast<std::size_t>(i) * size + j] = 1;
    }
  }
}

}  // namespace

CaseRecord gen_phantom_case(uint64_t seed, int size) {
  if (size < 32 || size % 8 != 0) {
    throw std::runtime_error("gen_phantom_case: size must be a multiple of 8 and >= 32, got " +
                             std::to_string(size));
  }
  Rng rng = Rng::stream(seed, "phantom");
  const double fs = static_cast<double>(size);
  const std::size_t n = static_cast<std::size_t>(size) * size;

  Ellipse head{fs * (0.5 + rng.uniform(-0.03, 0.03)), fs * (0.5 + rng.uniform(-0.03, 0.03)),
               fs * rng.uniform(0.30, 0.38), fs * rng.uniform(0.27, 0.34),
               rng.uniform(0.0, 3.14159265)};
  std::vector<uint8_t> head_px;
  rasterize(head, size, head_px);
  long head_area = std::count(head_px.begin(), head_px.end(), 1);

  std::vector<double> base_a(n), base_b(n);
  for (std::size_t i = 0; i < n; ++i) {
    base_a[i] = head_px[i] ? 0.46 : 0.06;
    base_b[i] = head_px[i] ? 0.40 : 0.10;
  }

  // internal structures: visible in A, nearly invisible in B
  const int n_struct = rng.uniform_int(2, 4);
  for (int k = 0; k < n_struct; ++k) {
    double r = rng.uniform(0.0, 0.5) * std::min(head.a, head.b);
    double ang = rng.uniform(0.0, 6.283185307);
    Ellipse s{head.cx + r * std::cos(ang), head.cy + r * std::sin(ang),
              fs * rng.uniform(0.06, 0.16), fs * rng.uniform(0.06, 0.16),
              rng.uniform(0.0, 3.14159265)};
    double da = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.10, 0.22);
    double db = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.0, 0.03);
    std::vector<uint8_t> spx;
    rasterize(s, size, spx);
    for (std::size_t i = 0; i < n; ++i) {
      if (spx[i] && head_px[i]) {
        base_a[i] += da;
        base_b[i] += db;
      }
    }
  }

  // lesion placement: fully inside the head, target area, and statistically
  // invisible in modality A
  std::vector<uint8_t> lesion_px, best_px;
  double best_diff = 1e9;
  for (int attempt = 0; attempt < 300; ++attempt) {
    double frac = rng.uniform(0.032, 0.066);
    double area = frac * static_cast<double>(head_area);
    double aspect = rng.uniform(0.7, 1.4);
    double la = std::sqrt(area * aspect / 3.14159265);
    double lb = area / (3.14159265 * la);
    if (la < 1.7 || lb < 1.7) continue;
    double rr = rng.uniform(0.0, 0.55) * std::min(head.a, head.b);
    double ang = rng.uniform(0.0, 6.283185307);
    Ellipse les{head.cx + rr * std::cos(ang), head.cy + rr * std::sin(ang), la, lb,
                rng.uniform(0.0, 3.14159265)};
    std::vector<uint8_t> lpx;
    rasterize(les, size, lpx);
    long larea = 0;
    bool inside = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (lpx[i]) {
        ++larea;
        if (!head_px[i]) {
          inside = false;
          break;
        }
      }
    }
    if (!inside) continue;
    double lo = 0.018 * static_cast<double>(head_area);
    double hi = 0.078 * static_cast<double>(head_area);
    if (larea < 8 || static_cast<double>(larea) < lo || static_cast<double>(larea) > hi) continue;

    double mean_lesion = 0.0, mean_tissue = 0.0;
    long nt = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (lpx[i]) {
        mean_lesion += base_a[i];
      } else if (head_px[i]) {
        mean_tissue += base_a[i];
        ++nt;
      }
    }
    mean_lesion /= static_cast<double>(larea);
    mean_tissue /= static_cast<double>(nt);
    double diff = std::abs(mean_lesion - mean_tissue);
    if (diff < best_diff) {
      best_diff = diff;
      best_px = lpx;
    }
    if (diff < 0.025) {
      lesion_px = std::move(lpx);
      break;
    }
  }
  if (lesion_px.empty()) lesion_px = std::move(best_px);
  if (lesion_px.empty()) {
    throw std::runtime_error("gen_phantom_case: lesion placement failed for seed " +
                             std::to_string(seed));
  }

  double lesion_gain = rng.uniform(0.42, 0.50);
  CaseRecord rec;
  rec.case_id = "phantom_" + std::to_string(seed);
  rec.provenance = CaseRecord::Provenance::kGenerated;
  GrayImage img_a{size, size, std::vector<double>(n)};
  GrayImage img_b{size, size, std::vector<double>(n)};
  rec.mask = LabelImage::filled(size, size, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double va = base_a[i];
    double vb = base_b[i] + (lesion_px[i] ? lesion_gain : 0.0);
    va += rng.normal() * 0.02;
    vb += rng.normal() * 0.02;
    img_a.px[i] = std::clamp(va, 0.0, 1.0);
    img_b.px[i] = std::clamp(vb, 0.0, 1.0);
    rec.mask.px[i] = lesion_px[i] ? 2 : (head_px[i] ? 1 : 0);
  }
  rec.images.emplace("A", std::move(img_a));
  rec.images.emplace("B", std::move(img_b));
  return rec;
}

}  // namespace fuseseg::data
