#include "fuseseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace fuseseg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

int quantize(double v) {
  int q = static_cast<int>(std::lround(v * 255.0));
  return std::clamp(q, 0, 255);
}

void check_same(const char* op, const GrayImage& a, const GrayImage& b) {
  if (a.h != b.h || a.w != b.w) {
    throw std::runtime_error(std::string(op) + ": image size mismatch");
  }
}

double entropy_of_hist(const std::vector<double>& hist, double total) {
  double e = 0.0;
  for (double c : hist) {
    if (c <= 0.0) continue;
    double p = c / total;
    e -= p * std::log2(p);
  }
  return e;
}

double pearson_or_zero(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double va = 0, vb = 0, cov = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    va += da * da;
    vb += db * db;
    cov += da * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

std::vector<double> gaussian_kernel(int n, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(n));
  double c = (n - 1) / 2.0, norm = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = i - c;
    k[static_cast<std::size_t>(i)] = std::exp(-0.5 * d * d / (sigma * sigma));
    norm += k[static_cast<std::size_t>(i)];
  }
  for (auto& x : k) x /= norm;
  return k;
}

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  double at(int i, int j) const { return v[static_cast<std::size_t>(i) * w + j]; }
};

// separable 2-D valid filtering with a normalized Gaussian
Plane filter_valid(const Plane& p, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  Plane t;
  t.h = p.h;
  t.w = p.w - n + 1;
  t.v.assign(static_cast<std::size_t>(t.h) * t.w, 0.0);
  for (int i = 0; i < t.h; ++i) {
    for (int j = 0; j < t.w; ++j) {
      double acc = 0.0;
      for (int s = 0; s < n; ++s) acc += k[static_cast<std::size_t>(s)] * p.at(i, j + s);
      t.v[static_cast<std::size_t>(i) * t.w + j] = acc;
    }
  }
  Plane o;
  o.h = p.h - n + 1;
  o.w = t.w;
  o.v.assign(static_cast<std::size_t>(o.h) * o.w, 0.0);
  for (int i = 0; i < o.h; ++i) {
    for (int j = 0; j < o.w; ++j) {
      double acc = 0.0;
      for (int s = 0; s < n; ++s) acc += k[static_cast<std::size_t>(s)] * t.at(i + s, j);
      o.v[static_cast<std::size_t>(i) * o.w + j] = acc;
    }
  }
  return o;
}

Plane decimate2(const Plane& p) {
  Plane o;
  o.h = (p.h + 1) / 2;
  o.w = (p.w + 1) / 2;
  o.v.reserve(static_cast<std::size_t>(o.h) * o.w);
  for (int i = 0; i < p.h; i += 2) {
    for (int j = 0; j < p.w; j += 2) o.v.push_back(p.at(i, j));
  }
  return o;
}

// Pixel-domain visual information fidelity of dist against ref, 4 scales.
double vifp_pair(const GrayImage& ref_img, const GrayImage& dist_img) {
  const double sigma_nsq = 2.0;
  Plane ref{ref_img.h, ref_img.w, ref_img.px};
  Plane dist{dist_img.h, dist_img.w, dist_img.px};
  for (auto& x : ref.v) x *= 255.0;
  for (auto& x : dist.v) x *= 255.0;

  double num = 0.0, den = 0.0;
  for (int scale = 1; scale <= 4; ++scale) {
    int n = (1 << (4 - scale + 1)) + 1;
    int limit = std::min(ref.h, ref.w);
    if (limit < 3) break;
    if (n > limit) n = limit % 2 == 1 ? limit : limit - 1;
    std::vector<double> win = gaussian_kernel(n, static_cast<double>(n) / 5.0);

    if (scale > 1) {
      ref = decimate2(filter_valid(ref, win));
      dist = decimate2(filter_valid(dist, win));
      limit = std::min(ref.h, ref.w);
      if (limit < n) break;
    }
    Plane mu1 = filter_valid(ref, win);
    Plane mu2 = filter_valid(dist, win);
    Plane rr = ref, dd = dist, rd = ref;
    for (std::size_t i = 0; i < rr.v.size(); ++i) {
      rr.v[i] = ref.v[i] * ref.v[i];
      dd.v[i] = dist.v[i] * dist.v[i];
      rd.v[i] = ref.v[i] * dist.v[i];
    }
    Plane s11 = filter_valid(rr, win);
    Plane s22 = filter_valid(dd, win);
    Plane s12 = filter_valid(rd, win);
    for (std::size_t i = 0; i < mu1.v.size(); ++i) {
      double m1 = mu1.v[i], m2 = mu2.v[i];
      double sigma1 = std::max(0.0, s11.v[i] - m1 * m1);
      double sigma2 = std::max(0.0, s22.v[i] - m2 * m2);
      double sigma12 = s12.v[i] - m1 * m2;
      double g = sigma12 / (sigma1 + 1e-10);
      double sv = sigma2 - g * sigma12;
      if (sigma1 < 1e-10) {
        g = 0.0;
        sv = sigma2;
        sigma1 = 0.0;
      }
      if (sigma2 < 1e-10) {
        g = 0.0;
        sv = 0.0;
      }
      if (g < 0.0) {
        sv = sigma2;
        g = 0.0;
      }
      if (sv <= 1e-10) sv = 1e-10;
      num += std::log10(1.0 + g * g * sigma1 / (sv + sigma_nsq));
      den += std::log10(1.0 + sigma1 / sigma_nsq);
    }
  }
  return (num + 1e-10) / (den + 1e-10);
}

struct EdgeField {
  std::vector<double> g, alpha;
  int h = 0, w = 0;
};

EdgeField sobel_field(const GrayImage& im) {
  EdgeField f;
  f.h = im.h;
  f.w = im.w;
  f.g.assign(static_cast<std::size_t>(im.h) * im.w, 0.0);
  f.alpha.assign(f.g.size(), 0.0);
  const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  for (int i = 0; i < im.h; ++i) {
    for (int j = 0; j < im.w; ++j) {
      double gx = 0, gy = 0;
      // replicate borders so flat images have no spurious edge ring
      for (int ki = 0; ki < 3; ++ki) {
        int si = std::clamp(i + ki - 1, 0, im.h - 1);
        for (int kj = 0; kj < 3; ++kj) {
          int sj = std::clamp(j + kj - 1, 0, im.w - 1);
          double v = im.at(si, sj) * 255.0;
          gx += kx[ki * 3 + kj] * v;
          gy += ky[ki * 3 + kj] * v;
        }
      }
      std::size_t idx = static_cast<std::size_t>(i) * im.w + j;
      f.g[idx] = std::sqrt(gx * gx + gy * gy);
      f.alpha[idx] = gx == 0.0 ? 1.5707963267948966 : std::atan(gy / gx);
    }
  }
  return f;
}

// Edge preservation of src into fused, normalized so perfect transfer is 1.
std::vector<double> edge_preservation(const EdgeField& src, const EdgeField& fus) {
  const double tg = 0.9994, kg = -15.0, dg = 0.5;
  const double ta = 0.9879, ka = -22.0, da = 0.8;
  const double qg1 = tg / (1.0 + std::exp(kg * (1.0 - dg)));
  const double qa1 = ta / (1.0 + std::exp(ka * (1.0 - da)));
  const double qnorm = qg1 * qa1;
  std::vector<double> q(src.g.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    double gs = src.g[i], gf = fus.g[i];
    double rel;
    if (gs > gf) {
      rel = gf / gs;
    } else if (gs < gf) {
      rel = gs / gf;
    } else {
      rel = 1.0;  // includes the both-flat case
    }
    double av = 1.0 - std::abs(src.alpha[i] - fus.alpha[i]) / (3.141592653589793 / 2.0);
    double qg = tg / (1.0 + std::exp(kg * (rel - dg)));
    double qa = ta / (1.0 + std::exp(ka * (av - da)));
    q[i] = qg * qa / qnorm;
  }
  return q;
}

std::vector<double> boundary_points(const LabelImage& m, int cls, bool& any_fg) {
  std::vector<double> pts;  // interleaved (i,j)
  any_fg = false;
  for (int i = 0; i < m.h; ++i) {
    for (int j = 0; j < m.w; ++j) {
      if (m.at(i, j) != cls) continue;
      any_fg = true;
      bool edge = i == 0 || i == m.h - 1 || j == 0 || j == m.w - 1 ||
                  m.at(i - 1, j) != cls || m.at(i + 1, j) != cls ||
                  m.at(i, j - 1) != cls || m.at(i, j + 1) != cls;
      if (edge) {
        pts.push_back(static_cast<double>(i));
        pts.push_back(static_cast<double>(j));
      }
    }
  }
  return pts;
}

void nearest_distances(const std::vector<double>& from, const std::vector<double>& to,
                       std::vector<double>& out) {
  for (std::size_t i = 0; i < from.size(); i += 2) {
    double best = kInf;
    for (std::size_t j = 0; j < to.size(); j += 2) {
      double di = from[i] - to[j], dj = from[i + 1] - to[j + 1];
      best = std::min(best, di * di + dj * dj);
    }
    out.push_back(std::sqrt(best));
  }
}

void check_labels(const char* op, const LabelImage& pred, const LabelImage& gt) {
  if (pred.h != gt.h || pred.w != gt.w) {
    throw std::runtime_error(std::string(op) + ": mask size mismatch");
  }
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

double en(const GrayImage& img) {
  std::vector<double> hist(256, 0.0);
  for (double v : img.px) hist[static_cast<std::size_t>(quantize(v))] += 1.0;
  return entropy_of_hist(hist, static_cast<double>(img.px.size()));
}

double sd(const GrayImage& img) {
  const double n = static_cast<double>(img.px.size());
  double mu = 0.0;
  for (double v : img.px) mu += v * 255.0;
  mu /= n;
  double acc = 0.0;
  for (double v : img.px) {
    double d = v * 255.0 - mu;
    acc += d * d;
  }
  return std::sqrt(acc / n);
}

double sf(const GrayImage& img) {
  double rf = 0.0, cf = 0.0;
  long rn = 0, cn = 0;
  for (int i = 0; i < img.h; ++i) {
    for (int j = 1; j < img.w; ++j) {
      double d = (img.at(i, j) - img.at(i, j - 1)) * 255.0;
      rf += d * d;
      ++rn;
    }
  }
  for (int i = 1; i < img.h; ++i) {
    for (int j = 0; j < img.w; ++j) {
      double d = (img.at(i, j) - img.at(i - 1, j)) * 255.0;
      cf += d * d;
      ++cn;
    }
  }
  rf = rn > 0 ? std::sqrt(rf / static_cast<double>(rn)) : 0.0;
  cf = cn > 0 ? std::sqrt(cf / static_cast<double>(cn)) : 0.0;
  return std::sqrt(rf * rf + cf * cf);
}

namespace {

double mutual_information_pair(const GrayImage& x, const GrayImage& y) {
  std::vector<double> joint(256 * 256, 0.0), px(256, 0.0), py(256, 0.0);
  const double n = static_cast<double>(x.px.size());
  for (std::size_t i = 0; i < x.px.size(); ++i) {
    int a = quantize(x.px[i]);
    int b = quantize(y.px[i]);
    joint[static_cast<std::size_t>(a) * 256 + b] += 1.0;
    px[static_cast<std::size_t>(a)] += 1.0;
    py[static_cast<std::size_t>(b)] += 1.0;
  }
  double info = 0.0;
  for (int a = 0; a < 256; ++a) {
    for (int b = 0; b < 256; ++b) {
      double c = joint[static_cast<std::size_t>(a) * 256 + b];
      if (c <= 0.0) continue;
      double pj = c / n;
      info += pj * std::log2(pj * n * n / (px[static_cast<std::size_t>(a)] * py[static_cast<std::size_t>(b)]));
    }
  }
  return info;
}

}  // namespace

double mi(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2) {
  check_same("mi", fused, src1);
  check_same("mi", fused, src2);
  return mutual_information_pair(fused, src1) + mutual_information_pair(fused, src2);
}

double scd(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2) {
  check_same("scd", fused, src1);
  check_same("scd", fused, src2);
  std::vector<double> d1(fused.px.size()), d2(fused.px.size());
  for (std::size_t i = 0; i < fused.px.size(); ++i) {
    d1[i] = fused.px[i] - src2.px[i];
    d2[i] = fused.px[i] - src1.px[i];
  }
  return pearson_or_zero(d1, src1.px) + pearson_or_zero(d2, src2.px);
}

double vif(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2) {
  check_same("vif", fused, src1);
  check_same("vif", fused, src2);
  return 0.5 * (vifp_pair(src1, fused) + vifp_pair(src2, fused));
}

double qabf(const GrayImage& fused, const GrayImage& src1, const GrayImage& src2) {
  check_same("qabf", fused, src1);
  check_same("qabf", fused, src2);
  EdgeField fa = sobel_field(src1);
  EdgeField fb = sobel_field(src2);
  EdgeField ff = sobel_field(fused);
  std::vector<double> qa = edge_preservation(fa, ff);
  std::vector<double> qb = edge_preservation(fb, ff);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    num += qa[i] * fa.g[i] + qb[i] * fb.g[i];
    den += fa.g[i] + fb.g[i];
  }
  if (den <= 0.0) return 0.0;
  return std::clamp(num / den, 0.0, 1.0);
}

double ssim(const GrayImage& a, const GrayImage& b) {
  check_same("ssim", a, b);
  int n = std::min({11, a.h, a.w});
  if (n % 2 == 0) n -= 1;
  if (n < 1) throw std::runtime_error("ssim: image too small");
  std::vector<double> win = gaussian_kernel(n, 1.5);
  const double c1 = 1e-4, c2 = 9e-4;
  Plane pa{a.h, a.w, a.px}, pb{b.h, b.w, b.px};
  Plane aa = pa, bb = pb, ab = pa;
  for (std::size_t i = 0; i < aa.v.size(); ++i) {
    aa.v[i] = pa.v[i] * pa.v[i];
    bb.v[i] = pb.v[i] * pb.v[i];
    ab.v[i] = pa.v[i] * pb.v[i];
  }
  Plane mu1 = filter_valid(pa, win);
  Plane mu2 = filter_valid(pb, win);
  Plane s11 = filter_valid(aa, win);
  Plane s22 = filter_valid(bb, win);
  Plane s12 = filter_valid(ab, win);
  double acc = 0.0;
  for (std::size_t i = 0; i < mu1.v.size(); ++i) {
    double m1 = mu1.v[i], m2 = mu2.v[i];
    double v1 = s11.v[i] - m1 * m1;
    double v2 = s22.v[i] - m2 * m2;
    double cv = s12.v[i] - m1 * m2;
    acc += ((2.0 * m1 * m2 + c1) * (2.0 * cv + c2)) /
           ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
  }
  return acc / static_cast<double>(mu1.v.size());
}

FusionMetricsReport fusion_metrics(const GrayImage& fused, const GrayImage& src1,
                                   const GrayImage& src2) {
  FusionMetricsReport r;
  r.en = en(fused);
  r.sd = sd(fused);
  r.sf = sf(fused);
  r.mi = mi(fused, src1, src2);
  r.scd = scd(fused, src1, src2);
  r.vif = vif(fused, src1, src2);
  r.qabf = qabf(fused, src1, src2);
  r.ssim = 0.5 * (ssim(fused, src1) + ssim(fused, src2));
  return r;
}

double dice(const LabelImage& pred, const LabelImage& gt, int cls) {
  check_labels("dice", pred, gt);
  long p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    bool ip = pred.px[i] == cls, ig = gt.px[i] == cls;
    p += ip;
    g += ig;
    both += ip && ig;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double iou(const LabelImage& pred, const LabelImage& gt, int cls) {
  check_labels("iou", pred, gt);
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    bool ip = pred.px[i] == cls, ig = gt.px[i] == cls;
    inter += ip && ig;
    uni += ip || ig;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(const LabelImage& pred, const LabelImage& gt, int num_classes) {
  double acc = 0.0;
  for (int c = 0; c < num_classes; ++c) acc += iou(pred, gt, c);
  return acc / static_cast<double>(num_classes);
}

double hd95(const LabelImage& pred, const LabelImage& gt, int cls) {
  check_labels("hd95", pred, gt);
  bool any_p = false, any_g = false;
  std::vector<double> bp = boundary_points(pred, cls, any_p);
  std::vector<double> bg = boundary_points(gt, cls, any_g);
  if (bp.empty() || bg.empty()) return kInf;
  std::vector<double> d;
  d.reserve((bp.size() + bg.size()) / 2);
  nearest_distances(bp, bg, d);
  nearest_distances(bg, bp, d);
  std::sort(d.begin(), d.end());
  double pos = 0.95 * static_cast<double>(d.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= d.size()) return d.back();
  return d[lo] + frac * (d[lo + 1] - d[lo]);
}

SegMetricsReport seg_metrics(const LabelImage& pred, const LabelImage& gt) {
  SegMetricsReport r;
  r.dice_tissue = dice(pred, gt, 1);
  r.dice_lesion = dice(pred, gt, 2);
  r.miou = miou(pred, gt, 3);
  r.hd95_tissue = hd95(pred, gt, 1);
  r.hd95_lesion = hd95(pred, gt, 2);
  return r;
}

void write_fusion_report(
    const std::string& csv_path,
    const std::vector<std::pair<std::string, FusionMetricsReport>>& rows) {
  std::ofstream f(csv_path);
  if (!f) throw std::runtime_error("cannot write " + csv_path);
  f << "image_id,EN,SD,SF,MI,SCD,VIF,Qabf,SSIM\n";
  double sums[8] = {0};
  for (const auto& [id, r] : rows) {
    f << id << ',' << fmt(r.en) << ',' << fmt(r.sd) << ',' << fmt(r.sf) << ','
      << fmt(r.mi) << ',' << fmt(r.scd) << ',' << fmt(r.vif) << ',' << fmt(r.qabf)
      << ',' << fmt(r.ssim) << '\n';
    double vals[8] = {r.en, r.sd, r.sf, r.mi, r.scd, r.vif, r.qabf, r.ssim};
    for (int i = 0; i < 8; ++i) sums[i] += vals[i];
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  nlohmann::json summary;
  summary["count"] = rows.size();
  const char* names[8] = {"EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM"};
  for (int i = 0; i < 8; ++i) summary["mean"][names[i]] = sums[i] / n;
  std::ofstream js(csv_path + ".summary.json");
  js << summary.dump(2) << '\n';
}

void write_seg_report(const std::string& csv_path,
                      const std::vector<std::pair<std::string, SegMetricsReport>>& rows) {
  std::ofstream f(csv_path);
  if (!f) throw std::runtime_error("cannot write " + csv_path);
  f << "case_id,dice_tissue,dice_lesion,miou,hd95_tissue,hd95_lesion\n";
  double sums[5] = {0};
  long finite_hd[2] = {0, 0};
  double hd_sums[2] = {0, 0};
  for (const auto& [id, r] : rows) {
    f << id << ',' << fmt(r.dice_tissue) << ',' << fmt(r.dice_lesion) << ','
      << fmt(r.miou) << ',' << fmt(r.hd95_tissue) << ',' << fmt(r.hd95_lesion) << '\n';
    sums[0] += r.dice_tissue;
    sums[1] += r.dice_lesion;
    sums[2] += r.miou;
    if (std::isfinite(r.hd95_tissue)) {
      hd_sums[0] += r.hd95_tissue;
      finite_hd[0] += 1;
    }
    if (std::isfinite(r.hd95_lesion)) {
      hd_sums[1] += r.hd95_lesion;
      finite_hd[1] += 1;
    }
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  nlohmann::json summary;
  summary["count"] = rows.size();
  summary["mean"]["dice_tissue"] = sums[0] / n;
  summary["mean"]["dice_lesion"] = sums[1] / n;
  summary["mean"]["miou"] = sums[2] / n;
  summary["mean"]["hd95_tissue"] = finite_hd[0] ? hd_sums[0] / finite_hd[0] : -1.0;
  summary["mean"]["hd95_lesion"] = finite_hd[1] ? hd_sums[1] / finite_hd[1] : -1.0;
  summary["hd95_empty_cases"] = {{"tissue", rows.size() - static_cast<std::size_t>(finite_hd[0])},
                                 {"lesion", rows.size() - static_cast<std::size_t>(finite_hd[1])}};
  std::ofstream js(csv_path + ".summary.json");
  js << summary.dump(2) << '\n';
}

}  // namespace fuseseg::metrics
