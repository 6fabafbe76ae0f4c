#pragma once

// Independent direct-summation implementations of the evaluation metrics.
// These deliberately take different computational routes from src/metrics.cpp
// (entropy identities for MI, non-separable 2-D windows for SSIM/VIF) so the
// two sides cross-check each other.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fuseseg/image.hpp"

namespace metric_oracle {

using fuseseg::GrayImage;
using fuseseg::LabelImage;

inline int q256(double v) {
  int q = static_cast<int>(std::lround(v * 255.0));
  return std::clamp(q, 0, 255);
}

inline double en(const GrayImage& im) {
  std::vector<long> hist(256, 0);
  for (double v : im.px) hist[static_cast<std::size_t>(q256(v))] += 1;
  double n = static_cast<double>(im.px.size()), e = 0.0;
  for (long c : hist) {
    if (c > 0) {
      double p = static_cast<double>(c) / n;
      e -= p * std::log2(p);
    }
  }
  return e;
}

inline double sd(const GrayImage& im) {
  double n = static_cast<double>(im.px.size());
  double mu = 0.0;
  for (double v : im.px) mu += 255.0 * v;
  mu /= n;
  double acc = 0.0;
  for (double v : im.px) acc += (255.0 * v - mu) * (255.0 * v - mu);
  return std::sqrt(acc / n);
}

inline double sf(const GrayImage& im) {
  double rf = 0.0, cf = 0.0;
  for (int i = 0; i < im.h; ++i) {
    for (int j = 1; j < im.w; ++j) {
      double d = 255.0 * (im.at(i, j) - im.at(i, j - 1));
      rf += d * d;
    }
  }
  for (int i = 1; i < im.h; ++i) {
    for (int j = 0; j < im.w; ++j) {
      double d = 255.0 * (im.at(i, j) - im.at(i - 1, j));
      cf += d * d;
    }
  }
  rf /= static_cast<double>(im.h) * (im.w - 1);
  cf /= static_cast<double>((im.h - 1)) * im.w;
  return std::sqrt(rf + cf);
}

// I(X;Y) via the entropy identity H(X)+H(Y)-H(X,Y).
inline double mi_pair(const GrayImage& x, const GrayImage& y) {
  std::vector<long> hx(256, 0), hy(256, 0);
  std::vector<long> hxy(256 * 256, 0);
  for (std::size_t i = 0; i < x.px.size(); ++i) {
    int a = q256(x.px[i]), b = q256(y.px[i]);
    hx[static_cast<std::size_t>(a)] += 1;
    hy[static_cast<std::size_t>(b)] += 1;
    hxy[static_cast<std::size_t>(a) * 256 + b] += 1;
  }
  double n = static_cast<double>(x.px.size());
  auto ent = [n](const std::vector<long>& h) {
    double e = 0.0;
    for (long c : h) {
      if (c > 0) {
        double p = static_cast<double>(c) / n;
        e -= p * std::log2(p);
      }
    }
    return e;
  };
  return ent(hx) + ent(hy) - ent(hxy);
}

inline double mi(const GrayImage& f, const GrayImage& a, const GrayImage& b) {
  return mi_pair(f, a) + mi_pair(f, b);
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double n = static_cast<double>(a.size()), sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
  }
  sa /= n;
  sb /= n;
  double va = 0, vb = 0, cv = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - sa) * (a[i] - sa);
    vb += (b[i] - sb) * (b[i] - sb);
    cv += (a[i] - sa) * (b[i] - sb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cv / std::sqrt(va * vb);
}

inline double scd(const GrayImage& f, const GrayImage& a, const GrayImage& b) {
  std::vector<double> fa(f.px.size()), fb(f.px.size());
  for (std::size_t i = 0; i < f.px.size(); ++i) {
    fa[i] = f.px[i] - b.px[i];
    fb[i] = f.px[i] - a.px[i];
  }
  return pearson(fa, a.px) + pearson(fb, b.px);
}

// Non-separable windowed SSIM: every valid window evaluated with explicit
// 2-D Gaussian weights.
inline double ssim(const GrayImage& a, const GrayImage& b) {
  int n = std::min({11, a.h, a.w});
  if (n % 2 == 0) n -= 1;
  std::vector<double> w1(static_cast<std::size_t>(n));
  double c = (n - 1) / 2.0, norm = 0.0;
  for (int i = 0; i < n; ++i) {
    w1[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (1.5 * 1.5));
    norm += w1[static_cast<std::size_t>(i)];
  }
  for (auto& x : w1) x /= norm;
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0.0;
  long cnt = 0;
  for (int i = 0; i + n <= a.h; ++i) {
    for (int j = 0; j + n <= a.w; ++j) {
      double m1 = 0, m2 = 0;
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          double w = w1[static_cast<std::size_t>(u)] * w1[static_cast<std::size_t>(v)];
          m1 += w * a.at(i + u, j + v);
          m2 += w * b.at(i + u, j + v);
        }
      }
      double v1 = 0, v2 = 0, cv = 0;
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          double w = w1[static_cast<std::size_t>(u)] * w1[static_cast<std::size_t>(v)];
          v1 += w * a.at(i + u, j + v) * a.at(i + u, j + v);
          v2 += w * b.at(i + u, j + v) * b.at(i + u, j + v);
          cv += w * a.at(i + u, j + v) * b.at(i + u, j + v);
        }
      }
      v1 -= m1 * m1;
      v2 -= m2 * m2;
      cv -= m1 * m2;
      acc += ((2 * m1 * m2 + c1) * (2 * cv + c2)) /
             ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
      ++cnt;
    }
  }
  return acc / static_cast<double>(cnt);
}

// VIF with explicit 2-D window sums, same scale and clamping conventions.
inline double vif_pair(const GrayImage& ref0, const GrayImage& dist0) {
  std::vector<double> ref(ref0.px), dist(dist0.px);
  for (auto& x : ref) x *= 255.0;
  for (auto& x : dist) x *= 255.0;
  int h = ref0.h, w = ref0.w;
  double num = 0.0, den = 0.0;
  for (int scale = 1; scale <= 4; ++scale) {
    int n = (1 << (5 - scale)) + 1;
    int limit = std::min(h, w);
    if (limit < 3) break;
    if (n > limit) n = limit % 2 == 1 ? limit : limit - 1;
    std::vector<double> k(static_cast<std::size_t>(n));
    double c = (n - 1) / 2.0, norm = 0.0;
    double sig = static_cast<double>(n) / 5.0;
    for (int i = 0; i < n; ++i) {
      k[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sig * sig));
      norm += k[static_cast<std::size_t>(i)];
    }
    for (auto& x : k) x /= norm;

    auto filt = [&](const std::vector<double>& src, int sh, int sw, int i, int j) {
      double acc = 0.0;
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          acc += k[static_cast<std::size_t>(u)] * k[static_cast<std::size_t>(v)] *
                 src[static_cast<std::size_t>(i + u) * sw + (j + v)];
        }
      }
      (void)sh;
      return acc;
    };

    if (scale > 1) {
      int vh = h - n + 1, vw = w - n + 1;
      if (vh < 1 || vw < 1) break;
      std::vector<double> r2, d2;
      for (int i = 0; i < vh; i += 2) {
        for (int j = 0; j < vw; j += 2) {
          r2.push_back(filt(ref, h, w, i, j));
          d2.push_back(filt(dist, h, w, i, j));
        }
      }
      int nh = (vh + 1) / 2, nw = (vw + 1) / 2;
      ref = std::move(r2);
      dist = std::move(d2);
      h = nh;
      w = nw;
      if (std::min(h, w) < n) break;
    }
    for (int i = 0; i + n <= h; ++i) {
      for (int j = 0; j + n <= w; ++j) {
        double m1 = filt(ref, h, w, i, j);
        double m2 = filt(dist, h, w, i, j);
        double s11 = 0, s22 = 0, s12 = 0;
        for (int u = 0; u < n; ++u) {
          for (int v = 0; v < n; ++v) {
            double wgt = k[static_cast<std::size_t>(u)] * k[static_cast<std::size_t>(v)];
            double rv = ref[static_cast<std::size_t>(i + u) * w + (j + v)];
            double dv = dist[static_cast<std::size_t>(i + u) * w + (j + v)];
            s11 += wgt * rv * rv;
            s22 += wgt * dv * dv;
            s12 += wgt * rv * dv;
          }
        }
        double sigma1 = std::max(0.0, s11 - m1 * m1);
        double sigma2 = std::max(0.0, s22 - m2 * m2);
        double sigma12 = s12 - m1 * m2;
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
        num += std::log10(1.0 + g * g * sigma1 / (sv + 2.0));
        den += std::log10(1.0 + sigma1 / 2.0);
      }
    }
  }
  return (num + 1e-10) / (den + 1e-10);
}

inline double vif(const GrayImage& f, const GrayImage& a, const GrayImage& b) {
  return 0.5 * (vif_pair(a, f) + vif_pair(b, f));
}

inline void sobel_at(const GrayImage& im, int i, int j, double& gx, double& gy) {
  static const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  gx = 0;
  gy = 0;
  for (int u = 0; u < 3; ++u) {
    for (int v = 0; v < 3; ++v) {
      int si = std::clamp(i + u - 1, 0, im.h - 1);
      int sj = std::clamp(j + v - 1, 0, im.w - 1);
      gx += kx[u * 3 + v] * 255.0 * im.at(si, sj);
      gy += ky[u * 3 + v] * 255.0 * im.at(si, sj);
    }
  }
}

inline double qabf(const GrayImage& f, const GrayImage& a, const GrayImage& b) {
  const double tg = 0.9994, kg = -15.0, dg = 0.5;
  const double ta = 0.9879, ka = -22.0, da = 0.8;
  const double qmax = (tg / (1.0 + std::exp(kg * (1.0 - dg)))) *
                      (ta / (1.0 + std::exp(ka * (1.0 - da))));
  double num = 0.0, den = 0.0;
  for (int i = 0; i < f.h; ++i) {
    for (int j = 0; j < f.w; ++j) {
      double gxf, gyf, gxa, gya, gxb, gyb;
      sobel_at(f, i, j, gxf, gyf);
      sobel_at(a, i, j, gxa, gya);
      sobel_at(b, i, j, gxb, gyb);
      double gf = std::hypot(gxf, gyf);
      double alphaf = gxf == 0.0 ? M_PI / 2 : std::atan(gyf / gxf);
      auto pres = [&](double gs, double alphas) {
        double rel = gs > gf ? gf / gs : (gs < gf ? gs / gf : 1.0);
        double av = 1.0 - std::abs(alphas - alphaf) / (M_PI / 2);
        double qg = tg / (1.0 + std::exp(kg * (rel - dg)));
        double qa = ta / (1.0 + std::exp(ka * (av - da)));
        return qg * qa / qmax;
      };
      double ga = std::hypot(gxa, gya), gb = std::hypot(gxb, gyb);
      double alphaa = gxa == 0.0 ? M_PI / 2 : std::atan(gya / gxa);
      double alphab = gxb == 0.0 ? M_PI / 2 : std::atan(gyb / gxb);
      num += pres(ga, alphaa) * ga + pres(gb, alphab) * gb;
      den += ga + gb;
    }
  }
  if (den <= 0.0) return 0.0;
  return std::clamp(num / den, 0.0, 1.0);
}

inline double hd95(const LabelImage& pred, const LabelImage& gt, int cls) {
  auto boundary = [cls](const LabelImage& m) {
    std::vector<std::pair<int, int>> pts;
    for (int i = 0; i < m.h; ++i) {
      for (int j = 0; j < m.w; ++j) {
        if (m.at(i, j) != cls) continue;
        bool bnd = false;
        const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
        for (int t = 0; t < 4; ++t) {
          int ni = i + di[t], nj = j + dj[t];
          if (ni < 0 || ni >= m.h || nj < 0 || nj >= m.w || m.at(ni, nj) != cls) {
            bnd = true;
            break;
          }
        }
        if (bnd) pts.emplace_back(i, j);
      }
    }
    return pts;
  };
  auto bp = boundary(pred), bg = boundary(gt);
  if (bp.empty() || bg.empty()) return std::numeric_limits<double>::infinity();
  std::vector<double> d;
  auto push_dists = [&](const auto& from, const auto& to) {
    for (auto [i, j] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (auto [u, v] : to) {
        best = std::min(best, std::hypot(static_cast<double>(i - u), static_cast<double>(j - v)));
      }
      d.push_back(best);
    }
  };
  push_dists(bp, bg);
  push_dists(bg, bp);
  std::sort(d.begin(), d.end());
  double pos = 0.95 * static_cast<double>(d.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= d.size()) return d.back();
  return d[lo] + (pos - static_cast<double>(lo)) * (d[lo + 1] - d[lo]);
}

}  // namespace metric_oracle
