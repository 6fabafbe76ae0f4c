#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fuseseg/rng.hpp"
#include "fuseseg/tensor.hpp"

namespace testutil {

// max_i |a_i - b_i| / (max(|a|_inf, |b|_inf) + floor)
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b,
                      double floor = 1e-8) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return num / (den + floor);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / (std::max(std::abs(a), std::abs(b)) + floor);
}

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> p, double h = 1e-5) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    double keep = p[i];
    p[i] = keep + h;
    double fp = f(p);
    p[i] = keep - h;
    double fm = f(p);
    p[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> random_vec(fuseseg::Rng& rng, std::size_t n,
                                      double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Uniform values bounded away from zero, for kinky ops (abs, relu).
inline std::vector<double> random_vec_nonzero(fuseseg::Rng& rng, std::size_t n,
                                              double gap = 0.1) {
  std::vector<double> v(n);
  for (auto& x : v) {
    double m = rng.uniform(gap, 1.0);
    x = rng.coin() ? m : -m;
  }
  return v;
}

// A shuffled grid of well-separated values; every pair differs by >= step.
inline std::vector<double> random_vec_distinct(fuseseg::Rng& rng, std::size_t n,
                                               double step = 0.05) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 0.1 + step * static_cast<double>(i);
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(v[i - 1], v[j]);
  }
  return v;
}

}  // namespace testutil
