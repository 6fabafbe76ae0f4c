#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fuseseg/tensor.hpp"

namespace fuseseg::bilevel {

using VecFn = std::function<std::vector<double>(const std::vector<double>&)>;

struct CgOptions {
  int max_iters = 50;
  double tol = 1e-6;      // relative residual
  double damping = 0.0;   // solves (H + damping I) x = rhs
};

struct CgResult {
  std::vector<double> x;
  int iters = 0;
  double residual = 0.0;  // relative, at exit
  bool converged = false;
  std::vector<double> residual_log;
};

// Conjugate gradients on matrix-vector products. If the residual is not
// reduced below tol within max_iters the best iterate is returned with
// converged=false.
CgResult cg_solve(const VecFn& apply, const std::vector<double>& rhs,
                  const CgOptions& opts = {});

// Toy bilevel problem with a residual-form inner objective:
//   inner  L_fuse(theta; omega) = 0.5 |R theta - S omega|^2
//   outer  L_seg(theta)         = 0.5 |theta - target|^2
// R is square and well conditioned, so theta*(omega) = (R^T R)^-1 R^T S omega
// and the exact outer gradient d L_seg / d omega has the closed form
// (R^T S)^T (R^T R)^-1 (theta* - target).
struct QuadraticBilevel {
  int n_theta = 8;
  int n_omega = 5;
  std::vector<double> r_mat;   // [n_theta x n_theta]
  std::vector<double> s_mat;   // [n_theta x n_omega]
  std::vector<double> target;  // [n_theta]
  std::vector<double> omega;   // [n_omega]
  bool outer_uses_theta = true;

  static QuadraticBilevel random(uint64_t seed, int n_theta = 8, int n_omega = 5);

  Tensor residuals(const Tensor& theta, const std::vector<double>& omega_v) const;
  Tensor inner_loss(const Tensor& theta, const std::vector<double>& omega_v) const;
  Tensor outer_loss(const Tensor& theta) const;
  std::vector<double> outer_direct_grad() const;

  std::vector<double> solve_inner_dense() const;
  std::vector<double> closed_form_hypergrad() const;
  // re-solves the inner problem at omega +- h per coordinate
  std::vector<double> fd_hypergrad(double h = 1e-5) const;
  // tape gradient through the differentiable solution map theta = M omega
  std::vector<double> joint_grad() const;
};

struct HypergradOptions {
  double damping = -1.0;  // <0: 1e-3 * (trace estimate)/dim, 0: undamped
  bool gauss_newton = false;
  int cg_max_iters = 200;
  double cg_tol = 1e-10;
  double inner_tol = 1e-5;
};

struct HypergradReport {
  uint64_t seed = 0;
  std::vector<double> implicit_grad;
  std::vector<double> joint_grad;
  std::vector<double> analytic_grad;
  std::vector<double> fd_grad;
  int cg_iters = 0;
  double cg_residual = 0.0;
  std::vector<double> residual_norms;
  double inner_grad_norm = 0.0;
  double damping = 0.0;
  bool used_gauss_newton = false;
  double rel_implicit_vs_analytic = 0.0;
  double rel_fd_vs_analytic = 0.0;
  double rel_implicit_vs_joint = 0.0;
  bool pass = false;
};

// Implicit-function-theorem hypergradient: solve the inner problem, CG
// against Hessian-vector products (exact finite-difference HVP or a
// Gauss-Newton J^T J product on the residual form), then apply the mixed
// cross-gradient term.
HypergradReport hypergradient_implicit(const QuadraticBilevel& problem,
                                       const HypergradOptions& opts = {});

// Runs the toy problem at a seed and scores all three gradient routes:
// pass requires implicit-vs-closed-form < 1e-4, finite-difference < 1e-3,
// and implicit-vs-joint < 1e-3.
HypergradReport verify_hypergrad(uint64_t seed, const HypergradOptions& opts = {});

std::string report_json(const HypergradReport& rep);

}  // namespace fuseseg::bilevel
