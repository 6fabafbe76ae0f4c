#include "fuseseg/bilevel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>

#include "fuseseg/params.hpp"
#include "fuseseg/rng.hpp"

namespace fuseseg::bilevel {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat to_mat(const std::vector<double>& v, int rows, int cols) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = v[static_cast<std::size_t>(i) * cols + j];
  }
  return m;
}

std::vector<double> to_vec(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

double rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return num / (den + 1e-12);
}

double norm2(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

CgResult cg_solve(const VecFn& apply, const std::vector<double>& rhs,
                  const CgOptions& opts) {
  const std::size_t n = rhs.size();
  auto apply_damped = [&](const std::vector<double>& v) {
    std::vector<double> out = apply(v);
    if (out.size() != n) throw TensorError("cg_solve: operator changed dimension");
    if (opts.damping != 0.0) {
      for (std::size_t i = 0; i < n; ++i) out[i] += opts.damping * v[i];
    }
    return out;
  };

  CgResult res;
  res.x.assign(n, 0.0);
  std::vector<double> r = rhs;  // r = rhs - A*0
  std::vector<double> p = r;
  double rhs_norm = norm2(rhs);
  if (rhs_norm == 0.0) {
    res.converged = true;
    return res;
  }
  double rr = 0.0;
  for (double v : r) rr += v * v;
  std::vector<double> best_x = res.x;
  double best_res = 1.0;
  for (int it = 0; it < opts.max_iters; ++it) {
    double rel = std::sqrt(rr) / rhs_norm;
    res.residual_log.push_back(rel);
    if (rel < best_res) {
      best_res = rel;
      best_x = res.x;
    }
    if (rel < opts.tol) {
      res.converged = true;
      break;
    }
    std::vector<double> ap = apply_damped(p);
    double pap = 0.0;
    for (std::size_t i = 0; i < n; ++i) pap += p[i] * ap[i];
    if (pap <= 0.0) break;  // curvature lost; keep best iterate
    double alpha = rr / pap;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    double rr_new = 0.0;
    for (double v : r) rr_new += v * v;
    double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    res.iters = it + 1;
  }
  double final_rel = std::sqrt(rr) / rhs_norm;
  res.residual_log.push_back(final_rel);
  if (!res.converged && best_res < final_rel) {
    res.x = best_x;
    res.residual = best_res;
  } else {
    res.residual = final_rel;
    if (final_rel < opts.tol) res.converged = true;
  }
  return res;
}

QuadraticBilevel QuadraticBilevel::random(uint64_t seed, int n_theta, int n_omega) {
  QuadraticBilevel p;
  p.n_theta = n_theta;
  p.n_omega = n_omega;
  Rng rng = Rng::stream(seed, "bilevel-toy");
  p.r_mat.resize(static_cast<std::size_t>(n_theta) * n_theta);
  for (int i = 0; i < n_theta; ++i) {
    for (int j = 0; j < n_theta; ++j) {
      double base = i == j ? 1.0 : 0.0;
      p.r_mat[static_cast<std::size_t>(i) * n_theta + j] =
          base + 0.3 * rng.normal() / std::sqrt(static_cast<double>(n_theta));
    }
  }
  p.s_mat.resize(static_cast<std::size_t>(n_theta) * n_omega);
  for (auto& v : p.s_mat) v = rng.normal();
  p.target.resize(static_cast<std::size_t>(n_theta));
  for (auto& v : p.target) v = rng.normal();
  p.omega.resize(static_cast<std::size_t>(n_omega));
  for (auto& v : p.omega) v = rng.normal();
  return p;
}

Tensor QuadraticBilevel::residuals(const Tensor& theta, const std::vector<double>& omega_v) const {
  Tensor rt = Tensor::from({n_theta, n_theta}, r_mat);
  Tensor st = Tensor::from({n_theta, n_omega}, s_mat);
  Tensor om = Tensor::from({n_omega, 1}, omega_v);
  Tensor th = reshape(theta, {n_theta, 1});
  return sub(matmul(rt, th), matmul(st, om));
}

Tensor QuadraticBilevel::inner_loss(const Tensor& theta, const std::vector<double>& omega_v) const {
  Tensor r = residuals(theta, omega_v);
  return mul_scalar(sum(mul(r, r)), 0.5);
}

Tensor QuadraticBilevel::outer_loss(const Tensor& theta) const {
  if (!outer_uses_theta) return Tensor::scalar(0.0);
  Tensor t = Tensor::from({n_theta}, target);
  Tensor d = sub(theta, t);
  return mul_scalar(sum(mul(d, d)), 0.5);
}

std::vector<double> QuadraticBilevel::outer_direct_grad() const {
  if (outer_uses_theta) return std::vector<double>(static_cast<std::size_t>(n_omega), 0.0);
  return omega;  // companion outer term 0.5|omega|^2 when theta is unused
}

std::vector<double> QuadraticBilevel::solve_inner_dense() const {
  Mat r = to_mat(r_mat, n_theta, n_theta);
  Mat s = to_mat(s_mat, n_theta, n_omega);
  Vec om = Eigen::Map<const Vec>(omega.data(), n_omega);
  Mat a = r.transpose() * r;
  Vec rhs = r.transpose() * (s * om);
  return to_vec(a.ldlt().solve(rhs));
}

std::vector<double> QuadraticBilevel::closed_form_hypergrad() const {
  if (!outer_uses_theta) return outer_direct_grad();
  Mat r = to_mat(r_mat, n_theta, n_theta);
  Mat s = to_mat(s_mat, n_theta, n_omega);
  Mat a = r.transpose() * r;
  Mat b = r.transpose() * s;
  Vec theta = Eigen::Map<const Vec>(omega.data(), n_omega).size() > 0
                  ? Vec(a.ldlt().solve(b * Eigen::Map<const Vec>(omega.data(), n_omega)))
                  : Vec::Zero(n_theta);
  Vec g = theta - Eigen::Map<const Vec>(target.data(), n_theta);
  return to_vec(b.transpose() * a.ldlt().solve(g));
}

std::vector<double> QuadraticBilevel::fd_hypergrad(double h) const {
  std::vector<double> grad(static_cast<std::size_t>(n_omega), 0.0);
  QuadraticBilevel probe = *this;
  auto outer_at = [&](const std::vector<double>& om) {
    probe.omega = om;
    std::vector<double> theta = probe.solve_inner_dense();
    double acc = 0.0;
    for (int i = 0; i < n_theta; ++i) {
      double d = theta[static_cast<std::size_t>(i)] - target[static_cast<std::size_t>(i)];
      acc += d * d;
    }
    return 0.5 * acc;
  };
  for (int j = 0; j < n_omega; ++j) {
    std::vector<double> op = omega, om = omega;
    op[static_cast<std::size_t>(j)] += h;
    om[static_cast<std::size_t>(j)] -= h;
    grad[static_cast<std::size_t>(j)] = (outer_at(op) - outer_at(om)) / (2.0 * h);
  }
  return grad;
}

std::vector<double> QuadraticBilevel::joint_grad() const {
  // differentiable solution map: theta = (R^T R)^-1 R^T S omega on the tape
  Mat r = to_mat(r_mat, n_theta, n_theta);
  Mat s = to_mat(s_mat, n_theta, n_omega);
  Mat a = r.transpose() * r;
  Mat m = a.ldlt().solve(r.transpose() * s);
  std::vector<double> m_flat(static_cast<std::size_t>(n_theta) * n_omega);
  for (int i = 0; i < n_theta; ++i) {
    for (int j = 0; j < n_omega; ++j) m_flat[static_cast<std::size_t>(i) * n_omega + j] = m(i, j);
  }
  Tensor om = Tensor::from({n_omega, 1}, omega, true, "omega");
  Tape tape;
  Tensor loss;
  {
    TapeScope sc(tape);
    Tensor theta = matmul(Tensor::from({n_theta, n_omega}, m_flat), om);
    loss = outer_loss(reshape(theta, {n_theta}));
  }
  if (!outer_uses_theta) return outer_direct_grad();
  tape.backward(loss);
  return om.grad();
}

HypergradReport hypergradient_implicit(const QuadraticBilevel& problem,
                                       const HypergradOptions& opts) {
  HypergradReport rep;
  rep.used_gauss_newton = opts.gauss_newton;
  const int nt = problem.n_theta;

  // parameter group for HVPs
  ParamSet theta_params;
  Tensor theta = theta_params.add(Tensor::zeros({nt}, true, "theta"));

  auto inner_fn = [&]() { return problem.inner_loss(theta, problem.omega); };

  auto exact_hvp = [&](const std::vector<double>& v) { return hvp(inner_fn, theta_params, v); };

  auto gn_hvp = [&](const std::vector<double>& v) {
    // J^T (J v): JVP by central differences on the residuals, VJP by tape
    const std::vector<double> theta0 = theta_params.flat_values();
    double vmax = 0.0, pmax = 0.0;
    for (double x : v) vmax = std::max(vmax, std::abs(x));
    for (double x : theta0) pmax = std::max(pmax, std::abs(x));
    double eps = 1e-4 * (1.0 + pmax) / (vmax + 1e-12);
    std::vector<double> shifted(theta0.size());
    for (std::size_t i = 0; i < theta0.size(); ++i) shifted[i] = theta0[i] + eps * v[i];
    Tensor tp = Tensor::from({nt}, shifted);
    std::vector<double> rp = problem.residuals(tp, problem.omega).values();
    for (std::size_t i = 0; i < theta0.size(); ++i) shifted[i] = theta0[i] - eps * v[i];
    Tensor tm = Tensor::from({nt}, shifted);
    std::vector<double> rm = problem.residuals(tm, problem.omega).values();
    std::vector<double> jv(rp.size());
    for (std::size_t i = 0; i < rp.size(); ++i) jv[i] = (rp[i] - rm[i]) / (2.0 * eps);

    theta_params.zero_grad();
    Tape tape;
    Tensor weighted;
    {
      TapeScope sc(tape);
      Tensor r = problem.residuals(theta, problem.omega);
      weighted = sum(mul(r, Tensor::from(r.shape(), jv)));
    }
    tape.backward(weighted);
    return theta_params.flat_grads();
  };

  VecFn hvp_fn = opts.gauss_newton ? VecFn(gn_hvp) : VecFn(exact_hvp);

  // (1) inner solve: CG on grad(theta) = H theta - H theta* = 0, driven
  // matrix-free from the gradient at theta = 0
  std::vector<double> g0 = gradient(inner_fn, theta_params);
  std::vector<double> rhs(g0.size());
  for (std::size_t i = 0; i < g0.size(); ++i) rhs[i] = -g0[i];
  CgOptions inner_cg;
  inner_cg.max_iters = opts.cg_max_iters;
  inner_cg.tol = opts.cg_tol;
  CgResult inner = cg_solve(hvp_fn, rhs, inner_cg);
  theta_params.set_flat_values(inner.x);

  std::vector<double> inner_grad = gradient(inner_fn, theta_params);
  rep.inner_grad_norm = norm2(inner_grad);
  if (rep.inner_grad_norm > opts.inner_tol) {
    throw TensorError("hypergradient_implicit: inner solve not converged, |grad| = " +
                      std::to_string(rep.inner_grad_norm));
  }

  // (2) outer gradient at theta*
  std::vector<double> outer_g;
  {
    theta_params.zero_grad();
    Tape tape;
    Tensor lo;
    {
      TapeScope sc(tape);
      lo = problem.outer_loss(theta);
    }
    if (problem.outer_uses_theta) {
      tape.backward(lo);
      outer_g = theta_params.flat_grads();
    } else {
      outer_g.assign(static_cast<std::size_t>(nt), 0.0);
    }
  }

  // (3) v = (H + damping I)^-1 g
  double damping = opts.damping;
  if (damping < 0.0) {
    // Hutchinson-style trace probe with a fixed alternating sign vector
    std::vector<double> probe(static_cast<std::size_t>(nt));
    for (int i = 0; i < nt; ++i) probe[static_cast<std::size_t>(i)] = i % 2 == 0 ? 1.0 : -1.0;
    std::vector<double> hp = hvp_fn(probe);
    double tr = 0.0;
    for (int i = 0; i < nt; ++i) tr += probe[static_cast<std::size_t>(i)] * hp[static_cast<std::size_t>(i)];
    damping = 1e-3 * std::abs(tr) / static_cast<double>(nt);
  }
  rep.damping = damping;
  CgOptions solve_cg;
  solve_cg.max_iters = opts.cg_max_iters;
  solve_cg.tol = opts.cg_tol;
  solve_cg.damping = damping;
  CgResult sol = cg_solve(hvp_fn, outer_g, solve_cg);
  rep.cg_iters = sol.iters;
  rep.cg_residual = sol.residual;
  rep.residual_norms = sol.residual_log;

  // (4) mixed cross-gradient term: grad_omega (v . grad_theta inner) by
  // central differences over theta
  const std::vector<double>& v = sol.x;
  const std::vector<double> theta_star = theta_params.flat_values();
  double vmax = 0.0, pmax = 0.0;
  for (double x : v) vmax = std::max(vmax, std::abs(x));
  for (double x : theta_star) pmax = std::max(pmax, std::abs(x));
  double eps = 1e-4 * (1.0 + pmax) / (vmax + 1e-12);

  auto omega_grad_at = [&](const std::vector<double>& theta_v) {
    Tensor om = Tensor::from({problem.n_omega, 1}, problem.omega, true, "omega");
    Tape tape;
    Tensor loss;
    {
      TapeScope sc(tape);
      Tensor rt = Tensor::from({nt, nt}, problem.r_mat);
      Tensor st = Tensor::from({nt, problem.n_omega}, problem.s_mat);
      Tensor th = Tensor::from({nt, 1}, theta_v);
      Tensor r = sub(matmul(rt, th), matmul(st, om));
      loss = mul_scalar(sum(mul(r, r)), 0.5);
    }
    tape.backward(loss);
    return om.grad();
  };
  std::vector<double> tp(theta_star.size()), tm(theta_star.size());
  for (std::size_t i = 0; i < theta_star.size(); ++i) {
    tp[i] = theta_star[i] + eps * v[i];
    tm[i] = theta_star[i] - eps * v[i];
  }
  std::vector<double> gp = omega_grad_at(tp);
  std::vector<double> gm = omega_grad_at(tm);
  std::vector<double> mixed(gp.size());
  for (std::size_t i = 0; i < gp.size(); ++i) mixed[i] = (gp[i] - gm[i]) / (2.0 * eps);

  // (5) hypergrad = direct - W_Hes^T v
  std::vector<double> direct = problem.outer_direct_grad();
  rep.implicit_grad.resize(direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i) rep.implicit_grad[i] = direct[i] - mixed[i];
  for (double x : rep.implicit_grad) {
    if (!std::isfinite(x)) throw TensorError("hypergradient_implicit: non-finite hypergradient");
  }
  return rep;
}

HypergradReport verify_hypergrad(uint64_t seed, const HypergradOptions& opts) {
  QuadraticBilevel problem = QuadraticBilevel::random(seed);
  HypergradOptions o = opts;
  if (opts.damping < 0.0) o.damping = 0.0;  // the toy Hessian is SPD; no damping needed
  HypergradReport rep = hypergradient_implicit(problem, o);
  rep.seed = seed;
  rep.analytic_grad = problem.closed_form_hypergrad();
  rep.fd_grad = problem.fd_hypergrad();
  rep.joint_grad = problem.joint_grad();
  rep.rel_implicit_vs_analytic = rel_diff(rep.implicit_grad, rep.analytic_grad);
  rep.rel_fd_vs_analytic = rel_diff(rep.fd_grad, rep.analytic_grad);
  rep.rel_implicit_vs_joint = rel_diff(rep.implicit_grad, rep.joint_grad);
  rep.pass = rep.rel_implicit_vs_analytic < 1e-4 && rep.rel_fd_vs_analytic < 1e-3 &&
             rep.rel_implicit_vs_joint < 1e-3;
  for (const auto* v : {&rep.implicit_grad, &rep.analytic_grad, &rep.fd_grad, &rep.joint_grad}) {
    for (double x : *v) {
      if (!std::isfinite(x)) rep.pass = false;
    }
  }
  return rep;
}

std::string report_json(const HypergradReport& rep) {
  std::ostringstream os;
  os.precision(12);
  auto arr = [&](const std::vector<double>& v) {
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) os << ',';
      os << v[i];
    }
    os << ']';
  };
  os << "{\"seed\":" << rep.seed << ",\"pass\":" << (rep.pass ? "true" : "false");
  os << ",\"implicit_grad\":";
  arr(rep.implicit_grad);
  os << ",\"joint_grad\":";
  arr(rep.joint_grad);
  os << ",\"analytic_grad\":";
  arr(rep.analytic_grad);
  os << ",\"fd_grad\":";
  arr(rep.fd_grad);
  os << ",\"cg_iters\":" << rep.cg_iters << ",\"cg_residual\":" << rep.cg_residual;
  os << ",\"residual_norms\":";
  arr(rep.residual_norms);
  os << ",\"inner_grad_norm\":" << rep.inner_grad_norm;
  os << ",\"damping\":" << rep.damping;
  os << ",\"gauss_newton\":" << (rep.used_gauss_newton ? "true" : "false");
  os << ",\"tolerances\":{\"implicit_vs_analytic\":1e-4,\"fd_vs_analytic\":1e-3,"
        "\"implicit_vs_joint\":1e-3}";
  os << ",\"rel_implicit_vs_analytic\":" << rep.rel_implicit_vs_analytic;
  os << ",\"rel_fd_vs_analytic\":" << rep.rel_fd_vs_analytic;
  os << ",\"rel_implicit_vs_joint\":" << rep.rel_implicit_vs_joint;
  os << "}";
  return os.str();
}

}  // namespace fuseseg::bilevel
