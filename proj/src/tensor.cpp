#include "fuseseg/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fuseseg {

namespace {

thread_local Tape* g_tape = nullptr;

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic,
                                                   Eigen::RowMajor>>;

constexpr double kDivGuard = 1e-12;
constexpr double kLogGuard = 1e-12;
constexpr double kExpClamp = 700.0;

double guarded_den(double d) { return d >= 0.0 ? d + kDivGuard : d - kDivGuard; }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

bool grad_wanted(const std::vector<Tensor>& parents) {
  for (const auto& p : parents) {
    if (p.requires_grad()) return true;
  }
  return false;
}

Tensor make_op(Shape shape, std::vector<double> val,
               std::vector<Tensor> parents,
               std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  if (g_tape != nullptr && grad_wanted(parents)) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
    g_tape->record(n);
  }
  return wrap_node(std::move(n));
}

// Accumulate into a parent only when it participates in differentiation.
void acc_grad(const Tensor& p, const std::function<void(std::vector<double>&)>& f) {
  if (!p.requires_grad()) return;
  p.node()->ensure_grad();
  f(p.node()->grad);
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope(Tape& t) : prev_(g_tape) { g_tape = &t; }
TapeScope::~TapeScope() { g_tape = prev_; }

Tensor wrap_node(std::shared_ptr<Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad,
                    std::string name) {
  for (int d : shape) {
    if (d <= 0) throw TensorError("tensor: non-positive extent in " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    throw TensorError("tensor: " + shape_str(shape) + " does not hold " +
                      std::to_string(values.size()) + " values");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(values);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return wrap_node(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad, std::string name) {
  std::vector<double> v(numel(shape), 0.0);
  return from(std::move(shape), std::move(v), requires_grad, std::move(name));
}

Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> vals(numel(shape), v);
  return from(std::move(shape), std::move(vals));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::scalar_value() const {
  if (!n_ || n_->val.size() != 1) {
    throw TensorError("scalar_value: tensor is not scalar");
  }
  return n_->val[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw TensorError("grad: absent on tensor '" + n_->name + "'");
  return n_->grad;
}

void Tensor::zero_grad() const {
  if (n_ && !n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw TensorError("backward: loss must be a scalar tensor");
  }
  if (nodes.empty()) throw TensorError("backward: tape is empty");
  Node* ln = loss.node().get();
  bool on_tape = false;
  for (const auto& n : nodes) {
    if (n.get() == ln) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) throw TensorError("backward: loss was not recorded on this tape");
  for (const auto& n : nodes) {
    if (!n->leaf) n->grad.clear();
  }
  ln->ensure_grad();
  ln->grad[0] += 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node& nd = **it;
    if (!nd.grad.empty() && nd.backprop) nd.backprop(nd);
  }
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    acc_grad(b, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    acc_grad(b, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.values()[i];
    });
    acc_grad(b, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.values()[i];
    });
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] / guarded_den(b.values()[i]);
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / guarded_den(b.values()[i]);
    });
    acc_grad(b, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = guarded_den(b.values()[i]);
        g[i] -= self.grad[i] * a.values()[i] / (d * d);
      }
    });
  });
}

Tensor neg(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -a.values()[i];
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

Tensor abs(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(a.values()[i]);
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = a.values()[i];
        double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        g[i] += self.grad[i] * s;
      }
    });
  });
}

Tensor max(const Tensor& a, const Tensor& b) {
  check_same_shape("max", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(a.values()[i], b.values()[i]);
  return make_op(a.shape(), std::move(v), {a, b}, [a, b](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a.values()[i] >= b.values()[i]) g[i] += self.grad[i];
      }
    });
    acc_grad(b, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a.values()[i] < b.values()[i]) g[i] += self.grad[i];
      }
    });
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = std::exp(std::clamp(a.values()[i], -kExpClamp, kExpClamp));
  }
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = a.values()[i];
        if (x > -kExpClamp && x < kExpClamp) g[i] += self.grad[i] * self.val[i];
      }
    });
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.values()[i] + kLogGuard);
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (a.values()[i] + kLogGuard);
    });
  });
}

Tensor sqrt(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(a.values()[i] + kLogGuard);
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 0.5 / self.val[i];
    });
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = a.values()[i];
    v[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = self.val[i];
        g[i] += self.grad[i] * s * (1.0 - s);
      }
    });
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a.values()[i] > 0.0) g[i] += self.grad[i];
      }
    });
  });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.values()[i]);
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        double t = self.val[i];
        g[i] += self.grad[i] * (1.0 - t * t);
      }
    });
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c;
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
  return make_op(a.shape(), std::move(v), {a}, [a, c](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
  });
}

Tensor rsub_scalar(double c, const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = c - a.values()[i];
  return make_op(a.shape(), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

Tensor sub_bcast(const Tensor& a, const Tensor& scalar) {
  if (scalar.size() != 1) throw TensorError("sub_bcast: second operand must be scalar");
  double s = scalar.values()[0];
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - s;
  return make_op(a.shape(), std::move(v), {a, scalar}, [a, scalar](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    acc_grad(scalar, [&](std::vector<double>& g) {
      double t = 0.0;
      for (double gv : self.grad) t += gv;
      g[0] -= t;
    });
  });
}

Tensor mul_bcast(const Tensor& a, const Tensor& scalar) {
  if (scalar.size() != 1) throw TensorError("mul_bcast: second operand must be scalar");
  double s = scalar.values()[0];
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * s;
  return make_op(a.shape(), std::move(v), {a, scalar}, [a, scalar](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      double s2 = scalar.values()[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s2;
    });
    acc_grad(scalar, [&](std::vector<double>& g) {
      double t = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) t += self.grad[i] * a.values()[i];
      g[0] += t;
    });
  });
}

Tensor square(const Tensor& a) { return mul(a, a); }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m) * n);
  {
    ConstMatMap am(a.values().data(), m, k);
    ConstMatMap bm(b.values().data(), k, n);
    MatMap om(v.data(), m, n);
    om.noalias() = am * bm;
  }
  Shape os{m, n};
  return make_op(std::move(os), std::move(v), {a, b}, [a, b, m, k, n](Node& self) {
    ConstMatMap gm(self.grad.data(), m, n);
    acc_grad(a, [&](std::vector<double>& g) {
      ConstMatMap bm(b.values().data(), k, n);
      MatMap ga(g.data(), m, k);
      ga.noalias() += gm * bm.transpose();
    });
    acc_grad(b, [&](std::vector<double>& g) {
      ConstMatMap am(a.values().data(), m, k);
      MatMap gb(g.data(), k, n);
      gb.noalias() += am.transpose() * gm;
    });
  });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double t = 0.0;
  for (double x : a.values()) t += x;
  return make_op({1}, {t}, {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    });
  });
}

Tensor mean(const Tensor& a) {
  double t = 0.0;
  for (double x : a.values()) t += x;
  double inv = 1.0 / static_cast<double>(a.size());
  return make_op({1}, {t * inv}, {a}, [a, inv](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * inv;
    });
  });
}

namespace {

void axis_strides(const Shape& s, int axis, std::size_t& pre, std::size_t& n,
                  std::size_t& post) {
  pre = 1;
  post = 1;
  for (int i = 0; i < axis; ++i) pre *= static_cast<std::size_t>(s[i]);
  n = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = axis + 1; i < s.size(); ++i) post *= static_cast<std::size_t>(s[i]);
}

Tensor reduce_axis(const Tensor& a, int axis, bool take_mean) {
  if (axis < 0 || axis >= a.ndim()) throw TensorError("reduce: axis out of range");
  std::size_t pre, n, post;
  axis_strides(a.shape(), axis, pre, n, post);
  Shape os;
  for (int i = 0; i < a.ndim(); ++i) {
    if (i != axis) os.push_back(a.dim(i));
  }
  if (os.empty()) os.push_back(1);
  double scale = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
  std::vector<double> v(pre * post, 0.0);
  const auto& av = a.values();
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* src = av.data() + (p * n + j) * post;
      double* dst = v.data() + p * post;
      for (std::size_t q = 0; q < post; ++q) dst[q] += src[q];
    }
  }
  if (take_mean) {
    for (double& x : v) x *= scale;
  }
  return make_op(std::move(os), std::move(v), {a},
                 [a, pre, n, post, scale](Node& self) {
                   acc_grad(a, [&](std::vector<double>& g) {
                     for (std::size_t p = 0; p < pre; ++p) {
                       const double* gs = self.grad.data() + p * post;
                       for (std::size_t j = 0; j < n; ++j) {
                         double* gd = g.data() + (p * n + j) * post;
                         for (std::size_t q = 0; q < post; ++q) gd[q] += gs[q] * scale;
                       }
                     }
                   });
                 });
}

}  // namespace

Tensor sum(const Tensor& a, int axis) { return reduce_axis(a, axis, false); }
Tensor mean(const Tensor& a, int axis) { return reduce_axis(a, axis, true); }

Tensor variance(const Tensor& a) {
  const auto& av = a.values();
  const double n = static_cast<double>(av.size());
  double mu = 0.0;
  for (double x : av) mu += x;
  mu /= n;
  double v = 0.0;
  for (double x : av) v += (x - mu) * (x - mu);
  v /= n;
  return make_op({1}, {v}, {a}, [a, mu, n](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      double c = self.grad[0] * 2.0 / n;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * (a.values()[i] - mu);
    });
  });
}

Tensor covariance(const Tensor& a, const Tensor& b) {
  check_same_shape("covariance", a, b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a.values()[i];
    mb += b.values()[i];
  }
  ma /= n;
  mb /= n;
  double c = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    c += (a.values()[i] - ma) * (b.values()[i] - mb);
  }
  c /= n;
  return make_op({1}, {c}, {a, b}, [a, b, ma, mb, n](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      double s = self.grad[0] / n;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (b.values()[i] - mb);
    });
    acc_grad(b, [&](std::vector<double>& g) {
      double s = self.grad[0] / n;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (a.values()[i] - ma);
    });
  });
}

Tensor pearson(const Tensor& a, const Tensor& b) {
  return div(covariance(a, b), sqrt(mul(variance(a), variance(b))));
}

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw TensorError("reshape: " + shape_str(a.shape()) + " -> " +
                      shape_str(shape) + " changes element count");
  }
  std::vector<double> v = a.values();
  return make_op(std::move(shape), std::move(v), {a}, [a](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw TensorError("transpose: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(a.size());
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(j) * m + i] = a.values()[static_cast<std::size_t>(i) * n + j];
  }
  return make_op({n, m}, std::move(v), {a}, [a, m, n](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          g[static_cast<std::size_t>(i) * n + j] += self.grad[static_cast<std::size_t>(j) * m + i];
        }
      }
    });
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) throw TensorError("concat: axis out of range");
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != static_cast<int>(s0.size())) throw TensorError("concat: rank mismatch");
    for (int i = 0; i < p.ndim(); ++i) {
      if (i != axis && p.dim(i) != s0[static_cast<std::size_t>(i)]) {
        throw TensorError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
      }
    }
    total += p.dim(axis);
  }
  Shape os = s0;
  os[static_cast<std::size_t>(axis)] = total;
  std::size_t pre, ntot, post;
  axis_strides(os, axis, pre, ntot, post);
  std::vector<double> v(numel(os));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t pn = static_cast<std::size_t>(p.dim(axis));
    for (std::size_t i = 0; i < pre; ++i) {
      const double* src = p.values().data() + i * pn * post;
      double* dst = v.data() + (i * ntot + off) * post;
      std::copy(src, src + pn * post, dst);
    }
    off += pn;
  }
  auto parts_copy = parts;
  return make_op(std::move(os), std::move(v), parts_copy,
                 [parts_copy, pre, ntot, post, axis](Node& self) {
                   std::size_t off2 = 0;
                   for (const auto& p : parts_copy) {
                     std::size_t pn = static_cast<std::size_t>(p.dim(axis));
                     acc_grad(p, [&](std::vector<double>& g) {
                       for (std::size_t i = 0; i < pre; ++i) {
                         const double* src = self.grad.data() + (i * ntot + off2) * post;
                         double* dst = g.data() + i * pn * post;
                         for (std::size_t j = 0; j < pn * post; ++j) dst[j] += src[j];
                       }
                     });
                     off2 += pn;
                   }
                 });
}

Tensor slice(const Tensor& a, int axis, int start, int stop) {
  if (axis < 0 || axis >= a.ndim()) throw TensorError("slice: axis out of range");
  if (start < 0 || stop > a.dim(axis) || start >= stop) {
    throw TensorError("slice: bad range [" + std::to_string(start) + "," +
                      std::to_string(stop) + ") on " + shape_str(a.shape()));
  }
  std::size_t pre, n, post;
  axis_strides(a.shape(), axis, pre, n, post);
  std::size_t sn = static_cast<std::size_t>(stop - start);
  Shape os = a.shape();
  os[static_cast<std::size_t>(axis)] = stop - start;
  std::vector<double> v(pre * sn * post);
  for (std::size_t i = 0; i < pre; ++i) {
    const double* src = a.values().data() + (i * n + start) * post;
    std::copy(src, src + sn * post, v.data() + i * sn * post);
  }
  return make_op(std::move(os), std::move(v), {a},
                 [a, pre, n, post, sn, start](Node& self) {
                   acc_grad(a, [&](std::vector<double>& g) {
                     for (std::size_t i = 0; i < pre; ++i) {
                       const double* src = self.grad.data() + i * sn * post;
                       double* dst = g.data() + (i * n + start) * post;
                       for (std::size_t j = 0; j < sn * post; ++j) dst[j] += src[j];
                     }
                   });
                 });
}

// ---- normalization ops -------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.ndim()) throw TensorError("softmax: axis out of range");
  std::size_t pre, n, post;
  axis_strides(a.shape(), axis, pre, n, post);
  std::vector<double> v(a.size());
  const auto& av = a.values();
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t q = 0; q < post; ++q) {
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[(p * n + j) * post + q]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double e = std::exp(av[(p * n + j) * post + q] - mx);
        v[(p * n + j) * post + q] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) v[(p * n + j) * post + q] /= z;
    }
  }
  return make_op(a.shape(), std::move(v), {a}, [a, pre, n, post](Node& self) {
    acc_grad(a, [&](std::vector<double>& g) {
      for (std::size_t p = 0; p < pre; ++p) {
        for (std::size_t q = 0; q < post; ++q) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t idx = (p * n + j) * post + q;
            dot += self.grad[idx] * self.val[idx];
          }
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t idx = (p * n + j) * post + q;
            g[idx] += self.val[idx] * (self.grad[idx] - dot);
          }
        }
      }
    });
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (a.ndim() < 1) throw TensorError("layer_norm: rank-0 input");
  const int c = a.dim(a.ndim() - 1);
  if (gain.size() != static_cast<std::size_t>(c) || bias.size() != static_cast<std::size_t>(c)) {
    throw TensorError("layer_norm: gain/bias must have " + std::to_string(c) + " entries");
  }
  const std::size_t rows = a.size() / static_cast<std::size_t>(c);
  const std::size_t cs = static_cast<std::size_t>(c);
  std::vector<double> v(a.size());
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cs;
    double mu = 0.0;
    for (std::size_t j = 0; j < cs; ++j) mu += x[j];
    mu /= static_cast<double>(cs);
    double var = 0.0;
    for (std::size_t j = 0; j < cs; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(cs);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cs; ++j) {
      v[r * cs + j] = gain.values()[j] * (x[j] - mu) * inv + bias.values()[j];
    }
  }
  return make_op(a.shape(), std::move(v), {a, gain, bias},
                 [a, gain, bias, eps, rows, cs](Node& self) {
                   const auto& av = a.values();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* x = av.data() + r * cs;
                     const double* go = self.grad.data() + r * cs;
                     double mu = 0.0;
                     for (std::size_t j = 0; j < cs; ++j) mu += x[j];
                     mu /= static_cast<double>(cs);
                     double var = 0.0;
                     for (std::size_t j = 0; j < cs; ++j) var += (x[j] - mu) * (x[j] - mu);
                     var /= static_cast<double>(cs);
                     double inv = 1.0 / std::sqrt(var + eps);
                     double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                     for (std::size_t j = 0; j < cs; ++j) {
                       double xhat = (x[j] - mu) * inv;
                       double dxhat = go[j] * gain.values()[j];
                       sum_dxhat += dxhat;
                       sum_dxhat_xhat += dxhat * xhat;
                     }
                     acc_grad(a, [&](std::vector<double>& g) {
                       for (std::size_t j = 0; j < cs; ++j) {
                         double xhat = (x[j] - mu) * inv;
                         double dxhat = go[j] * gain.values()[j];
                         g[r * cs + j] += inv * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) /
                                                              static_cast<double>(cs));
                       }
                     });
                     acc_grad(gain, [&](std::vector<double>& g) {
                       for (std::size_t j = 0; j < cs; ++j) g[j] += go[j] * (x[j] - mu) * inv;
                     });
                     acc_grad(bias, [&](std::vector<double>& g) {
                       for (std::size_t j = 0; j < cs; ++j) g[j] += go[j];
                     });
                   }
                 });
}

bool all_finite(const Tensor& a) {
  for (double x : a.values()) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace fuseseg
