#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fuseseg/tensor.hpp"

namespace fuseseg {

namespace {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic,
                                                   Eigen::RowMajor>>;

// col is [Ci*kh*kw, OH*OW]; entry ((ci*kh+ki)*kw+kj, oh*OW+ow) holds
// x[ci, oh+ki-pad, ow+kj-pad] with zeros outside.
void im2col(const double* x, int ci, int h, int w, int kh, int kw, int pad,
            int oh, int ow, std::vector<double>& col) {
  col.assign(static_cast<std::size_t>(ci) * kh * kw * oh * ow, 0.0);
  for (int c = 0; c < ci; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        double* row = col.data() +
                      (static_cast<std::size_t>(c) * kh * kw +
                       static_cast<std::size_t>(ki) * kw + kj) *
                          oh * ow;
        for (int i = 0; i < oh; ++i) {
          int src_i = i + ki - pad;
          if (src_i < 0 || src_i >= h) continue;
          int j0 = std::max(0, pad - kj);
          int j1 = std::min(ow, w + pad - kj);
          const double* src = xc + static_cast<std::size_t>(src_i) * w + (j0 + kj - pad);
          std::copy(src, src + std::max(0, j1 - j0), row + static_cast<std::size_t>(i) * ow + j0);
        }
      }
    }
  }
}

void col2im_add(const std::vector<double>& col, int ci, int h, int w, int kh,
                int kw, int pad, int oh, int ow, double* dx) {
  for (int c = 0; c < ci; ++c) {
    double* xc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const double* row = col.data() +
                            (static_cast<std::size_t>(c) * kh * kw +
                             static_cast<std::size_t>(ki) * kw + kj) *
                                oh * ow;
        for (int i = 0; i < oh; ++i) {
          int dst_i = i + ki - pad;
          if (dst_i < 0 || dst_i >= h) continue;
          int j0 = std::max(0, pad - kj);
          int j1 = std::min(ow, w + pad - kj);
          double* dst = xc + static_cast<std::size_t>(dst_i) * w + (j0 + kj - pad);
          const double* src = row + static_cast<std::size_t>(i) * ow + j0;
          for (int j = 0; j < j1 - j0; ++j) dst[j] += src[j];
        }
      }
    }
  }
}

struct ConvDims {
  int ci, h, w, co, kh, kw, pad, oh, ow;
};

void conv_forward(const double* x, const double* wt, const ConvDims& d,
                  double* out) {
  std::vector<double> col;
  im2col(x, d.ci, d.h, d.w, d.kh, d.kw, d.pad, d.oh, d.ow, col);
  ConstMatMap wm(wt, d.co, d.ci * d.kh * d.kw);
  ConstMatMap cm(col.data(), d.ci * d.kh * d.kw, d.oh * d.ow);
  MatMap om(out, d.co, d.oh * d.ow);
  om.noalias() = wm * cm;
}

// dx += adjoint of conv_forward applied to g.
void conv_input_grad(const double* g, const double* wt, const ConvDims& d,
                     double* dx) {
  std::vector<double> dcol(static_cast<std::size_t>(d.ci) * d.kh * d.kw * d.oh * d.ow);
  ConstMatMap wm(wt, d.co, d.ci * d.kh * d.kw);
  ConstMatMap gm(g, d.co, d.oh * d.ow);
  MatMap dcm(dcol.data(), d.ci * d.kh * d.kw, d.oh * d.ow);
  dcm.noalias() = wm.transpose() * gm;
  col2im_add(dcol, d.ci, d.h, d.w, d.kh, d.kw, d.pad, d.oh, d.ow, dx);
}

// dw += g * im2col(x)^T
void conv_weight_grad(const double* x, const double* g, const ConvDims& d,
                      double* dw) {
  std::vector<double> col;
  im2col(x, d.ci, d.h, d.w, d.kh, d.kw, d.pad, d.oh, d.ow, col);
  ConstMatMap gm(g, d.co, d.oh * d.ow);
  ConstMatMap cm(col.data(), d.ci * d.kh * d.kw, d.oh * d.ow);
  MatMap dwm(dw, d.co, d.ci * d.kh * d.kw);
  dwm.noalias() += gm * cm.transpose();
}

void check_image3(const char* op, const Tensor& x) {
  if (x.ndim() != 3) {
    throw TensorError(std::string(op) + ": expects [C,H,W], got " + shape_str(x.shape()));
  }
}

// 1-D zero-padded convolution along one spatial axis of [C,H,W].
std::vector<double> conv1d_axis(const std::vector<double>& v, int c, int h,
                                int w, int axis, const std::vector<double>& k,
                                int pad, int& nh, int& nw) {
  const int klen = static_cast<int>(k.size());
  nh = axis == 0 ? h + 2 * pad - klen + 1 : h;
  nw = axis == 1 ? w + 2 * pad - klen + 1 : w;
  std::vector<double> out(static_cast<std::size_t>(c) * nh * nw, 0.0);
  for (int cc = 0; cc < c; ++cc) {
    const double* src = v.data() + static_cast<std::size_t>(cc) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(cc) * nh * nw;
    for (int i = 0; i < nh; ++i) {
      for (int j = 0; j < nw; ++j) {
        double acc = 0.0;
        for (int t = 0; t < klen; ++t) {
          int si = axis == 0 ? i + t - pad : i;
          int sj = axis == 1 ? j + t - pad : j;
          if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
          acc += k[static_cast<std::size_t>(t)] * src[static_cast<std::size_t>(si) * w + sj];
        }
        dst[static_cast<std::size_t>(i) * nw + j] = acc;
      }
    }
  }
  return out;
}

void acc_into(const Tensor& p, const std::function<void(std::vector<double>&)>& f) {
  if (!p.requires_grad()) return;
  p.node()->ensure_grad();
  f(p.node()->grad);
}

Tensor make_spatial_op(Shape shape, std::vector<double> val,
                       std::vector<Tensor> parents,
                       std::function<void(Node&)> backprop) {
  // mirrors make_op in tensor.cpp; rebuilt here to keep translation units
  // independent
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (active_tape() != nullptr && rg) {
    n->requires_grad = true;
    n->leaf = false;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
    active_tape()->record(n);
  }
  return wrap_node(std::move(n));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad) {
  check_image3("conv2d", x);
  if (w.ndim() != 4 || w.dim(1) != x.dim(0)) {
    throw TensorError("conv2d: weight " + shape_str(w.shape()) +
                      " does not match input " + shape_str(x.shape()));
  }
  ConvDims d;
  d.ci = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.co = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.pad = pad;
  d.oh = d.h + 2 * pad - d.kh + 1;
  d.ow = d.w + 2 * pad - d.kw + 1;
  if (d.oh <= 0 || d.ow <= 0) {
    throw TensorError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.size() != static_cast<std::size_t>(d.co)) {
    throw TensorError("conv2d: bias must have " + std::to_string(d.co) + " entries");
  }
  std::vector<double> v(static_cast<std::size_t>(d.co) * d.oh * d.ow);
  conv_forward(x.values().data(), w.values().data(), d, v.data());
  if (bias.defined()) {
    for (int co = 0; co < d.co; ++co) {
      double b = bias.values()[static_cast<std::size_t>(co)];
      double* row = v.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
      for (int i = 0; i < d.oh * d.ow; ++i) row[i] += b;
    }
  }
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_spatial_op({d.co, d.oh, d.ow}, std::move(v), std::move(parents),
                         [x, w, bias, d](Node& self) {
                           acc_into(x, [&](std::vector<double>& g) {
                             conv_input_grad(self.grad.data(), w.values().data(), d, g.data());
                           });
                           acc_into(w, [&](std::vector<double>& g) {
                             conv_weight_grad(x.values().data(), self.grad.data(), d, g.data());
                           });
                           if (bias.defined()) {
                             acc_into(bias, [&](std::vector<double>& g) {
                               for (int co = 0; co < d.co; ++co) {
                                 const double* row = self.grad.data() +
                                                     static_cast<std::size_t>(co) * d.oh * d.ow;
                                 double t = 0.0;
                                 for (int i = 0; i < d.oh * d.ow; ++i) t += row[i];
                                 g[static_cast<std::size_t>(co)] += t;
                               }
                             });
                           }
                         });
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int pad) {
  check_image3("conv2d_transpose", x);
  if (w.ndim() != 4 || w.dim(0) != x.dim(0)) {
    throw TensorError("conv2d_transpose: weight " + shape_str(w.shape()) +
                      " does not match input " + shape_str(x.shape()));
  }
  // The op is the adjoint of conv2d, so ConvDims describe the matching
  // forward convolution whose output side is our input x.
  ConvDims d;
  d.co = x.dim(0);       // conv output channels == our input channels
  d.oh = x.dim(1);
  d.ow = x.dim(2);
  d.ci = w.dim(1);       // conv input channels == our output channels
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.pad = pad;
  d.h = d.oh + d.kh - 1 - 2 * pad;
  d.w = d.ow + d.kw - 1 - 2 * pad;
  if (d.h <= 0 || d.w <= 0) {
    throw TensorError("conv2d_transpose: output collapses for " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.size() != static_cast<std::size_t>(d.ci)) {
    throw TensorError("conv2d_transpose: bias must have " + std::to_string(d.ci) + " entries");
  }
  std::vector<double> v(static_cast<std::size_t>(d.ci) * d.h * d.w, 0.0);
  conv_input_grad(x.values().data(), w.values().data(), d, v.data());
  if (bias.defined()) {
    for (int c = 0; c < d.ci; ++c) {
      double b = bias.values()[static_cast<std::size_t>(c)];
      double* row = v.data() + static_cast<std::size_t>(c) * d.h * d.w;
      for (int i = 0; i < d.h * d.w; ++i) row[i] += b;
    }
  }
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_spatial_op({d.ci, d.h, d.w}, std::move(v), std::move(parents),
                         [x, w, bias, d](Node& self) {
                           acc_into(x, [&](std::vector<double>& g) {
                             std::vector<double> tmp(g.size());
                             conv_forward(self.grad.data(), w.values().data(), d, tmp.data());
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
                           });
                           acc_into(w, [&](std::vector<double>& g) {
                             conv_weight_grad(self.grad.data(), x.values().data(), d, g.data());
                           });
                           if (bias.defined()) {
                             acc_into(bias, [&](std::vector<double>& g) {
                               for (int c = 0; c < d.ci; ++c) {
                                 const double* row = self.grad.data() +
                                                     static_cast<std::size_t>(c) * d.h * d.w;
                                 double t = 0.0;
                                 for (int i = 0; i < d.h * d.w; ++i) t += row[i];
                                 g[static_cast<std::size_t>(c)] += t;
                               }
                             });
                           }
                         });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int pad) {
  check_image3("depthwise_conv2d", x);
  if (w.ndim() != 4 || w.dim(0) != x.dim(0) || w.dim(1) != 1) {
    throw TensorError("depthwise_conv2d: weight must be [C,1,kh,kw] for input " +
                      shape_str(x.shape()) + ", got " + shape_str(w.shape()));
  }
  const int c = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const int kh = w.dim(2), kw = w.dim(3);
  const int oh = h + 2 * pad - kh + 1, ow = ww + 2 * pad - kw + 1;
  if (oh <= 0 || ow <= 0) throw TensorError("depthwise_conv2d: kernel too large");
  if (bias.defined() && bias.size() != static_cast<std::size_t>(c)) {
    throw TensorError("depthwise_conv2d: bias must have " + std::to_string(c) + " entries");
  }
  std::vector<double> v(static_cast<std::size_t>(c) * oh * ow, 0.0);
  for (int cc = 0; cc < c; ++cc) {
    const double* xc = x.values().data() + static_cast<std::size_t>(cc) * h * ww;
    const double* wc = w.values().data() + static_cast<std::size_t>(cc) * kh * kw;
    double* oc = v.data() + static_cast<std::size_t>(cc) * oh * ow;
    double b = bias.defined() ? bias.values()[static_cast<std::size_t>(cc)] : 0.0;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double acc = b;
        for (int ki = 0; ki < kh; ++ki) {
          int si = i + ki - pad;
          if (si < 0 || si >= h) continue;
          for (int kj = 0; kj < kw; ++kj) {
            int sj = j + kj - pad;
            if (sj < 0 || sj >= ww) continue;
            acc += wc[static_cast<std::size_t>(ki) * kw + kj] * xc[static_cast<std::size_t>(si) * ww + sj];
          }
        }
        oc[static_cast<std::size_t>(i) * ow + j] = acc;
      }
    }
  }
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_spatial_op(
      {c, oh, ow}, std::move(v), std::move(parents),
      [x, w, bias, c, h, ww, kh, kw, oh, ow, pad](Node& self) {
        acc_into(x, [&](std::vector<double>& g) {
          for (int cc = 0; cc < c; ++cc) {
            const double* wc = w.values().data() + static_cast<std::size_t>(cc) * kh * kw;
            const double* gc = self.grad.data() + static_cast<std::size_t>(cc) * oh * ow;
            double* dxc = g.data() + static_cast<std::size_t>(cc) * h * ww;
            for (int i = 0; i < oh; ++i) {
              for (int j = 0; j < ow; ++j) {
                double gv = gc[static_cast<std::size_t>(i) * ow + j];
                for (int ki = 0; ki < kh; ++ki) {
                  int si = i + ki - pad;
                  if (si < 0 || si >= h) continue;
                  for (int kj = 0; kj < kw; ++kj) {
                    int sj = j + kj - pad;
                    if (sj < 0 || sj >= ww) continue;
                    dxc[static_cast<std::size_t>(si) * ww + sj] += gv * wc[static_cast<std::size_t>(ki) * kw + kj];
                  }
                }
              }
            }
          }
        });
        acc_into(w, [&](std::vector<double>& g) {
          for (int cc = 0; cc < c; ++cc) {
            const double* xc = x.values().data() + static_cast<std::size_t>(cc) * h * ww;
            const double* gc = self.grad.data() + static_cast<std::size_t>(cc) * oh * ow;
            double* dwc = g.data() + static_cast<std::size_t>(cc) * kh * kw;
            for (int ki = 0; ki < kh; ++ki) {
              for (int kj = 0; kj < kw; ++kj) {
                double acc = 0.0;
                for (int i = 0; i < oh; ++i) {
                  int si = i + ki - pad;
                  if (si < 0 || si >= h) continue;
                  for (int j = 0; j < ow; ++j) {
                    int sj = j + kj - pad;
                    if (sj < 0 || sj >= ww) continue;
                    acc += gc[static_cast<std::size_t>(i) * ow + j] * xc[static_cast<std::size_t>(si) * ww + sj];
                  }
                }
                dwc[static_cast<std::size_t>(ki) * kw + kj] += acc;
              }
            }
          }
        });
        if (bias.defined()) {
          acc_into(bias, [&](std::vector<double>& g) {
            for (int cc = 0; cc < c; ++cc) {
              const double* gc = self.grad.data() + static_cast<std::size_t>(cc) * oh * ow;
              double t = 0.0;
              for (int i = 0; i < oh * ow; ++i) t += gc[i];
              g[static_cast<std::size_t>(cc)] += t;
            }
          });
        }
      });
}

Tensor avg_pool2(const Tensor& x) {
  check_image3("avg_pool2", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw TensorError("avg_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const int oh = h / 2, ow = w / 2;
  std::vector<double> v(static_cast<std::size_t>(c) * oh * ow);
  for (int cc = 0; cc < c; ++cc) {
    const double* xc = x.values().data() + static_cast<std::size_t>(cc) * h * w;
    double* oc = v.data() + static_cast<std::size_t>(cc) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const double* p = xc + static_cast<std::size_t>(2 * i) * w + 2 * j;
        oc[static_cast<std::size_t>(i) * ow + j] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return make_spatial_op({c, oh, ow}, std::move(v), {x},
                         [x, c, h, w, oh, ow](Node& self) {
                           acc_into(x, [&](std::vector<double>& g) {
                             for (int cc = 0; cc < c; ++cc) {
                               const double* gc = self.grad.data() + static_cast<std::size_t>(cc) * oh * ow;
                               double* xc = g.data() + static_cast<std::size_t>(cc) * h * w;
                               for (int i = 0; i < oh; ++i) {
                                 for (int j = 0; j < ow; ++j) {
                                   double gv = 0.25 * gc[static_cast<std::size_t>(i) * ow + j];
                                   double* p = xc + static_cast<std::size_t>(2 * i) * w + 2 * j;
                                   p[0] += gv;
                                   p[1] += gv;
                                   p[w] += gv;
                                   p[w + 1] += gv;
                                 }
                               }
                             }
                           });
                         });
}

Tensor max_pool2(const Tensor& x) {
  check_image3("max_pool2", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw TensorError("max_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const int oh = h / 2, ow = w / 2;
  std::vector<double> v(static_cast<std::size_t>(c) * oh * ow);
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(c) * oh * ow);
  for (int cc = 0; cc < c; ++cc) {
    const double* xc = x.values().data() + static_cast<std::size_t>(cc) * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const int base = 2 * i * w + 2 * j;
        const int cand[4] = {base, base + 1, base + w, base + w + 1};
        int best = cand[0];
        for (int t = 1; t < 4; ++t) {
          if (xc[cand[t]] > xc[best]) best = cand[t];  // ties keep the first
        }
        std::size_t oi = static_cast<std::size_t>(cc) * oh * ow + static_cast<std::size_t>(i) * ow + j;
        v[oi] = xc[best];
        (*arg)[oi] = best;
      }
    }
  }
  return make_spatial_op({c, oh, ow}, std::move(v), {x},
                         [x, arg, c, h, w, oh, ow](Node& self) {
                           acc_into(x, [&](std::vector<double>& g) {
                             for (int cc = 0; cc < c; ++cc) {
                               for (int i = 0; i < oh * ow; ++i) {
                                 std::size_t oi = static_cast<std::size_t>(cc) * oh * ow + i;
                                 g[static_cast<std::size_t>(cc) * h * w + (*arg)[oi]] += self.grad[oi];
                               }
                             }
                           });
                         });
}

Tensor upsample_nearest2(const Tensor& x) {
  check_image3("upsample_nearest2", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = h * 2, ow = w * 2;
  std::vector<double> v(static_cast<std::size_t>(c) * oh * ow);
  for (int cc = 0; cc < c; ++cc) {
    const double* xc = x.values().data() + static_cast<std::size_t>(cc) * h * w;
    double* oc = v.data() + static_cast<std::size_t>(cc) * oh * ow;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double val = xc[static_cast<std::size_t>(i) * w + j];
        double* p = oc + static_cast<std::size_t>(2 * i) * ow + 2 * j;
        p[0] = val;
        p[1] = val;
        p[ow] = val;
        p[ow + 1] = val;
      }
    }
  }
  return make_spatial_op({c, oh, ow}, std::move(v), {x},
                         [x, c, h, w, oh, ow](Node& self) {
                           acc_into(x, [&](std::vector<double>& g) {
                             for (int cc = 0; cc < c; ++cc) {
                               const double* gc = self.grad.data() + static_cast<std::size_t>(cc) * oh * ow;
                               double* xc = g.data() + static_cast<std::size_t>(cc) * h * w;
                               for (int i = 0; i < h; ++i) {
                                 for (int j = 0; j < w; ++j) {
                                   const double* p = gc + static_cast<std::size_t>(2 * i) * ow + 2 * j;
                                   xc[static_cast<std::size_t>(i) * w + j] += p[0] + p[1] + p[ow] + p[ow + 1];
                                 }
                               }
                             }
                           });
                         });
}

Tensor gaussian_blur(const Tensor& x, int radius, double sigma, int pad) {
  check_image3("gaussian_blur", x);
  if (radius < 1) throw TensorError("gaussian_blur: radius must be >= 1");
  if (pad != 0 && pad != radius) {
    throw TensorError("gaussian_blur: pad must be 0 (valid) or radius (same)");
  }
  const int klen = 2 * radius + 1;
  auto kernel = std::make_shared<std::vector<double>>(klen);
  double norm = 0.0;
  for (int t = 0; t < klen; ++t) {
    double d = static_cast<double>(t - radius);
    (*kernel)[static_cast<std::size_t>(t)] = std::exp(-0.5 * d * d / (sigma * sigma));
    norm += (*kernel)[static_cast<std::size_t>(t)];
  }
  for (double& k : *kernel) k /= norm;

  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  int th, tw, oh, ow;
  std::vector<double> tmp = conv1d_axis(x.values(), c, h, w, 1, *kernel, pad, th, tw);
  std::vector<double> v = conv1d_axis(tmp, c, th, tw, 0, *kernel, pad, oh, ow);
  if (oh <= 0 || ow <= 0) throw TensorError("gaussian_blur: window exceeds image");
  return make_spatial_op(
      {c, oh, ow}, std::move(v), {x},
      [x, kernel, radius, pad, c, h, w, oh, ow, tw](Node& self) {
        acc_into(x, [&](std::vector<double>& g) {
          // adjoint of zero-padded convolution: same (symmetric) kernel,
          // complementary padding 2*radius - pad
          int apad = 2 * radius - pad;
          int ih, iw;
          std::vector<double> t1 =
              conv1d_axis(self.grad, c, oh, ow, 0, *kernel, apad, ih, iw);
          int fh, fw;
          std::vector<double> t2 = conv1d_axis(t1, c, ih, iw, 1, *kernel, apad, fh, fw);
          (void)tw;
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += t2[i];
        });
      });
}

namespace {

// spatial buffer is [c,h,w]; packed buffer is [c*b*b, h/b, w/b]
void pack_blocks(const double* spatial, double* packed, int c, int h, int w, int b) {
  const int oh = h / b, ow = w / b;
  for (int cc = 0; cc < c; ++cc) {
    for (int di = 0; di < b; ++di) {
      for (int dj = 0; dj < b; ++dj) {
        const std::size_t oc = static_cast<std::size_t>(cc) * b * b + static_cast<std::size_t>(di) * b + dj;
        for (int i = 0; i < oh; ++i) {
          for (int j = 0; j < ow; ++j) {
            packed[oc * oh * ow + static_cast<std::size_t>(i) * ow + j] =
                spatial[static_cast<std::size_t>(cc) * h * w +
                        static_cast<std::size_t>(i * b + di) * w + (j * b + dj)];
          }
        }
      }
    }
  }
}

void unpack_blocks(const double* packed, double* spatial, int c, int h, int w, int b) {
  const int oh = h / b, ow = w / b;
  for (int cc = 0; cc < c; ++cc) {
    for (int di = 0; di < b; ++di) {
      for (int dj = 0; dj < b; ++dj) {
        const std::size_t oc = static_cast<std::size_t>(cc) * b * b + static_cast<std::size_t>(di) * b + dj;
        for (int i = 0; i < oh; ++i) {
          for (int j = 0; j < ow; ++j) {
            spatial[static_cast<std::size_t>(cc) * h * w +
                    static_cast<std::size_t>(i * b + di) * w + (j * b + dj)] =
                packed[oc * oh * ow + static_cast<std::size_t>(i) * ow + j];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor space_to_depth(const Tensor& x, int block) {
  check_image3("space_to_depth", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (block < 1 || h % block != 0 || w % block != 0) {
    throw TensorError("space_to_depth: block " + std::to_string(block) +
                      " does not divide " + shape_str(x.shape()));
  }
  std::vector<double> v(x.size());
  pack_blocks(x.values().data(), v.data(), c, h, w, block);
  return make_spatial_op({c * block * block, h / block, w / block}, std::move(v),
                         {x}, [x, c, h, w, block](Node& self) {
                           acc_into(x, [&](std::vector<double>& g) {
                             std::vector<double> tmp(g.size());
                             unpack_blocks(self.grad.data(), tmp.data(), c, h, w, block);
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
                           });
                         });
}

Tensor depth_to_space(const Tensor& x, int block) {
  check_image3("depth_to_space", x);
  const int cb = x.dim(0), oh = x.dim(1), ow = x.dim(2);
  if (block < 1 || cb % (block * block) != 0) {
    throw TensorError("depth_to_space: channels " + std::to_string(cb) +
                      " not divisible by block^2");
  }
  const int c = cb / (block * block);
  const int h = oh * block, w = ow * block;
  std::vector<double> v(x.size());
  unpack_blocks(x.values().data(), v.data(), c, h, w, block);
  return make_spatial_op({c, h, w}, std::move(v), {x},
                         [x, c, h, w, block](Node& self) {
                           acc_into(x, [&](std::vector<double>& g) {
                             std::vector<double> tmp(g.size());
                             pack_blocks(self.grad.data(), tmp.data(), c, h, w, block);
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
                           });
                         });
}

namespace {

// replicate-pad one pixel on each spatial side
Tensor replicate_pad1(const Tensor& x) {
  const int h = x.dim(1), w = x.dim(2);
  Tensor rows = concat({slice(x, 1, 0, 1), x, slice(x, 1, h - 1, h)}, 1);
  return concat({slice(rows, 2, 0, 1), rows, slice(rows, 2, w - 1, w)}, 2);
}

}  // namespace

Tensor sobel_magnitude(const Tensor& input) {
  Tensor x = input;
  bool was2d = false;
  if (input.ndim() == 2) {
    x = reshape(input, {1, input.dim(0), input.dim(1)});
    was2d = true;
  }
  check_image3("sobel_magnitude", x);
  const int c = x.dim(0);
  std::vector<double> gx_k, gy_k;
  const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  for (int cc = 0; cc < c; ++cc) {
    gx_k.insert(gx_k.end(), kx, kx + 9);
    gy_k.insert(gy_k.end(), ky, ky + 9);
  }
  Tensor wx = Tensor::from({c, 1, 3, 3}, std::move(gx_k));
  Tensor wy = Tensor::from({c, 1, 3, 3}, std::move(gy_k));
  // replicate borders: flat regions have zero gradient magnitude everywhere
  Tensor padded = replicate_pad1(x);
  Tensor gx = depthwise_conv2d(padded, wx, Tensor(), 0);
  Tensor gy = depthwise_conv2d(padded, wy, Tensor(), 0);
  Tensor out = mul_scalar(add(abs(gx), abs(gy)), 0.5);
  if (was2d) out = reshape(out, {input.dim(0), input.dim(1)});
  return out;
}

}  // namespace fuseseg
