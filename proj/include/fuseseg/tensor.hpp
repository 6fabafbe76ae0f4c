#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace fuseseg {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

class Tensor;

// One value in the computation graph. Nodes are created through Tensor
// factories or ops and owned via shared_ptr; they are never copied.
struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  bool leaf = true;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  std::size_t size() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

// Ordered record of op results; backward walks it once, newest first.
struct Tape {
  std::vector<std::shared_ptr<Node>> nodes;

  void record(std::shared_ptr<Node> n) { nodes.push_back(std::move(n)); }
  void clear() { nodes.clear(); }

  // Seeds d(loss)/d(loss)=1 and accumulates gradients into every
  // requires_grad leaf reachable from `loss`. Leaf grads accumulate across
  // calls; intermediate grads are reset per call.
  void backward(const Tensor& loss);
};

Tape* active_tape();

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Value-semantic handle to a Node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false, std::string name = "");
  static Tensor zeros(Shape shape, bool requires_grad = false,
                      std::string name = "");
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  std::size_t size() const { return n_->val.size(); }

  const std::vector<double>& values() const { return n_->val; }
  // Handles alias shared storage; in-place edits are allowed through
  // const handles (optimizer updates, checkpoint loads).
  std::vector<double>& mutable_values() const { return n_->val; }
  double scalar_value() const;

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return n_ && !n_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad() const;

  const std::string& name() const { return n_->name; }
  void set_name(std::string name) { n_->name = std::move(name); }

  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
  friend Tensor wrap_node(std::shared_ptr<Node> n);
};

Tensor wrap_node(std::shared_ptr<Node> n);

// ---- op set -------------------------------------------------------------
//
// Each op validates shapes, computes values eagerly, and records itself on
// the active tape whenever any input requires grad. Guard conventions:
// log(x) -> log(x + 1e-12), division adds 1e-12 to |denominator| keeping its
// sign, sqrt(x) -> sqrt(x + 1e-12), exp clamps its argument at +-700.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor max(const Tensor& a, const Tensor& b);  // elementwise
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor rsub_scalar(double c, const Tensor& a);  // c - a

// Broadcast a scalar (shape [1]) tensor against an arbitrary tensor.
Tensor sub_bcast(const Tensor& a, const Tensor& scalar);
Tensor mul_bcast(const Tensor& a, const Tensor& scalar);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]

Tensor sum(const Tensor& a);                // -> scalar
Tensor sum(const Tensor& a, int axis);      // drops the axis
Tensor mean(const Tensor& a);               // -> scalar
Tensor mean(const Tensor& a, int axis);

// Pearson statistics over the whole tensor (scalars on the tape).
Tensor variance(const Tensor& a);                     // population
Tensor covariance(const Tensor& a, const Tensor& b);  // population
Tensor pearson(const Tensor& a, const Tensor& b);     // guarded; 0 if flat

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // 2-D
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int stop);

Tensor softmax(const Tensor& a, int axis);
// Normalizes over the last axis; gain/bias have that axis's extent.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// x: [Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout] or undefined. Stride 1,
// zero padding `pad` on both spatial axes.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad);
// x: [Cin,H,W], w: [Cin,Cout,kh,kw]; adjoint of conv2d with the same pad.
Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int pad);
// x: [C,H,W], w: [C,1,kh,kw]; per-channel convolution, zero padding.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int pad);

Tensor avg_pool2(const Tensor& x);          // [C,H,W] -> [C,H/2,W/2]
Tensor max_pool2(const Tensor& x);
Tensor upsample_nearest2(const Tensor& x);  // [C,H,W] -> [C,2H,2W]

// Separable Gaussian blur, radius taps each side. pad=radius keeps the
// spatial size; pad=0 gives the valid region only.
Tensor gaussian_blur(const Tensor& x, int radius, double sigma, int pad);

// 0.5*(|Gx| + |Gy|) with the standard 3x3 Sobel pair, zero padding.
Tensor sobel_magnitude(const Tensor& x);

// [C,H,W] -> [C*b*b, H/b, W/b] block rearrangement and its inverse.
Tensor space_to_depth(const Tensor& x, int block);
Tensor depth_to_space(const Tensor& x, int block);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(double c, const Tensor& a) { return rsub_scalar(c, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor square(const Tensor& a);

bool all_finite(const Tensor& a);

}  // namespace fuseseg
