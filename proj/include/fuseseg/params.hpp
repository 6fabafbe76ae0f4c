#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fuseseg/tensor.hpp"

namespace fuseseg {

// Named collection of trainable tensors. Order is insertion order and is
// what checkpoints and flat-vector views follow.
class ParamSet {
 public:
  Tensor add(Tensor t);  // t must be named; names unique
  ParamSet& merge(const ParamSet& other);

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  const std::vector<Tensor>& items() const { return items_; }
  std::size_t count() const { return items_.size(); }
  std::size_t total_size() const;

  void zero_grad();

  std::vector<double> flat_values() const;
  void set_flat_values(const std::vector<double>& v);
  // Zeros where a tensor has no grad buffer.
  std::vector<double> flat_grads() const;

 private:
  std::vector<Tensor> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Runs f under a fresh tape and returns d(f)/d(params) as one flat vector.
using LossFn = std::function<Tensor()>;
std::vector<double> gradient(const LossFn& f, ParamSet& params);

struct HvpOptions {
  // Central-difference step; scaled per the contract below when <= 0.
  double epsilon = 0.0;
};

// Hessian-vector product (d^2 f) * v by central finite differences of the
// gradient: eps = 1e-4*(1+max|p|)/(max|v|+1e-12) unless overridden.
std::vector<double> hvp(const LossFn& f, ParamSet& params,
                        const std::vector<double>& v,
                        const HvpOptions& opts = {});

}  // namespace fuseseg
