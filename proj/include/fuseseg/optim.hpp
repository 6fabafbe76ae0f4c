#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "fuseseg/params.hpp"

namespace fuseseg {

// Adam with the usual bias correction. Weight decay is coupled (added to the
// gradient) so a zero-gradient parameter shrinks by lr*wd per step.
class Adam {
 public:
  explicit Adam(double lr, double weight_decay = 0.0)
      : lr_(lr), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ParamSet& params);

 private:
  struct State {
    std::vector<double> m, v;
    int64_t t = 0;
  };
  double lr_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  double weight_decay_;
  std::unordered_map<std::string, State> state_;
};

class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum = 0.9, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ParamSet& params);

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::unordered_map<std::string, std::vector<double>> velocity_;
};

// lr(epoch) = base * 0.5^(epoch/20), epochs counted from 0.
double halving_lr_schedule(double base, int epoch);

}  // namespace fuseseg
