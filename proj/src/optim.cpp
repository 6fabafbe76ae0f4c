#include "fuseseg/optim.hpp"

#include <cmath>

namespace fuseseg {

void Adam::step(ParamSet& params) {
  for (auto& t : params.items()) {
    auto& st = state_[t.name()];
    if (st.m.empty()) {
      st.m.assign(t.size(), 0.0);
      st.v.assign(t.size(), 0.0);
    } else if (st.m.size() != t.size()) {
      throw TensorError("adam: state size mismatch for '" + t.name() + "'");
    }
    st.t += 1;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
    auto& p = t.mutable_values();
    const bool has_g = t.has_grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double g = has_g ? t.grad()[i] : 0.0;
      g += weight_decay_ * p[i];
      st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
      st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
      double mhat = st.m[i] / bc1;
      double vhat = st.v[i] / bc2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void MomentumSgd::step(ParamSet& params) {
  for (auto& t : params.items()) {
    auto& vel = velocity_[t.name()];
    if (vel.empty()) {
      vel.assign(t.size(), 0.0);
    } else if (vel.size() != t.size()) {
      throw TensorError("sgd: state size mismatch for '" + t.name() + "'");
    }
    auto& p = t.mutable_values();
    const bool has_g = t.has_grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double g = has_g ? t.grad()[i] : 0.0;
      g += weight_decay_ * p[i];
      vel[i] = momentum_ * vel[i] + g;
      p[i] -= lr_ * vel[i];
    }
  }
}

double halving_lr_schedule(double base, int epoch) {
  return base * std::pow(0.5, static_cast<double>(epoch / 20));
}

}  // namespace fuseseg
