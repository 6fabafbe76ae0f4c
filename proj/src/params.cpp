#include "fuseseg/params.hpp"

#include <cmath>

namespace fuseseg {

Tensor ParamSet::add(Tensor t) {
  if (!t.defined()) throw TensorError("ParamSet: undefined tensor");
  if (t.name().empty()) throw TensorError("ParamSet: tensor must be named");
  if (index_.count(t.name())) {
    throw TensorError("ParamSet: duplicate name '" + t.name() + "'");
  }
  index_[t.name()] = items_.size();
  items_.push_back(t);
  return items_.back();
}

ParamSet& ParamSet::merge(const ParamSet& other) {
  for (const auto& t : other.items_) add(t);
  return *this;
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw TensorError("ParamSet: no tensor named '" + name + "'");
  return items_[it->second];
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& t : items_) n += t.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& t : items_) t.zero_grad();
}

std::vector<double> ParamSet::flat_values() const {
  std::vector<double> v;
  v.reserve(total_size());
  for (const auto& t : items_) v.insert(v.end(), t.values().begin(), t.values().end());
  return v;
}

void ParamSet::set_flat_values(const std::vector<double>& v) {
  if (v.size() != total_size()) throw TensorError("ParamSet: flat size mismatch");
  std::size_t off = 0;
  for (auto& t : items_) {
    auto& dst = t.mutable_values();
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(off),
              v.begin() + static_cast<std::ptrdiff_t>(off + t.size()), dst.begin());
    off += t.size();
  }
}

std::vector<double> ParamSet::flat_grads() const {
  std::vector<double> g;
  g.reserve(total_size());
  for (const auto& t : items_) {
    if (t.has_grad()) {
      g.insert(g.end(), t.grad().begin(), t.grad().end());
    } else {
      g.insert(g.end(), t.size(), 0.0);
    }
  }
  return g;
}

std::vector<double> gradient(const LossFn& f, ParamSet& params) {
  params.zero_grad();
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f();
  }
  tape.backward(loss);
  return params.flat_grads();
}

std::vector<double> hvp(const LossFn& f, ParamSet& params,
                        const std::vector<double>& v, const HvpOptions& opts) {
  if (v.size() != params.total_size()) {
    throw TensorError("hvp: direction size " + std::to_string(v.size()) +
                      " != parameter size " + std::to_string(params.total_size()));
  }
  const std::vector<double> p0 = params.flat_values();
  double pmax = 0.0, vmax = 0.0;
  for (double x : p0) pmax = std::max(pmax, std::abs(x));
  for (double x : v) vmax = std::max(vmax, std::abs(x));
  double eps = opts.epsilon > 0.0 ? opts.epsilon : 1e-4 * (1.0 + pmax) / (vmax + 1e-12);

  std::vector<double> shifted(p0.size());
  for (std::size_t i = 0; i < p0.size(); ++i) shifted[i] = p0[i] + eps * v[i];
  params.set_flat_values(shifted);
  std::vector<double> gp = gradient(f, params);
  for (std::size_t i = 0; i < p0.size(); ++i) shifted[i] = p0[i] - eps * v[i];
  params.set_flat_values(shifted);
  std::vector<double> gm = gradient(f, params);
  params.set_flat_values(p0);

  std::vector<double> out(p0.size());
  for (std::size_t i = 0; i < p0.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);

  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!std::isfinite(out[i])) {
      std::size_t off = 0;
      for (const auto& t : params.items()) {
        if (i < off + t.size()) {
          throw TensorError("hvp: non-finite entry in result for parameter '" + t.name() + "'");
        }
        off += t.size();
      }
      throw TensorError("hvp: non-finite entry in result");
    }
  }
  return out;
}

}  // namespace fuseseg
