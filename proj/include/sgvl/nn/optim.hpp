#pragma once

// Named parameter sets, Adam with bias correction, the Noam schedule and
// global-norm gradient clipping.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sgvl/error.hpp"
#include "sgvl/nn/tensor.hpp"

namespace sgvl::nn {

// Parameters in registration order. Names are unique.
template <class T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }

  std::size_t size() const { return items_.size(); }
  const std::string& name(std::size_t i) const { return items_[i].first; }
  Tensor<T>& operator[](std::size_t i) { return items_[i].second; }
  const Tensor<T>& operator[](std::size_t i) const { return items_[i].second; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named " + name);
    return items_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (auto& [_, t] : items_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m, v;

  void init(const ParamStore<T>& params) {
    m.clear();
    v.clear();
    for (auto& [_, p] : params) {
      m.emplace_back(p.numel(), T{});
      v.emplace_back(p.numel(), T{});
    }
    t = 0;
  }
};

// One Adam update; gradients are zeroed afterwards.
template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& st, double lr) {
  if (st.m.size() != params.size()) st.init(params);
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad() && params[i].numel() > 0)
      throw NumericError("parameter " + params.name(i) + " has no gradient");
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
  const T step = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(st.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto w = p.data();
    auto g = p.grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != w.size()) throw ShapeError("adam moments do not match parameter " + params.name(i));
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      w[k] -= step * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
    p.zero_grad();
  }
}

// Noam schedule scaled so that step == warmup yields `peak`.
inline double noam_lr(std::uint64_t step, std::uint64_t d_model, std::uint64_t warmup, double peak) {
  if (step < 1 || warmup < 1) throw ConfigError("noam_lr needs step >= 1 and warmup >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  const double raw = std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
  const double at_peak = std::pow(static_cast<double>(d_model), -0.5) * std::pow(w, -0.5);
  return peak * raw / at_peak;
}

// Rescales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& params, double max_norm) {
  double sq = 0;
  for (auto& [_, p] : params)
    if (p.has_grad())
      for (auto g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [_, p] : params)
      if (p.has_grad())
        for (auto& g : p.grad()) g *= s;
  }
  return norm;
}

}  // namespace sgvl::nn
