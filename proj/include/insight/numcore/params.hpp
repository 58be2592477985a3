#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <map>
#include <string>
#include <string_view>

#include "insight/numcore/tensor.hpp"

namespace insight {

/// Index of a parameter inside a ParamStore.
struct ParamId {
  std::size_t index = 0;
};

/// Named parameters with matching gradient accumulators. Entries keep their
/// registration order, which is also the checkpoint order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor2 value;
    Tensor2 grad;
  };

  ParamId add(std::string name, Tensor2 init) {
    if (index_.contains(name)) throw Error("ParamStore: duplicate parameter '" + name + "'");
    const ParamId id{entries_.size()};
    index_.emplace(name, id.index);
    Tensor2 grad = Tensor2::Zero(init.rows(), init.cols());
    entries_.push_back(Entry{std::move(name), std::move(init), std::move(grad)});
    return id;
  }

  Tensor2& value(ParamId id) { return entries_.at(id.index).value; }
  const Tensor2& value(ParamId id) const { return entries_.at(id.index).value; }
  Tensor2& grad(ParamId id) { return entries_.at(id.index).grad; }
  const Tensor2& grad(ParamId id) const { return entries_.at(id.index).grad; }

  ParamId id(std::string_view name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: unknown parameter '" + std::string(name) + "'");
    return ParamId{it->second};
  }
  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  Tensor2& value(std::string_view name) { return value(id(name)); }
  Tensor2& grad(std::string_view name) { return grad(id(name)); }

  /// Accumulates `g` into the gradient of `id`.
  void accumulate(ParamId id, const Tensor2& g) {
    Tensor2& acc = grad(id);
    if (acc.rows() != g.rows() || acc.cols() != g.cols()) {
      throw ShapeError("gradient " + shape_str(g) + " for '" + entries_[id.index].name + "' of shape " +
                       shape_str(acc));
    }
    acc += g;
  }

  void zero_grads() {
    for (auto& e : entries_) e.grad.setZero();
  }

  void scale_grads(double s) {
    for (auto& e : entries_) e.grad *= s;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }

 private:
  std::deque<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments for every parameter of a store, plus the step count.
struct AdamState {
  std::deque<Tensor2> m;
  std::deque<Tensor2> v;
  long step = 0;

  explicit AdamState(const ParamStore& store) {
    for (const auto& e : store.entries()) {
      m.push_back(Tensor2::Zero(e.value.rows(), e.value.cols()));
      v.push_back(Tensor2::Zero(e.value.rows(), e.value.cols()));
    }
  }
};

/// One bias-corrected Adam update using the store's current gradients.
inline void adam_step(ParamStore& store, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != store.size()) throw Error("adam_step: optimizer state does not match parameter store");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto& entries = store.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double g = p.grad.data()[k];
      double& mk = m.data()[k];
      double& vk = v.data()[k];
      mk = cfg.beta1 * mk + (1.0 - cfg.beta1) * g;
      vk = cfg.beta2 * vk + (1.0 - cfg.beta2) * g * g;
      const double mhat = mk / c1;
      const double vhat = vk / c2;
      p.value.data()[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace insight
