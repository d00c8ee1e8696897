#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jl1/tape.hpp"
#include "jl1/tensor.hpp"

namespace jl1 {

// Named parameter collection. Entries keep insertion order, and that
// order is what every consumer iterates in (optimizer updates,
// checkpoint serialization), so behaviour is reproducible and stable
// across save/load round trips.
template <typename T>
struct ModelParamsT {
  struct Entry {
    std::string name;
    TensorT<T> value;
    bool trainable = true;
  };

  std::vector<Entry> entries;
  std::map<std::string, std::size_t> index;

  TensorT<T>& add(const std::string& name, TensorT<T> value,
                  bool trainable = true) {
    if (index.count(name))
      throw contract_error("duplicate parameter name: " + name);
    index[name] = entries.size();
    entries.push_back({name, std::move(value), trainable});
    return entries.back().value;
  }

  bool has(const std::string& name) const { return index.count(name) != 0; }

  TensorT<T>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end())
      throw contract_error("unknown parameter name: " + name);
    return entries[it->second].value;
  }
  const TensorT<T>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end())
      throw contract_error("unknown parameter name: " + name);
    return entries[it->second].value;
  }

  // Registers every trainable entry on the tape (gradients enabled).
  void watch_all(TapeT<T>& tape) {
    for (auto& e : entries)
      if (e.trainable) tape.watch(e.value, true);
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (auto& e : entries) n += e.trainable ? 1 : 0;
    return n;
  }

  std::int64_t trainable_numel() const {
    std::int64_t n = 0;
    for (auto& e : entries) n += e.trainable ? e.value.numel() : 0;
    return n;
  }
};

using ModelParams = ModelParamsT<float>;

// Adam with bias correction; epsilon sits outside the square root
// (update = lr * m_hat / (sqrt(v_hat) + eps)).
template <typename T>
struct AdamStateT {
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  std::int64_t step = 0;
  // First/second moment buffers, aligned with the trainable entries of
  // the ModelParams instance this state was initialized from.
  std::vector<TensorT<T>> m, v;

  static AdamStateT init(const ModelParamsT<T>& params, T lr) {
    AdamStateT s;
    s.lr = lr;
    for (auto& e : params.entries)
      if (e.trainable) {
        s.m.push_back(TensorT<T>::zeros(e.value.shape));
        s.v.push_back(TensorT<T>::zeros(e.value.shape));
      }
    return s;
  }
};

using AdamState = AdamStateT<float>;

// One optimizer step. `grads` must hold one gradient tensor per
// trainable entry, in entry order (see collect_grads).
template <typename T>
void adam_step(ModelParamsT<T>& params, AdamStateT<T>& state,
               const std::vector<TensorT<T>>& grads) {
  if (grads.size() != state.m.size() ||
      state.m.size() != params.trainable_count())
    throw contract_error("adam_step: gradient list does not match state");
  state.step += 1;
  const T b1t = static_cast<T>(std::pow(static_cast<double>(state.beta1),
                                        static_cast<double>(state.step)));
  const T b2t = static_cast<T>(std::pow(static_cast<double>(state.beta2),
                                        static_cast<double>(state.step)));
  std::size_t slot = 0;
  for (auto& e : params.entries) {
    if (!e.trainable) continue;
    const auto& g = grads[slot];
    if (g.shape != e.value.shape)
      throw dimension_error("adam_step: gradient shape mismatch for " + e.name);
    auto& m = state.m[slot];
    auto& v = state.v[slot];
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      T m_hat = m[i] / (T(1) - b1t);
      T v_hat = v[i] / (T(1) - b2t);
      e.value[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
    ++slot;
  }
}

// Gradients of the trainable entries after tape.backward(), in entry
// order; entries the loss never touched come back as zeros.
template <typename T>
std::vector<TensorT<T>> collect_grads(const ModelParamsT<T>& params,
                                      const TapeT<T>& tape) {
  std::vector<TensorT<T>> out;
  out.reserve(params.trainable_count());
  for (auto& e : params.entries) {
    if (!e.trainable) continue;
    if (e.value.node < 0 || e.value.stamp != tape.stamp())
      throw contract_error("collect_grads: parameter " + e.name +
                           " was not watched on this tape");
    out.push_back(tape.grad(e.value.node));
  }
  return out;
}

}  // namespace jl1
