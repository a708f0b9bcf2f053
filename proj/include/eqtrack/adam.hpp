#pragma once

#include <cmath>
#include <vector>

#include "eqtrack/error.hpp"
#include "eqtrack/tensor.hpp"

namespace eqtrack::diff {

// Bias-corrected Adam over the trainable parameters of a store. Moments are
// kept per parameter in store order.
template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<std::vector<T>> m, v;

  void init(const ParamStore<T>& store) {
    m.clear();
    v.clear();
    for (const auto& p : store) {
      m.emplace_back(p.value.size(), T(0));
      v.emplace_back(p.value.size(), T(0));
    }
    step_count = 0;
  }

  void step(ParamStore<T>& store, double lr) {
    if (m.size() != store.size()) throw ShapeMismatch("optimizer state does not match store");
    ++step_count;
    const T c1inv = T(1.0 / (1.0 - std::pow(beta1, static_cast<double>(step_count))));
    const T c2inv = T(1.0 / (1.0 - std::pow(beta2, static_cast<double>(step_count))));
    const T b1 = T(beta1), b1c = T(1.0 - beta1);
    const T b2 = T(beta2), b2c = T(1.0 - beta2);
    const T lrt = T(lr), epst = T(eps);
    for (std::size_t pi = 0; pi < store.size(); ++pi) {
      Param<T>& p = store[pi];
      if (!p.trainable) continue;
      if (m[pi].size() != p.value.size())
        throw ShapeMismatch("optimizer moment size for " + p.name);
      T* __restrict mp = m[pi].data();
      T* __restrict vp = v[pi].data();
      const T* __restrict g = p.grad.data();
      T* __restrict w = p.value.data();
      const std::size_t count = p.value.size();
      for (std::size_t k = 0; k < count; ++k) {
        mp[k] = b1 * mp[k] + b1c * g[k];
        vp[k] = b2 * vp[k] + b2c * g[k] * g[k];
        w[k] -= lrt * (mp[k] * c1inv) / (std::sqrt(vp[k] * c2inv) + epst);
      }
    }
  }
};

}  // namespace eqtrack::diff
