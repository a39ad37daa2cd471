#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "topodiff/tensor/params.hpp"

namespace topodiff {

struct AdamWHyper {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// One decoupled-weight-decay Adam update of a single buffer. `step` is the
// 1-based update count used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  long step, const AdamWHyper& h) {
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const double decay = 1.0 - h.lr * h.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = (mi / c1) / (std::sqrt(vi / c2) + h.eps);
    param[i] = static_cast<T>(static_cast<double>(param[i]) * decay - h.lr * update);
  }
}

template <typename T>
struct AdamWState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  long step = 0;

  void init(const ParamStore<T>& params) {
    m.clear();
    v.clear();
    for (const auto& entry : params.entries()) {
      m.emplace_back(entry.tensor.numel(), T(0));
      v.emplace_back(entry.tensor.numel(), T(0));
    }
    step = 0;
  }
};

// Applies one AdamW step to every parameter from its accumulated gradient.
// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
void adamw_step(ParamStore<T>& params, AdamWState<T>& state, const AdamWHyper& h) {
  if (state.m.size() != params.size()) state.init(params);
  ++state.step;
  auto& entries = params.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Tensor<T>& p = entries[k].tensor;
    std::vector<T> zeros;
    std::span<const T> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.numel(), T(0));
      g = zeros;
    }
    for (T gi : g) {
      if (!std::isfinite(static_cast<double>(gi))) {
        throw NumericalError("non-finite gradient for parameter '" + entries[k].name +
                             "' at optimizer step " + std::to_string(state.step));
      }
    }
    adamw_update<T>(p.mutable_data(), g, state.m[k], state.v[k], state.step, h);
  }
}

// Cosine annealing from lr_max at step 0 to lr_min at step `horizon`.
inline double cosine_lr(double lr_max, double lr_min, long step, long horizon) {
  if (horizon <= 0) return lr_max;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(horizon));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(frac * 3.14159265358979323846));
}

}  // namespace topodiff
