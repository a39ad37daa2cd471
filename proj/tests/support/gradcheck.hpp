#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "topodiff/tensor/ops.hpp"

namespace topodiff::testing {

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs = 0.0;
  std::size_t checked = 0;
};

// Central differences of loss() with respect to the chosen entries of each
// input, compared against reverse-mode gradients. `positions` empty means all.
template <typename T>
GradCheck check_gradients(std::vector<Tensor<T>*> inputs, const std::function<Tensor<T>()>& loss, double h,
                          const std::vector<std::vector<std::size_t>>& positions = {}) {
  for (auto* x : inputs) {
    x->set_requires_grad(true);
    x->zero_grad();
  }
  backward(loss());
  double diff2 = 0, a2 = 0, n2 = 0;
  GradCheck out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto* x = inputs[k];
    std::vector<double> analytic(x->numel(), 0.0);
    if (x->has_grad())
      for (std::size_t i = 0; i < analytic.size(); ++i) analytic[i] = static_cast<double>(x->grad()[i]);
    std::vector<std::size_t> idx;
    if (positions.empty() || positions[k].empty()) {
      for (std::size_t i = 0; i < x->numel(); ++i) idx.push_back(i);
    } else {
      idx = positions[k];
    }
    for (std::size_t i : idx) {
      auto d = x->mutable_data();
      const T keep = d[i];
      d[i] = keep + static_cast<T>(h);
      const double up = static_cast<double>(loss().item());
      d[i] = keep - static_cast<T>(h);
      const double down = static_cast<double>(loss().item());
      d[i] = keep;
      const double numeric = (up - down) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      out.max_abs = std::max(out.max_abs, std::abs(analytic[i] - numeric));
      ++out.checked;
    }
  }
  const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
  out.rel_error = scale > 0 ? std::sqrt(diff2) / scale : std::sqrt(diff2);
  return out;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

// Fixed random weights turn a tensor-valued expression into a scalar whose
// gradient exercises every output entry.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor<T>(y.shape(), rng)));
}

}  // namespace topodiff::testing
