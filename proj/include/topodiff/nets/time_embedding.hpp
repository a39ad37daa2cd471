#pragma once

#include <cmath>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/nets/layers.hpp"

namespace topodiff::nets {

// Row n holds sin(t_n * w_i) for i < dim/2 followed by cos(t_n * w_i), with
// w_i = 10000^(-2i/dim).
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<long>& t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("model.time_embed_dim must be even and positive, got " + std::to_string(dim));
  const std::size_t half = dim / 2;
  std::vector<T> out(t.size() * dim);
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double arg = static_cast<double>(t[n]) * freq;
      out[n * dim + i] = static_cast<T>(std::sin(arg));
      out[n * dim + half + i] = static_cast<T>(std::cos(arg));
    }
  }
  return Tensor<T>::from_data({t.size(), dim}, std::move(out));
}

// Sinusoidal features followed by Linear -> SiLU -> Linear.
template <typename T>
struct TimeEmbedding {
  std::size_t dim = 0;
  Linear<T> fc1, fc2;

  TimeEmbedding() = default;
  TimeEmbedding(ParamStore<T>& ps, const std::string& name, std::size_t dim_, std::mt19937_64& rng) : dim(dim_) {
    if (dim == 0 || dim % 2 != 0) throw ConfigError("model.time_embed_dim must be even and positive, got " + std::to_string(dim));
    fc1 = Linear<T>(ps, name + ".fc1", dim, dim, rng);
    fc2 = Linear<T>(ps, name + ".fc2", dim, dim, rng);
  }

  Tensor<T> operator()(const std::vector<long>& t) const { return fc2(silu(fc1(sinusoidal_embedding<T>(t, dim)))); }
};

}  // namespace topodiff::nets
