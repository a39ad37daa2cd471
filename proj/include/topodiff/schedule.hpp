#pragma once

// DDPM variance schedule and the closed-form forward / reverse arithmetic.
// Timesteps are 1-based in every public function: t = 1 is the least noisy
// step and t = T the noisiest. Storage is 0-based.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/tensor/ops.hpp"

namespace topodiff {

enum class ScheduleKind { Linear, Cosine };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("schedule.kind: expected linear or cosine, got '" + s + "'");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

class NoiseSchedule {
 public:
  static NoiseSchedule build(ScheduleKind kind, long steps, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw ConfigError("schedule.steps must be >= 1, got " + std::to_string(steps));
    NoiseSchedule s;
    const auto n = static_cast<std::size_t>(steps);
    s.betas_.resize(n);
    if (kind == ScheduleKind::Linear) {
      if (!(beta_start > 0.0 && beta_start < 1.0)) {
        throw ConfigError("schedule.beta_start must lie in (0, 1), got " + std::to_string(beta_start));
      }
      if (!(beta_end >= beta_start && beta_end < 1.0)) {
        throw ConfigError("schedule.beta_end must lie in [beta_start, 1), got " + std::to_string(beta_end));
      }
      for (std::size_t i = 0; i < n; ++i) {
        s.betas_[i] = n == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                                static_cast<double>(n - 1);
      }
    } else {
      // Squared-cosine cumulative curve with offset 0.008, betas clipped at 0.999.
      constexpr double offset = 0.008;
      constexpr double half_pi = 1.57079632679489661923;
      auto f = [&](double t) {
        const double c = std::cos((t / static_cast<double>(n) + offset) / (1.0 + offset) * half_pi);
        return c * c;
      };
      for (std::size_t i = 0; i < n; ++i) {
        const double b = 1.0 - f(static_cast<double>(i + 1)) / f(static_cast<double>(i));
        s.betas_[i] = std::clamp(b, 1e-12, 0.999);
      }
    }
    s.kind_ = kind;
    s.finish();
    return s;
  }

  ScheduleKind kind() const { return kind_; }
  long steps() const { return static_cast<long>(betas_.size()); }

  double beta(long t) const { return betas_[index(t)]; }
  double alpha(long t) const { return alphas_[index(t)]; }
  double alpha_bar(long t) const { return alpha_bars_[index(t)]; }
  // 0 at t = 1, where the reverse step is deterministic.
  double posterior_variance(long t) const { return posterior_variances_[index(t)]; }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  const std::vector<double>& posterior_variances() const { return posterior_variances_; }

  std::size_t index(long t) const {
    if (t < 1 || t > steps()) {
      throw IndexError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
  }

 private:
  void finish() {
    const std::size_t n = betas_.size();
    alphas_.resize(n);
    alpha_bars_.resize(n);
    posterior_variances_.resize(n);
    double prod = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      alphas_[i] = 1.0 - betas_[i];
      prod *= alphas_[i];
      alpha_bars_[i] = prod;
    }
    for (std::size_t i = 0; i < n; ++i) {
      posterior_variances_[i] =
          i == 0 ? 0.0 : betas_[i] * (1.0 - alpha_bars_[i - 1]) / (1.0 - alpha_bars_[i]);
    }
  }

  ScheduleKind kind_ = ScheduleKind::Linear;
  std::vector<double> betas_, alphas_, alpha_bars_, posterior_variances_;
};

inline NoiseSchedule build_schedule(ScheduleKind kind, long steps, double beta_start, double beta_end) {
  return NoiseSchedule::build(kind, steps, beta_start, beta_end);
}

namespace detail {
inline void require_same_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  }
}
}  // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
std::vector<T> q_sample(std::span<const T> x0, long t, std::span<const T> eps, const NoiseSchedule& sched) {
  detail::require_same_length(x0.size(), eps.size(), "q_sample");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + b * static_cast<double>(eps[i]));
  return out;
}

// Algebraic inverse of q_sample given a noise estimate. Unclamped.
template <typename T>
std::vector<T> predict_x0(std::span<const T> x_t, long t, std::span<const T> eps_hat, const NoiseSchedule& sched) {
  detail::require_same_length(x_t.size(), eps_hat.size(), "predict_x0");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(x_t[i]) - b * static_cast<double>(eps_hat[i])) / a);
  return out;
}

// Ancestral DDPM step x_t -> x_{t-1}; z must be all zero at t = 1.
template <typename T>
std::vector<T> reverse_step(std::span<const T> x_t, std::span<const T> eps_hat, long t, std::span<const T> z,
                            const NoiseSchedule& sched) {
  detail::require_same_length(x_t.size(), eps_hat.size(), "reverse_step");
  detail::require_same_length(x_t.size(), z.size(), "reverse_step");
  const std::size_t i0 = sched.index(t);
  if (t == 1) {
    for (T v : z) {
      if (v != T(0)) throw ContractError("reverse_step: noise must be zero at t = 1");
    }
  }
  const double alpha = sched.alphas()[i0];
  const double beta = sched.betas()[i0];
  const double ab = sched.alpha_bars()[i0];
  const double sigma = std::sqrt(sched.posterior_variances()[i0]);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double eps_coef = beta / std::sqrt(1.0 - ab);
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(inv_sqrt_alpha * (static_cast<double>(x_t[i]) - eps_coef * static_cast<double>(eps_hat[i])) +
                            sigma * static_cast<double>(z[i]));
  }
  return out;
}

// Batched tensor forms with one timestep per sample along axis 0. The
// predict_x0 form is differentiable in eps_hat.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<long>& t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  detail::require_same_shape(x0.shape(), eps.shape(), "q_sample");
  std::vector<T> a(t.size()), b(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    a[i] = static_cast<T>(std::sqrt(sched.alpha_bar(t[i])));
    b[i] = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t[i])));
  }
  return add(scale_per_sample(x0, a), scale_per_sample(eps, b));
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const std::vector<long>& t, const Tensor<T>& eps_hat,
                     const NoiseSchedule& sched) {
  detail::require_same_shape(x_t.shape(), eps_hat.shape(), "predict_x0");
  std::vector<T> inv_a(t.size()), b_over_a(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ab = sched.alpha_bar(t[i]);
    inv_a[i] = static_cast<T>(1.0 / std::sqrt(ab));
    b_over_a[i] = static_cast<T>(std::sqrt(1.0 - ab) / std::sqrt(ab));
  }
  return sub(scale_per_sample(x_t, inv_a), scale_per_sample(eps_hat, b_over_a));
}

}  // namespace topodiff
