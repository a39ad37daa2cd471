#pragma once

// Training objectives: Dice, focal, the denoising loss on the implied clean
// mask, their weighted hybrid, and the topological denoising consistency
// (TDC) term with its scheduled, log-damped weight.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/schedule.hpp"
#include "topodiff/tensor/ops.hpp"
#include "topodiff/topology.hpp"
#include "topodiff/transport.hpp"

namespace topodiff {

struct LossWeights {
  double alpha = 1.0;        // denoising term
  double beta = 1.0;         // auxiliary Dice
  double gamma_w = 1.0;      // auxiliary focal
  double lambda = 0.5;       // Dice inside the denoising term
  double focal_gamma = 2.0;  // focusing exponent
  double smooth = 1.0;       // Dice smoothing

  void validate() const {
    const std::pair<const char*, double> fields[] = {{"loss.alpha", alpha},   {"loss.beta", beta},
                                                     {"loss.gamma_w", gamma_w}, {"loss.lambda", lambda},
                                                     {"loss.focal_gamma", focal_gamma}};
    for (auto [name, v] : fields)
      if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be a finite nonnegative number");
    if (!(smooth > 0)) throw ConfigError("loss.smooth must be positive");
  }
};

enum class ThresholdMode { Soft, Binary };

inline ThresholdMode parse_threshold_mode(const std::string& s) {
  if (s == "soft") return ThresholdMode::Soft;
  if (s == "binary") return ThresholdMode::Binary;
  throw ConfigError("loss.tdc_threshold must be 'soft' or 'binary', got '" + s + "'");
}
inline std::string to_string(ThresholdMode m) { return m == ThresholdMode::Soft ? "soft" : "binary"; }

struct TdcConfig {
  long k = 5;
  ThresholdMode threshold = ThresholdMode::Soft;
  DimensionSelection dims{};
  std::size_t samples = 4;   // per-step cap on evaluated batch entries
  bool gradient = true;      // route the TDC gradient into the network
  double w_max = 0.1;
  double warmup_fraction = 0.2;
  double ramp_fraction = 0.3;

  void validate() const {
    if (k < 1) throw ConfigError("loss.tdc_k must be >= 1, got " + std::to_string(k));
    if (!(w_max >= 0)) throw ConfigError("loss.tdc_w_max must be nonnegative");
    if (warmup_fraction < 0 || ramp_fraction < 0 || warmup_fraction + ramp_fraction > 1) {
      throw ConfigError("loss.tdc_warmup and loss.tdc_ramp must be nonnegative with sum <= 1");
    }
    if (samples == 0) throw ConfigError("loss.tdc_samples must be positive");
  }

  // Zero through the warm-up, linear ramp to w_max, then constant. `epoch` is
  // 0-based.
  double w_epoch(long epoch, long epochs) const {
    const double e = static_cast<double>(epoch), total = static_cast<double>(std::max(1L, epochs));
    const double start = warmup_fraction * total, ramp = ramp_fraction * total;
    if (e < start) return 0.0;
    if (ramp <= 0) return w_max;
    return w_max * std::min(1.0, (e - start + 1.0) / ramp);
  }
};

struct LossReport {
  double total = 0.0;
  double denoising_mse = 0.0;
  double denoising_dice = 0.0;
  double aux_dice = 0.0;
  double aux_focal = 0.0;
  double topo = 0.0;
  double w_epoch = 0.0;
  std::size_t tdc_evaluated = 0;
  std::size_t tdc_skipped = 0;
};

// 1 - (2 sum(p y) + s) / (sum p + sum y + s), over all elements.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T smooth) {
  detail::require_same_shape(pred.shape(), target.shape(), "dice_loss");
  auto inter = sum(mul(pred, target));
  auto denom = add_scalar(add(sum(pred), sum(target)), smooth);
  auto ratio = div(add_scalar(scale(inter, T(2)), smooth), denom);
  return add_scalar(neg(ratio), T(1));
}

// Mean of -(1 - p_t)^gamma log p_t, written with s = (2y - 1) z as
// exp(-gamma softplus(s)) softplus(-s).
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const Tensor<T>& target, T gamma) {
  detail::require_same_shape(logits.shape(), target.shape(), "focal_loss");
  std::vector<T> sign(target.numel());
  for (std::size_t i = 0; i < sign.size(); ++i) sign[i] = target[i] >= T(0.5) ? T(1) : T(-1);
  auto s = mul(logits, Tensor<T>::from_data(logits.shape(), std::move(sign)));
  auto nll = softplus(neg(s));
  if (gamma == T(0)) return mean(nll);
  return mean(mul(exp(scale(softplus(s), -gamma)), nll));
}

template <typename T>
struct DenoisingParts {
  Tensor<T> mse;
  Tensor<T> dice;
};

// MSE between true and predicted noise, plus the Dice loss of the clamped
// implied clean mask against x0.
template <typename T>
DenoisingParts<T> denoising_loss(const Tensor<T>& eps, const Tensor<T>& eps_hat, const Tensor<T>& x0,
                                 const Tensor<T>& x0_implied, T smooth) {
  detail::require_same_shape(eps.shape(), eps_hat.shape(), "denoising_loss");
  return {mean(square(sub(eps_hat, eps))), dice_loss(clamp(x0_implied, T(0), T(1)), x0, smooth)};
}

template <typename T>
struct HybridParts {
  DenoisingParts<T> denoising;
  Tensor<T> aux_dice;
  Tensor<T> aux_focal;
};

template <typename T>
struct WeightedLoss {
  Tensor<T> total;
  LossReport report;
};

// alpha (mse + lambda dice) + beta aux_dice + gamma_w aux_focal. Terms whose
// weight is zero are left off the graph.
template <typename T>
WeightedLoss<T> hybrid_loss(const HybridParts<T>& parts, const LossWeights& w) {
  WeightedLoss<T> out;
  auto& r = out.report;
  r.denoising_mse = parts.denoising.mse.item();
  r.denoising_dice = parts.denoising.dice.item();
  r.aux_dice = parts.aux_dice.item();
  r.aux_focal = parts.aux_focal.item();
  std::vector<Tensor<T>> terms;
  if (w.alpha != 0) {
    terms.push_back(scale(parts.denoising.mse, static_cast<T>(w.alpha)));
    if (w.lambda != 0) terms.push_back(scale(parts.denoising.dice, static_cast<T>(w.alpha * w.lambda)));
  }
  if (w.beta != 0) terms.push_back(scale(parts.aux_dice, static_cast<T>(w.beta)));
  if (w.gamma_w != 0) terms.push_back(scale(parts.aux_focal, static_cast<T>(w.gamma_w)));
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const auto& t : terms) total = add(total, t);
  out.total = total;
  r.total = w.alpha * (r.denoising_mse + w.lambda * r.denoising_dice) + w.beta * r.aux_dice + w.gamma_w * r.aux_focal;
  return out;
}

inline ScalarField2D field_from(std::span<const float> v, std::size_t h, std::size_t w) {
  std::vector<double> d(v.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::clamp(static_cast<double>(v[i]), 0.0, 1.0);
  return ScalarField2D(h, w, std::move(d));
}
inline ScalarField2D field_from(std::span<const double> v, std::size_t h, std::size_t w) {
  std::vector<double> d(v.begin(), v.end());
  for (auto& x : d) x = std::clamp(x, 0.0, 1.0);
  return ScalarField2D(h, w, std::move(d));
}

// W1 between the diagrams of two fields and its gradient with respect to the
// pixels of `current` (through the critical cells, matching held fixed).
struct FieldTopoDistance {
  double cost = 0.0;
  std::vector<double> grad;  // one entry per pixel of `current`
};

inline FieldTopoDistance topo_distance(const ScalarField2D& current, const ScalarField2D& lookback,
                                       ThresholdMode mode, const DimensionSelection& dims) {
  FieldTopoDistance out;
  out.grad.assign(current.size(), 0.0);
  const bool binary = mode == ThresholdMode::Binary;
  const auto a = superlevel_persistence(binary ? threshold_field(current) : current);
  const auto b = superlevel_persistence(binary ? threshold_field(lookback) : lookback);
  const auto matching = w1_distance(a, b, dims);
  out.cost = matching.cost;
  if (binary) return out;
  const auto g = w1_gradient_wrt_a(a, b, matching);
  const std::size_t w = current.width;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& p = a.points[i];
    out.grad[static_cast<std::size_t>(p.birth_cell.row) * w + static_cast<std::size_t>(p.birth_cell.col)] += g[i].d_birth;
    if (p.death_cell) {
      out.grad[static_cast<std::size_t>(p.death_cell->row) * w + static_cast<std::size_t>(p.death_cell->col)] +=
          g[i].d_death;
    }
  }
  return out;
}

// Result of the TDC term on one batch: L_topo is the mean W1 over evaluated
// samples; grad is dL_topo/d(current clamped prediction), zero elsewhere.
struct TdcResult {
  double l_topo = 0.0;
  std::vector<double> grad;
  std::vector<std::size_t> evaluated_ids;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

// Batch entries the TDC term will use: candidates in order with t - k >= 1,
// at most cfg.samples of them. `skipped` counts candidates rejected by the
// t - k rule before the cap was reached.
inline std::vector<std::size_t> tdc_select(const std::vector<long>& t, const std::vector<std::size_t>& candidates,
                                           const TdcConfig& cfg, std::size_t& skipped) {
  std::vector<std::size_t> used;
  skipped = 0;
  for (std::size_t s : candidates) {
    if (used.size() >= cfg.samples) break;
    if (t[s] - cfg.k < 1) {
      ++skipped;
      continue;
    }
    used.push_back(s);
  }
  return used;
}

// `current` is the [N, 1, H, W] implied clean mask of the batch and
// `lookback` holds look-back predictions for the entries in `used`, stacked in
// that order. Values are clamped to [0, 1] before persistence.
template <typename T>
TdcResult tdc_from_predictions(const Tensor<T>& current, const Tensor<T>& lookback,
                               const std::vector<std::size_t>& used, const TdcConfig& cfg) {
  const std::size_t h = current.size(2), w = current.size(3), plane = h * w;
  if (lookback.numel() != used.size() * plane) throw DimensionError("tdc_term: look-back batch does not match selection");
  TdcResult r;
  r.grad.assign(current.numel(), 0.0);
  r.evaluated_ids = used;
  r.evaluated = used.size();
  if (used.empty()) return r;
  const double inv = 1.0 / static_cast<double>(used.size());
  for (std::size_t j = 0; j < used.size(); ++j) {
    const std::size_t s = used[j];
    const auto cur = field_from(current.data().subspan(s * plane, plane), h, w);
    const auto back = field_from(lookback.data().subspan(j * plane, plane), h, w);
    const auto d = topo_distance(cur, back, cfg.threshold, cfg.dims);
    r.l_topo += d.cost * inv;
    for (std::size_t p = 0; p < plane; ++p) r.grad[s * plane + p] = d.grad[p] * inv;
  }
  return r;
}

namespace detail {
template <typename T>
Tensor<T> gather_samples(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  const std::size_t inner = x.numel() / x.size(0);
  std::vector<T> buf;
  buf.reserve(idx.size() * inner);
  for (std::size_t i : idx) buf.insert(buf.end(), x.data().begin() + i * inner, x.data().begin() + (i + 1) * inner);
  Shape shape = x.shape();
  shape[0] = idx.size();
  return Tensor<T>::from_data(std::move(shape), std::move(buf));
}
}  // namespace detail

// Full TDC term. For each selected entry, a stop-gradient look-back forward
// at t - k runs on q_sample(x0, t - k, eps) with the same eps; the diagram of
// its implied clean mask is compared to that of `current_x0`. `model` must
// provide operator()(x_t, t, image) -> {eps_hat, aux_logits}.
template <typename T, typename Model>
TdcResult tdc_term(const Model& model, const Tensor<T>& x0, const std::vector<long>& t, const Tensor<T>& eps,
                   const Tensor<T>& image, const Tensor<T>& current_x0, const NoiseSchedule& sched,
                   const TdcConfig& cfg, const std::vector<std::size_t>& candidates) {
  std::size_t skipped = 0;
  const auto used = tdc_select(t, candidates, cfg, skipped);
  if (used.empty()) {
    TdcResult r;
    r.grad.assign(current_x0.numel(), 0.0);
    r.skipped = skipped;
    return r;
  }
  Tensor<T> lookback;
  {
    NoGradGuard guard;
    std::vector<long> tk;
    for (std::size_t s : used) tk.push_back(t[s] - cfg.k);
    const auto x0s = detail::gather_samples(x0, used), eps_s = detail::gather_samples(eps, used);
    const auto x_tk = q_sample(x0s, tk, eps_s, sched);
    const auto out = model(x_tk, tk, detail::gather_samples(image, used));
    lookback = predict_x0(x_tk, tk, out.eps_hat, sched);
  }
  auto r = tdc_from_predictions(current_x0, lookback, used, cfg);
  r.skipped = skipped;
  return r;
}

// hybrid.total + w log(1 + L_topo). The returned tensor carries the TDC
// gradient w / (1 + L) dL/dx onto `current_clamped` when gradient routing is on.
template <typename T>
WeightedLoss<T> enhanced_loss(const WeightedLoss<T>& hybrid, const Tensor<T>& current_clamped, const TdcResult& tdc,
                              double w_epoch, const TdcConfig& cfg) {
  if (tdc.l_topo < 0) throw ContractError("L_topo must be nonnegative");
  WeightedLoss<T> out = hybrid;
  out.report.topo = tdc.l_topo;
  out.report.w_epoch = w_epoch;
  out.report.tdc_evaluated = tdc.evaluated;
  out.report.tdc_skipped = tdc.skipped;
  const double added = w_epoch * std::log1p(tdc.l_topo);
  out.report.total = hybrid.report.total + added;
  if (w_epoch == 0.0 || tdc.l_topo == 0.0) return out;
  std::vector<T> g(current_clamped.numel(), T(0));
  if (cfg.gradient) {
    const double factor = w_epoch / (1.0 + tdc.l_topo);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(factor * tdc.grad[i]);
  }
  out.total = add(hybrid.total, inject_gradient(current_clamped, static_cast<T>(added), std::move(g)));
  return out;
}

}  // namespace topodiff
