#pragma once

// Overlap and boundary metrics for binary masks: Dice, IoU and HD95.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/topology.hpp"

namespace topodiff {

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}
  BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> b) : height(h), width(w), bits(std::move(b)) {
    if (bits.size() != h * w) throw DimensionError("mask size does not match extents");
  }

  bool at(std::size_t r, std::size_t c) const { return bits[r * width + c] != 0; }
  void set(std::size_t r, std::size_t c, bool on = true) { bits[r * width + c] = on ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool empty() const { return count() == 0; }
};

inline BinaryMask to_mask(const ScalarField2D& f, double threshold = 0.5) {
  BinaryMask m(f.height, f.width);
  for (std::size_t i = 0; i < f.size(); ++i) m.bits[i] = f.values[i] >= threshold ? 1 : 0;
  return m;
}

inline ScalarField2D to_field(const BinaryMask& m) {
  std::vector<double> v(m.bits.begin(), m.bits.end());
  return ScalarField2D(m.height, m.width, std::move(v));
}

namespace detail {
inline void require_same_extent(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError("mask extents differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}
}  // namespace detail

// 2|A n B| / (|A| + |B|); 1 when both are empty.
inline double dice_score(const BinaryMask& pred, const BinaryMask& target) {
  detail::require_same_extent(pred, target);
  std::size_t inter = 0, total = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += pred.bits[i] & target.bits[i];
    total += pred.bits[i] + target.bits[i];
  }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

// |A n B| / |A u B|; 1 when both are empty.
inline double iou_score(const BinaryMask& pred, const BinaryMask& target) {
  detail::require_same_extent(pred, target);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += pred.bits[i] & target.bits[i];
    uni += pred.bits[i] | target.bits[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Mask pixels with a 4-neighbour outside the mask; the grid exterior counts
// as outside.
inline BinaryMask boundary(const BinaryMask& m) {
  BinaryMask out(m.height, m.width);
  const long h = static_cast<long>(m.height), w = static_cast<long>(m.width);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      if (!m.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) continue;
      bool edge = false;
      const long nbr[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
      for (auto& d : nbr) {
        const long rr = r + d[0], cc = c + d[1];
        if (rr < 0 || cc < 0 || rr >= h || cc >= w || !m.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc))) {
          edge = true;
          break;
        }
      }
      out.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c), edge);
    }
  return out;
}

namespace detail {

// Lower envelope of parabolas: exact 1D squared distance transform.
inline void edt_1d(const double* f, std::size_t n, double* d) {
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  const double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = 1; q < n; ++q) {
    auto intersect = [&](std::size_t p) {
      const double qd = static_cast<double>(q), pd = static_cast<double>(p);
      return ((f[q] + qd * qd) - (f[p] + pd * pd)) / (2.0 * qd - 2.0 * pd);
    };
    double s = intersect(v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

// Exact Euclidean distance from every pixel to the nearest set pixel of
// `features`; +inf everywhere if there are none.
inline std::vector<double> distance_transform(const BinaryMask& features) {
  const std::size_t h = features.height, w = features.width;
  const double big = 1e20;
  std::vector<double> grid(h * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = features.bits[i] ? 0.0 : big;
  std::vector<double> col_in(h), col_out(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) col_in[r] = grid[r * w + c];
    detail::edt_1d(col_in.data(), h, col_out.data());
    for (std::size_t r = 0; r < h; ++r) grid[r * w + c] = col_out[r];
  }
  std::vector<double> row_out(w);
  for (std::size_t r = 0; r < h; ++r) {
    detail::edt_1d(grid.data() + r * w, w, row_out.data());
    std::copy(row_out.begin(), row_out.end(), grid.begin() + static_cast<long>(r * w));
  }
  for (auto& d : grid) d = d >= big * 0.5 ? std::numeric_limits<double>::infinity() : std::sqrt(d);
  return grid;
}

// Directed boundary-to-boundary distances from A to B and from B to A, pooled.
inline std::vector<double> pooled_boundary_distances(const BinaryMask& a, const BinaryMask& b) {
  const BinaryMask ba = boundary(a), bb = boundary(b);
  const auto dt_a = distance_transform(ba), dt_b = distance_transform(bb);
  std::vector<double> out;
  for (std::size_t i = 0; i < ba.bits.size(); ++i)
    if (ba.bits[i]) out.push_back(dt_b[i]);
  for (std::size_t i = 0; i < bb.bits.size(); ++i)
    if (bb.bits[i]) out.push_back(dt_a[i]);
  return out;
}

// 95th percentile (nearest rank) of the pooled boundary distances, in pixels.
// Empty when either mask is empty.
inline std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& target) {
  detail::require_same_extent(pred, target);
  if (pred.empty() || target.empty()) return std::nullopt;
  auto d = pooled_boundary_distances(pred, target);
  std::sort(d.begin(), d.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(d.size())));
  return d[std::max<std::size_t>(rank, 1) - 1];
}

inline std::optional<double> hausdorff(const BinaryMask& pred, const BinaryMask& target) {
  detail::require_same_extent(pred, target);
  if (pred.empty() || target.empty()) return std::nullopt;
  const auto d = pooled_boundary_distances(pred, target);
  return *std::max_element(d.begin(), d.end());
}

struct EvalResult {
  double dice = 0.0;
  double iou = 0.0;
  std::optional<double> hd95;
};

inline EvalResult evaluate(const BinaryMask& pred, const BinaryMask& target) {
  return {dice_score(pred, target), iou_score(pred, target), hd95(pred, target)};
}

// Means over a set of per-sample results; HD95 averages only defined entries.
struct EvalSummary {
  double dice = 0.0;
  double iou = 0.0;
  double hd95 = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
  std::size_t hd95_undefined = 0;
};

inline EvalSummary summarize(const std::vector<EvalResult>& results) {
  EvalSummary s;
  s.count = results.size();
  double hd_sum = 0.0;
  std::size_t hd_n = 0;
  for (const auto& r : results) {
    s.dice += r.dice;
    s.iou += r.iou;
    if (r.hd95) {
      hd_sum += *r.hd95;
      ++hd_n;
    } else {
      ++s.hd95_undefined;
    }
  }
  if (s.count) {
    s.dice /= static_cast<double>(s.count);
    s.iou /= static_cast<double>(s.count);
  }
  if (hd_n) s.hd95 = hd_sum / static_cast<double>(hd_n);
  return s;
}

}  // namespace topodiff
