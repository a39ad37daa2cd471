#pragma once

// Exact persistence diagrams (dimensions 0 and 1) of 2D scalar fields under
// the superlevel filtration {p : value(p) >= tau}, tau decreasing.
//
// Vertex construction on the pixel grid: pixels are vertices, a cell enters
// once all its vertices have. Foreground components are 4-connected; holes
// are bounded 8-connected components of the complement.
//
// Pixels are totally ordered by value descending with ties in scan order
// (row, then column, ascending). Dimension 0 runs union-find over that order
// with the elder rule. Dimension 1 runs union-find over the reversed order on
// the complement, 8-connected, with a virtual "outside" node that is older
// than every pixel; each bounded complement component that merges into an
// older one is a hole born at the merging pixel and killed at the component's
// lowest pixel.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "topodiff/errors.hpp"

namespace topodiff {

struct ScalarField2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major

  ScalarField2D() = default;
  ScalarField2D(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
    validate();
  }

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::size_t size() const { return values.size(); }

  void validate() const {
    if (height < 1 || width < 1) throw DimensionError("scalar field needs positive extents");
    if (values.size() != height * width) {
      throw DimensionError("scalar field has " + std::to_string(values.size()) + " values for " +
                           std::to_string(height) + "x" + std::to_string(width));
    }
    for (double v : values) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        throw DataError("scalar field value " + std::to_string(v) + " outside [0, 1]");
      }
    }
  }
};

struct Cell {
  int row = -1;
  int col = -1;
  friend bool operator==(const Cell&, const Cell&) = default;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

struct PersistencePoint {
  int dim = 0;
  double birth = 0.0;
  double death = 0.0;  // for essential points: the global minimum of the field
  bool essential = false;
  Cell birth_cell;
  std::optional<Cell> death_cell;  // absent for essential points

  double persistence() const { return birth - death; }
};

struct PersistenceDiagram {
  std::vector<PersistencePoint> points;

  std::vector<std::size_t> indices(int dim, bool essential) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < points.size(); ++i)
      if (points[i].dim == dim && points[i].essential == essential) out.push_back(i);
    return out;
  }
  std::size_t count(int dim) const {
    return static_cast<std::size_t>(
        std::count_if(points.begin(), points.end(), [dim](const PersistencePoint& p) { return p.dim == dim; }));
  }
};

struct BettiNumbers {
  std::size_t b0 = 0;
  std::size_t b1 = 0;
  friend bool operator==(const BettiNumbers&, const BettiNumbers&) = default;
};

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), oldest_(n, 0) { std::iota(parent_.begin(), parent_.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  // Rank (position in processing order) of the oldest member of x's set.
  long& oldest(std::size_t root) { return oldest_[root]; }
  void attach(std::size_t child_root, std::size_t parent_root) { parent_[child_root] = parent_root; }

 private:
  std::vector<std::size_t> parent_;
  std::vector<long> oldest_;
};

// Pixel indices sorted by value descending, ties in scan order.
inline std::vector<std::size_t> filtration_order(const ScalarField2D& f) {
  std::vector<std::size_t> order(f.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return f.values[a] > f.values[b]; });
  return order;
}

inline Cell cell_of(std::size_t idx, std::size_t width) {
  return Cell{static_cast<int>(idx / width), static_cast<int>(idx % width)};
}

}  // namespace detail

// Diagram points in discovery order: dimension-0 finite points, the single
// dimension-0 essential point, then dimension-1 points. Zero-persistence
// pairs are omitted.
inline PersistenceDiagram superlevel_persistence(const ScalarField2D& field) {
  field.validate();
  const std::size_t h = field.height, w = field.width, n = field.size();
  const auto order = detail::filtration_order(field);
  std::vector<long> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[order[i]] = static_cast<long>(i);
  PersistenceDiagram dgm;

  // Dimension 0: components of the superlevel set, 4-connected.
  {
    detail::DisjointSets sets(n);
    std::vector<char> in(n, 0);
    for (std::size_t pos = 0; pos < n; ++pos) {
      const std::size_t p = order[pos];
      in[p] = 1;
      sets.oldest(p) = static_cast<long>(pos);
      const std::size_t r = p / w, c = p % w;
      const std::pair<long, long> nbrs[4] = {{-1, 0}, {0, -1}, {0, 1}, {1, 0}};
      for (auto [dr, dc] : nbrs) {
        const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
        const std::size_t q = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc);
        if (!in[q]) continue;
        std::size_t rp = sets.find(p), rq = sets.find(q);
        if (rp == rq) continue;
        if (sets.oldest(rp) > sets.oldest(rq)) std::swap(rp, rq);  // rp is the elder
        const std::size_t young_birth = order[static_cast<std::size_t>(sets.oldest(rq))];
        const double birth = field.values[young_birth];
        const double death = field.values[p];
        if (birth > death) {
          dgm.points.push_back({0, birth, death, false, detail::cell_of(young_birth, w), detail::cell_of(p, w)});
        }
        sets.attach(rq, rp);
      }
    }
    dgm.points.push_back({0, field.values[order.front()], field.values[order.back()], true,
                          detail::cell_of(order.front(), w), std::nullopt});
  }

  // Dimension 1: bounded complement components, 8-connected, via the
  // reversed order. Node n is the outside of the grid.
  {
    detail::DisjointSets sets(n + 1);
    sets.oldest(n) = -1;
    std::vector<char> in(n, 0);
    for (std::size_t step = 0; step < n; ++step) {
      const std::size_t p = order[n - 1 - step];
      in[p] = 1;
      sets.oldest(p) = static_cast<long>(step);
      const std::size_t r = p / w, c = p % w;
      auto merge = [&](std::size_t q) {
        std::size_t rp = sets.find(p), rq = sets.find(q);
        if (rp == rq) return;
        if (sets.oldest(rp) > sets.oldest(rq)) std::swap(rp, rq);
        const std::size_t young_birth = order[n - 1 - static_cast<std::size_t>(sets.oldest(rq))];
        const double birth = field.values[p];
        const double death = field.values[young_birth];
        if (birth > death) {
          dgm.points.push_back({1, birth, death, false, detail::cell_of(p, w), detail::cell_of(young_birth, w)});
        }
        sets.attach(rq, rp);
      };
      if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) merge(n);
      for (long dr = -1; dr <= 1; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc);
          if (in[q]) merge(q);
        }
      }
    }
  }
  return dgm;
}

struct CriticalCells {
  Cell birth_cell;
  std::optional<Cell> death_cell;
};

// Critical pixels of each diagram point, aligned with superlevel_persistence's
// point order. value(birth_cell) == birth and value(death_cell) == death.
inline std::vector<CriticalCells> diagram_critical_cells(const ScalarField2D& field) {
  const auto dgm = superlevel_persistence(field);
  std::vector<CriticalCells> out;
  out.reserve(dgm.points.size());
  for (const auto& p : dgm.points) out.push_back({p.birth_cell, p.death_cell});
  return out;
}

// Direct flood-fill count: b0 = 4-connected components of {value >= tau},
// b1 = 8-connected components of {value < tau} not touching the border.
inline BettiNumbers betti_at_threshold(const ScalarField2D& field, double tau) {
  field.validate();
  const long h = static_cast<long>(field.height), w = static_cast<long>(field.width);
  std::vector<char> seen(field.size(), 0);
  BettiNumbers out;
  auto fill = [&](long r0, long c0, bool foreground) {
    bool touches_border = false;
    std::queue<std::pair<long, long>> q;
    q.push({r0, c0});
    seen[static_cast<std::size_t>(r0 * w + c0)] = 1;
    while (!q.empty()) {
      auto [r, c] = q.front();
      q.pop();
      if (r == 0 || c == 0 || r == h - 1 || c == w - 1) touches_border = true;
      for (long dr = -1; dr <= 1; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          if (foreground && dr != 0 && dc != 0) continue;
          const long rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
          const auto idx = static_cast<std::size_t>(rr * w + cc);
          if (seen[idx] || (field.values[idx] >= tau) != foreground) continue;
          seen[idx] = 1;
          q.push({rr, cc});
        }
      }
    }
    return touches_border;
  };
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      const auto idx = static_cast<std::size_t>(r * w + c);
      if (seen[idx]) continue;
      const bool fg = field.values[idx] >= tau;
      const bool border = fill(r, c, fg);
      if (fg) ++out.b0;
      else if (!border) ++out.b1;
    }
  return out;
}

// Betti numbers implied by a diagram at threshold tau: points with
// birth >= tau > death, plus essential points with birth >= tau.
inline BettiNumbers diagram_betti(const PersistenceDiagram& dgm, double tau) {
  BettiNumbers out;
  for (const auto& p : dgm.points) {
    const bool alive = p.essential ? p.birth >= tau : (p.birth >= tau && tau > p.death);
    if (!alive) continue;
    (p.dim == 0 ? out.b0 : out.b1) += 1;
  }
  return out;
}

// Deterministic output order: dimension, then descending persistence, then
// birth cell in scan order.
inline std::vector<std::size_t> canonical_point_order(const PersistenceDiagram& dgm) {
  std::vector<std::size_t> idx(dgm.points.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = dgm.points[a];
    const auto& pb = dgm.points[b];
    if (pa.dim != pb.dim) return pa.dim < pb.dim;
    if (pa.persistence() != pb.persistence()) return pa.persistence() > pb.persistence();
    return pa.birth_cell < pb.birth_cell;
  });
  return idx;
}

// Binary version of a soft field: 1 where value >= threshold, else 0.
inline ScalarField2D threshold_field(const ScalarField2D& f, double threshold = 0.5) {
  std::vector<double> v(f.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f.values[i] >= threshold ? 1.0 : 0.0;
  return ScalarField2D(f.height, f.width, std::move(v));
}

}  // namespace topodiff
