#pragma once

// 1-Wasserstein distance between persistence diagrams.
//
// Finite points are matched per homology dimension on the augmented square
// cost matrix: rows are the points of A followed by one diagonal slot per
// point of B, columns are the points of B followed by one diagonal slot per
// point of A. Ground metric is L-infinity; a point's distance to the diagonal
// is |birth - death| / 2. Essential points are matched among themselves by
// |birth_A - birth_B| and never to the diagonal.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/topology.hpp"

namespace topodiff {

inline constexpr long kDiagonal = -1;

struct MatchedPair {
  long a = kDiagonal;  // index into A's points, or kDiagonal
  long b = kDiagonal;  // index into B's points, or kDiagonal
  double cost = 0.0;
};

struct DiagramMatching {
  std::vector<MatchedPair> pairs;
  double cost = 0.0;
};

// Which homology dimensions contribute to the distance.
struct DimensionSelection {
  bool dim0 = true;
  bool dim1 = true;
  bool includes(int dim) const { return dim == 0 ? dim0 : dim1; }
};

inline double linf_distance(const PersistencePoint& p, const PersistencePoint& q) {
  return std::max(std::abs(p.birth - q.birth), std::abs(p.death - q.death));
}

inline double diagonal_distance(const PersistencePoint& p) { return std::abs(p.birth - p.death) / 2.0; }

// Sum of per-pair costs in ascending order, so two routes that find the same
// matching report bit-identical totals.
inline double canonical_sum(std::vector<double> costs) {
  std::sort(costs.begin(), costs.end());
  double total = 0.0;
  for (double c : costs) total += c;
  return total;
}

namespace detail {

// Dense square assignment solver (shortest augmenting paths with potentials).
// Returns row -> column and fills the dual potentials u (rows) and v (cols)
// so that cost[i][j] - u[i] - v[j] >= 0 with equality on the assignment.
struct AssignmentSolution {
  std::vector<long> row_to_col;
  std::vector<double> u, v;
};

inline AssignmentSolution solve_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  AssignmentSolution sol;
  sol.row_to_col.assign(n, -1);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) sol.row_to_col[p[j] - 1] = static_cast<long>(j - 1);
  sol.u.assign(u.begin() + 1, u.end());
  sol.v.assign(v.begin() + 1, v.end());
  return sol;
}

// Among all optimal assignments (perfect matchings on tight edges), picks the
// one whose first `ordered_rows` rows take the smallest admissible column
// class in turn. Column classes: columns below `class_split` are their own
// class, all columns from class_split on form one trailing class.
inline std::vector<long> lexicographic_refine(const std::vector<std::vector<double>>& cost,
                                              const AssignmentSolution& sol, std::size_t ordered_rows,
                                              std::size_t class_split) {
  const std::size_t n = cost.size();
  double scale = 1.0;
  for (const auto& row : cost)
    for (double c : row) scale = std::max(scale, std::abs(c));
  const double tol = 1e-11 * scale;
  auto tight = [&](std::size_t i, std::size_t j) { return cost[i][j] - sol.u[i] - sol.v[j] <= tol; };

  std::vector<long> row_to_col = sol.row_to_col;
  std::vector<long> col_to_row(n, -1);
  for (std::size_t i = 0; i < n; ++i) col_to_row[static_cast<std::size_t>(row_to_col[i])] = static_cast<long>(i);
  std::vector<char> fixed(n, 0);

  // Re-route so that row i takes column j: the row holding j moves along an
  // alternating path of tight edges that ends in i's current column.
  auto try_assign = [&](std::size_t i, std::size_t j) -> bool {
    const auto target = static_cast<std::size_t>(row_to_col[i]);
    const auto r0 = static_cast<std::size_t>(col_to_row[j]);
    if (fixed[r0]) return false;
    std::vector<long> reached_from(n, -1);  // column -> row that reached it
    std::vector<char> row_seen(n, 0);
    row_seen[r0] = 1;
    row_seen[i] = 1;
    std::vector<std::size_t> queue{r0};
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t x = queue[head];
      for (std::size_t c = 0; c < n; ++c) {
        if (c == j || reached_from[c] >= 0 || !tight(x, c)) continue;
        reached_from[c] = static_cast<long>(x);
        if (c == target) {
          std::size_t col = c;
          while (true) {
            const auto row = static_cast<std::size_t>(reached_from[col]);
            const auto old = static_cast<std::size_t>(row_to_col[row]);
            row_to_col[row] = static_cast<long>(col);
            col_to_row[col] = static_cast<long>(row);
            if (row == r0) break;
            col = old;
          }
          row_to_col[i] = static_cast<long>(j);
          col_to_row[j] = static_cast<long>(i);
          return true;
        }
        const auto y = static_cast<std::size_t>(col_to_row[c]);
        if (row_seen[y] || fixed[y]) continue;
        row_seen[y] = 1;
        queue.push_back(y);
      }
    }
    return false;
  };

  for (std::size_t i = 0; i < ordered_rows; ++i) {
    const auto current_class = std::min(static_cast<std::size_t>(row_to_col[i]), class_split);
    for (std::size_t j = 0; j < current_class; ++j) {
      if (tight(i, j) && try_assign(i, j)) break;
    }
    fixed[i] = 1;
  }
  return row_to_col;
}

inline double essential_penalty(const PersistencePoint& p, const std::vector<const PersistencePoint*>& others) {
  if (others.empty()) return p.persistence();
  double best = std::numeric_limits<double>::infinity();
  for (const auto* q : others) best = std::min(best, std::abs(p.birth - q->birth));
  return best;
}

}  // namespace detail

// Exact W1 with the optimal matching. Pairs list finite matches per dimension
// (dimension 0 first), then essential matches.
inline DiagramMatching w1_distance(const PersistenceDiagram& a, const PersistenceDiagram& b,
                                   DimensionSelection dims = {}) {
  DiagramMatching result;
  std::vector<double> costs;
  for (int dim = 0; dim <= 1; ++dim) {
    if (!dims.includes(dim)) continue;
    const auto ia = a.indices(dim, false);
    const auto ib = b.indices(dim, false);
    const std::size_t n = ia.size(), m = ib.size(), size = n + m;
    if (size > 0) {
      std::vector<std::vector<double>> cost(size, std::vector<double>(size, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        const auto& p = a.points[ia[i]];
        for (std::size_t j = 0; j < m; ++j) cost[i][j] = linf_distance(p, b.points[ib[j]]);
        for (std::size_t j = m; j < size; ++j) cost[i][j] = diagonal_distance(p);
      }
      for (std::size_t i = n; i < size; ++i)
        for (std::size_t j = 0; j < m; ++j) cost[i][j] = diagonal_distance(b.points[ib[j]]);
      const auto sol = detail::solve_assignment(cost);
      const auto rows = detail::lexicographic_refine(cost, sol, n, m);
      std::vector<char> b_used(m, 0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(rows[i]);
        MatchedPair pair;
        pair.a = static_cast<long>(ia[i]);
        if (j < m) {
          pair.b = static_cast<long>(ib[j]);
          b_used[j] = 1;
        }
        pair.cost = cost[i][j];
        result.pairs.push_back(pair);
        costs.push_back(pair.cost);
      }
      for (std::size_t j = 0; j < m; ++j) {
        if (b_used[j]) continue;
        MatchedPair pair{kDiagonal, static_cast<long>(ib[j]), diagonal_distance(b.points[ib[j]])};
        result.pairs.push_back(pair);
        costs.push_back(pair.cost);
      }
    }
  }
  for (int dim = 0; dim <= 1; ++dim) {
    if (!dims.includes(dim)) continue;
    auto ea = a.indices(dim, true);
    auto eb = b.indices(dim, true);
    if (ea.empty() && eb.empty()) continue;
    auto by_birth = [](const PersistenceDiagram& d) {
      return [&d](std::size_t x, std::size_t y) { return d.points[x].birth < d.points[y].birth; };
    };
    std::stable_sort(ea.begin(), ea.end(), by_birth(a));
    std::stable_sort(eb.begin(), eb.end(), by_birth(b));
    if (ea.size() == eb.size()) {
      for (std::size_t k = 0; k < ea.size(); ++k) {
        const double c = std::abs(a.points[ea[k]].birth - b.points[eb[k]].birth);
        result.pairs.push_back({static_cast<long>(ea[k]), static_cast<long>(eb[k]), c});
        costs.push_back(c);
      }
    } else {
      // Unequal essential counts: rectangular assignment, extras pay their
      // distance to the nearest essential birth on the other side.
      std::vector<const PersistencePoint*> pa, pb;
      for (auto i : ea) pa.push_back(&a.points[i]);
      for (auto j : eb) pb.push_back(&b.points[j]);
      const std::size_t n = ea.size(), m = eb.size(), size = n + m;
      std::vector<std::vector<double>> cost(size, std::vector<double>(size, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) cost[i][j] = std::abs(pa[i]->birth - pb[j]->birth);
        for (std::size_t j = m; j < size; ++j) cost[i][j] = detail::essential_penalty(*pa[i], pb);
      }
      for (std::size_t i = n; i < size; ++i)
        for (std::size_t j = 0; j < m; ++j) cost[i][j] = detail::essential_penalty(*pb[j], pa);
      const auto sol = detail::solve_assignment(cost);
      const auto rows = detail::lexicographic_refine(cost, sol, n, m);
      std::vector<char> b_used(m, 0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(rows[i]);
        MatchedPair pair{static_cast<long>(ea[i]), kDiagonal, cost[i][j]};
        if (j < m) {
          pair.b = static_cast<long>(eb[j]);
          b_used[j] = 1;
        }
        result.pairs.push_back(pair);
        costs.push_back(pair.cost);
      }
      for (std::size_t j = 0; j < m; ++j) {
        if (b_used[j]) continue;
        const double c = detail::essential_penalty(*pb[j], pa);
        result.pairs.push_back({kDiagonal, static_cast<long>(eb[j]), c});
        costs.push_back(c);
      }
    }
  }
  result.cost = canonical_sum(std::move(costs));
  return result;
}

// Exhaustive search over all partial matchings; oracle for w1_distance.
// Limited to 8 points per dimension (finite and essential counted separately).
inline double brute_force_w1(const PersistenceDiagram& a, const PersistenceDiagram& b,
                             DimensionSelection dims = {}) {
  std::vector<double> all_costs;
  for (int dim = 0; dim <= 1; ++dim) {
    if (!dims.includes(dim)) continue;
    for (bool essential : {false, true}) {
      const auto ia = a.indices(dim, essential);
      const auto ib = b.indices(dim, essential);
      if (ia.size() + ib.size() > 8) {
        throw OracleSizeError("brute_force_w1: " + std::to_string(ia.size() + ib.size()) +
                              " points in one dimension exceeds the oracle cap of 8");
      }
      std::vector<const PersistencePoint*> pa, pb;
      for (auto i : ia) pa.push_back(&a.points[i]);
      for (auto j : ib) pb.push_back(&b.points[j]);
      auto pair_cost = [&](const PersistencePoint& p, const PersistencePoint& q) {
        return essential ? std::abs(p.birth - q.birth) : linf_distance(p, q);
      };
      auto lone_cost = [&](const PersistencePoint& p, const std::vector<const PersistencePoint*>& other) {
        return essential ? detail::essential_penalty(p, other) : diagonal_distance(p);
      };
      double best = std::numeric_limits<double>::infinity();
      std::vector<double> best_costs;
      std::vector<double> current;
      std::vector<char> used(pb.size(), 0);
      std::function<void(std::size_t, double)> recurse = [&](std::size_t i, double partial) {
        if (i == pa.size()) {
          double total = partial;
          std::vector<double> costs = current;
          for (std::size_t j = 0; j < pb.size(); ++j) {
            if (used[j]) continue;
            const double c = lone_cost(*pb[j], pa);
            total += c;
            costs.push_back(c);
          }
          if (total < best) {
            best = total;
            best_costs = std::move(costs);
          }
          return;
        }
        for (std::size_t j = 0; j < pb.size(); ++j) {
          if (used[j]) continue;
          used[j] = 1;
          const double c = pair_cost(*pa[i], *pb[j]);
          current.push_back(c);
          recurse(i + 1, partial + c);
          current.pop_back();
          used[j] = 0;
        }
        // Equal essential counts are always matched one-to-one.
        if (!essential || pa.size() != pb.size()) {
          const double c = lone_cost(*pa[i], pb);
          current.push_back(c);
          recurse(i + 1, partial + c);
          current.pop_back();
        }
      };
      recurse(0, 0.0);
      all_costs.insert(all_costs.end(), best_costs.begin(), best_costs.end());
    }
  }
  return canonical_sum(std::move(all_costs));
}

// Gradient of the matching cost with respect to the birth and death values of
// A's points, holding the matching fixed. Indexed like a.points.
struct PointGradient {
  double d_birth = 0.0;
  double d_death = 0.0;
};

inline std::vector<PointGradient> w1_gradient_wrt_a(const PersistenceDiagram& a, const PersistenceDiagram& b,
                                                     const DiagramMatching& m) {
  auto sgn = [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); };
  std::vector<PointGradient> g(a.points.size());
  for (const auto& pair : m.pairs) {
    if (pair.a == kDiagonal) continue;
    const auto& p = a.points[static_cast<std::size_t>(pair.a)];
    auto& gp = g[static_cast<std::size_t>(pair.a)];
    if (p.essential) {
      if (pair.b != kDiagonal) gp.d_birth += sgn(p.birth - b.points[static_cast<std::size_t>(pair.b)].birth);
      continue;
    }
    if (pair.b == kDiagonal) {
      const double s = sgn(p.birth - p.death);
      gp.d_birth += 0.5 * s;
      gp.d_death -= 0.5 * s;
    } else {
      const auto& q = b.points[static_cast<std::size_t>(pair.b)];
      const double db = p.birth - q.birth, dd = p.death - q.death;
      if (std::abs(db) >= std::abs(dd)) gp.d_birth += sgn(db);
      else gp.d_death += sgn(dd);
    }
  }
  return g;
}

}  // namespace topodiff
