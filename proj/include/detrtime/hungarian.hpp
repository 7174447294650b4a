#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "detrtime/common.hpp"
#include "detrtime/interval.hpp"

namespace detrtime {

// One-to-one matching of predictions to targets. pairs holds
// (prediction_index, target_index) sorted by prediction index;
// |pairs| = min(rows, cols) and total_cost is the sum of the matched
// entries taken in that order.
struct Assignment {
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  double total_cost = 0.0;
};

namespace detail {

// Shortest-augmenting-path assignment for r <= c. cost(i,j) is read through
// `at`; returns col_of_row and fills duals u (rows), v (cols).
template <typename At>
inline void lap_small_side(std::int64_t r, std::int64_t c, At at, std::vector<std::int64_t>& col_of_row,
                           std::vector<double>& u, std::vector<double>& v) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  u.assign(static_cast<std::size_t>(r + 1), 0.0);
  v.assign(static_cast<std::size_t>(c + 1), 0.0);
  // row matched to column j, 1-based; index 0 is the virtual start column
  std::vector<std::int64_t> p(static_cast<std::size_t>(c + 1), 0);
  std::vector<std::int64_t> way(static_cast<std::size_t>(c + 1), 0);
  for (std::int64_t i = 1; i <= r; ++i) {
    p[0] = i;
    std::int64_t j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(c + 1), kInf);
    std::vector<char> used(static_cast<std::size_t>(c + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const std::int64_t i0 = p[static_cast<std::size_t>(j0)];
      double delta = kInf;
      std::int64_t j1 = -1;
      for (std::int64_t j = 1; j <= c; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (std::int64_t j = 0; j <= c; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  col_of_row.assign(static_cast<std::size_t>(r), -1);
  for (std::int64_t j = 1; j <= c; ++j) {
    if (p[static_cast<std::size_t>(j)] != 0) {
      col_of_row[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
  }
}

// Kuhn's augmenting-path matching; adj is per left-node sorted candidate
// lists. Returns matched count.
inline std::int64_t kuhn_match(const std::vector<std::vector<std::int64_t>>& adj,
                               std::int64_t right_size,
                               std::vector<std::int64_t>& right_match) {
  const auto left_size = static_cast<std::int64_t>(adj.size());
  right_match.assign(static_cast<std::size_t>(right_size), -1);
  std::vector<char> visited;
  std::int64_t matched = 0;
  // recursive lambda via explicit stack-free formulation
  std::function<bool(std::int64_t)> try_augment = [&](std::int64_t l) -> bool {
    for (std::int64_t rgt : adj[static_cast<std::size_t>(l)]) {
      if (visited[static_cast<std::size_t>(rgt)]) continue;
      visited[static_cast<std::size_t>(rgt)] = 1;
      if (right_match[static_cast<std::size_t>(rgt)] < 0 ||
          try_augment(right_match[static_cast<std::size_t>(rgt)])) {
        right_match[static_cast<std::size_t>(rgt)] = l;
        return true;
      }
    }
    return false;
  };
  for (std::int64_t l = 0; l < left_size; ++l) {
    visited.assign(static_cast<std::size_t>(right_size), 0);
    if (try_augment(l)) ++matched;
  }
  return matched;
}

}  // namespace detail

// Minimum-total-cost one-to-one assignment covering the smaller side of the
// matrix. Ties between optima resolve to the lexicographically smallest pair
// set (so the lowest prediction index wins), which keeps training runs
// reproducible. Rectangular matrices are handled directly; no padding.
inline Assignment solve_assignment(const CostMatrix& cost) {
  const std::int64_t n = cost.rows;  // predictions
  const std::int64_t m = cost.cols;  // targets
  Assignment result;
  if (n == 0 || m == 0) return result;
  for (double vvv : cost.values) {
    if (!std::isfinite(vvv)) throw ShapeError("solve_assignment: non-finite cost entry");
  }

  // Run the LAP over the smaller side so every element of it gets matched.
  const bool targets_are_rows = m <= n;
  const std::int64_t r = targets_are_rows ? m : n;
  const std::int64_t c = targets_are_rows ? n : m;
  auto at = [&](std::int64_t i, std::int64_t j) {
    return targets_are_rows ? cost.at(j, i) : cost.at(i, j);
  };
  std::vector<std::int64_t> col_of_row;
  std::vector<double> u, v;
  detail::lap_small_side(r, c, at, col_of_row, u, v);

  auto emit = [&](const std::vector<std::int64_t>& cor) {
    Assignment a;
    a.pairs.reserve(static_cast<std::size_t>(r));
    for (std::int64_t i = 0; i < r; ++i) {
      const std::int64_t j = cor[static_cast<std::size_t>(i)];
      if (targets_are_rows) {
        a.pairs.emplace_back(j, i);
      } else {
        a.pairs.emplace_back(i, j);
      }
    }
    std::sort(a.pairs.begin(), a.pairs.end());
    a.total_cost = 0.0;
    for (const auto& [pi, tj] : a.pairs) a.total_cost += cost.at(pi, tj);
    return a;
  };
  Assignment base = emit(col_of_row);

  // Tight-edge tie-break. Complementary slackness: every optimal matching
  // uses only edges with zero reduced cost, and any perfect matching of the
  // small side on tight edges is optimal. If more tight edges exist than the
  // matching uses, pick the lexicographically smallest perfect matching on
  // the tight graph.
  double max_abs = 1.0;
  for (double x : cost.values) max_abs = std::max(max_abs, std::abs(x));
  const double tol = 1e-9 * max_abs;
  std::int64_t tight_count = 0;
  std::vector<std::vector<std::int64_t>> tight(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      const double rc = at(i, j) - u[static_cast<std::size_t>(i + 1)] -
                        v[static_cast<std::size_t>(j + 1)];
      if (rc <= tol) {
        tight[static_cast<std::size_t>(i)].push_back(j);
        ++tight_count;
      }
    }
  }
  if (tight_count <= r) return base;  // matching is forced; nothing to break

  // Fix pairs in ascending (prediction, target) order. In the internal
  // (row, col) frame that is: ascending prediction always, so when targets
  // are rows we scan candidate predictions (cols) outermost.
  std::vector<char> row_fixed(static_cast<std::size_t>(r), 0);
  std::vector<char> col_fixed(static_cast<std::size_t>(c), 0);
  std::vector<std::pair<std::int64_t, std::int64_t>> fixed_pairs;  // (pred, tgt)

  auto feasible_rest = [&](std::int64_t min_free_col) {
    // Can all unfixed rows be matched using unfixed cols >= constraints?
    std::vector<std::int64_t> rows_left;
    for (std::int64_t i = 0; i < r; ++i) {
      if (!row_fixed[static_cast<std::size_t>(i)]) rows_left.push_back(i);
    }
    std::vector<std::vector<std::int64_t>> adj(rows_left.size());
    for (std::size_t k = 0; k < rows_left.size(); ++k) {
      for (std::int64_t j : tight[static_cast<std::size_t>(rows_left[k])]) {
        if (!col_fixed[static_cast<std::size_t>(j)] && j >= min_free_col) {
          adj[k].push_back(j);
        }
      }
    }
    std::vector<std::int64_t> right_match;
    return detail::kuhn_match(adj, c, right_match) ==
           static_cast<std::int64_t>(rows_left.size());
  };

  if (targets_are_rows) {
    // Predictions are cols; walk them in ascending order and match each to
    // the smallest feasible target (row).
    for (std::int64_t j = 0; j < c && static_cast<std::int64_t>(fixed_pairs.size()) < r; ++j) {
      for (std::int64_t i = 0; i < r; ++i) {
        if (row_fixed[static_cast<std::size_t>(i)]) continue;
        const auto& cand = tight[static_cast<std::size_t>(i)];
        if (!std::binary_search(cand.begin(), cand.end(), j)) continue;
        row_fixed[static_cast<std::size_t>(i)] = 1;
        col_fixed[static_cast<std::size_t>(j)] = 1;
        if (feasible_rest(j + 1)) {
          fixed_pairs.emplace_back(j, i);  // (pred, tgt)
          break;
        }
        row_fixed[static_cast<std::size_t>(i)] = 0;
        col_fixed[static_cast<std::size_t>(j)] = 0;
      }
    }
  } else {
    // Predictions are rows; every row gets matched, so for each row take the
    // smallest feasible col.
    for (std::int64_t i = 0; i < r; ++i) {
      for (std::int64_t j : tight[static_cast<std::size_t>(i)]) {
        if (col_fixed[static_cast<std::size_t>(j)]) continue;
        row_fixed[static_cast<std::size_t>(i)] = 1;
        col_fixed[static_cast<std::size_t>(j)] = 1;
        if (feasible_rest(0)) {
          fixed_pairs.emplace_back(i, j);  // (pred, tgt)
          break;
        }
        row_fixed[static_cast<std::size_t>(i)] = 0;
        col_fixed[static_cast<std::size_t>(j)] = 0;
      }
    }
  }

  if (static_cast<std::int64_t>(fixed_pairs.size()) != r) return base;
  Assignment refined;
  refined.pairs = std::move(fixed_pairs);
  std::sort(refined.pairs.begin(), refined.pairs.end());
  refined.total_cost = 0.0;
  for (const auto& [pi, tj] : refined.pairs) refined.total_cost += cost.at(pi, tj);
  // The tolerance could in principle admit a near-tight edge; never return
  // anything costlier than the certified optimum.
  if (refined.total_cost > base.total_cost + tol * static_cast<double>(r)) return base;
  return refined;
}

}  // namespace detrtime
