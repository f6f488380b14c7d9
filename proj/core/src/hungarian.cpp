#include "kplift/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace kplift {

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

// Square assignment (rows -> columns) with dual potentials, 0-based.
struct SquareSolution {
  std::vector<std::size_t> col_of_row;
  std::vector<std::size_t> row_of_col;
  std::vector<double> u;
  std::vector<double> v;
};

SquareSolution solve_square(const Eigen::MatrixXd& c) {
  const std::size_t n = static_cast<std::size_t>(c.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
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
  SquareSolution s;
  s.col_of_row.assign(n, kNone);
  s.row_of_col.assign(n, kNone);
  for (std::size_t j = 1; j <= n; ++j) {
    s.row_of_col[j - 1] = p[j] - 1;
    s.col_of_row[p[j] - 1] = j - 1;
  }
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

// Re-routes row `row` onto column `target` inside the tight subgraph using
// only rows > row, keeping the matching perfect. Returns false if impossible.
bool reroute(std::size_t row, std::size_t target, const std::vector<std::vector<char>>& tight,
             std::vector<std::size_t>& col_of_row, std::vector<std::size_t>& row_of_col) {
  const std::size_t n = col_of_row.size();
  const std::size_t freed_col = col_of_row[row];
  const std::size_t start = row_of_col[target];
  if (start == row) return true;
  // BFS over rows: from `start` (which loses `target`) find an alternating
  // path ending at freed_col.
  std::vector<std::size_t> parent_row(n, kNone);
  std::vector<char> seen_row(n, 0);
  std::vector<std::size_t> queue{start};
  seen_row[start] = 1;
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const std::size_t r = queue[head];
    for (std::size_t cidx = 0; cidx < n; ++cidx) {
      if (!tight[r][cidx] || cidx == target || cidx == col_of_row[r]) continue;
      if (cidx == freed_col) {
        // Unwind: r takes freed_col, its old column passes up the chain.
        std::size_t cur = r;
        std::size_t take = freed_col;
        while (cur != kNone) {
          const std::size_t old = col_of_row[cur];
          col_of_row[cur] = take;
          row_of_col[take] = cur;
          take = old;
          cur = parent_row[cur];
        }
        col_of_row[row] = target;
        row_of_col[target] = row;
        return true;
      }
      const std::size_t next = row_of_col[cidx];
      if (next <= row || seen_row[next]) continue;
      seen_row[next] = 1;
      parent_row[next] = r;
      queue.push_back(next);
    }
  }
  return false;
}

}  // namespace

std::vector<std::size_t> MatchResult::query_for_gt() const {
  std::vector<std::size_t> out(pairs.size(), kNone);
  for (const auto& [q, g] : pairs) {
    if (g < out.size()) out[g] = q;
  }
  return out;
}

MatchResult hungarian_match(const Eigen::MatrixXd& cost) {
  const auto q = static_cast<std::size_t>(cost.rows());
  const auto g = static_cast<std::size_t>(cost.cols());
  if (q < g) {
    throw std::invalid_argument("hungarian_match: " + std::to_string(q) + " queries cannot cover " + std::to_string(g) +
                                " ground-truth keypoints");
  }
  if (!cost.allFinite()) throw std::invalid_argument("hungarian_match: non-finite cost");
  MatchResult result;
  if (g == 0) return result;

  // Pad with zero-cost dummy columns: a query on a dummy column is unmatched.
  Eigen::MatrixXd square = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
  square.leftCols(static_cast<Eigen::Index>(g)) = cost;
  SquareSolution sol = solve_square(square);

  auto total_of = [&](const std::vector<std::size_t>& row_of_col) {
    double total = 0.0;
    for (std::size_t j = 0; j < g; ++j) total += cost(static_cast<Eigen::Index>(row_of_col[j]), static_cast<Eigen::Index>(j));
    return total;
  };
  const double base_total = total_of(sol.row_of_col);

  // Lexicographic refinement inside the subgraph of zero reduced cost.
  const double tol = 1e-12 * (1.0 + square.cwiseAbs().maxCoeff());
  std::vector<std::vector<char>> tight(q, std::vector<char>(q, 0));
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      tight[i][j] = std::fabs(square(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - sol.u[i] - sol.v[j]) <= tol;
    }
    tight[i][sol.col_of_row[i]] = 1;
  }
  std::vector<std::size_t> col_of_row = sol.col_of_row;
  std::vector<std::size_t> row_of_col = sol.row_of_col;
  for (std::size_t i = 0; i < q; ++i) {
    // A real column always beats staying unmatched, and smaller beats larger.
    for (std::size_t j = 0; j < g && col_of_row[i] != j; ++j) {
      if (!tight[i][j] || row_of_col[j] < i) continue;
      if (reroute(i, j, tight, col_of_row, row_of_col)) break;
    }
  }
  if (total_of(row_of_col) > base_total) row_of_col = sol.row_of_col;

  for (std::size_t j = 0; j < g; ++j) result.pairs.emplace_back(row_of_col[j], j);
  std::sort(result.pairs.begin(), result.pairs.end());
  result.total_cost = total_of(row_of_col);
  return result;
}

}  // namespace kplift
