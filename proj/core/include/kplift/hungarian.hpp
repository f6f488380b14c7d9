#pragma once

#include <Eigen/Core>

#include <utility>
#include <vector>

namespace kplift {

struct MatchResult {
  // (query_index, gt_index), sorted by query index.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  // Sum of cost(q, g) over the pairs, accumulated in gt order.
  double total_cost = 0.0;

  // gt index -> query index.
  std::vector<std::size_t> query_for_gt() const;
};

// Minimum-cost injective assignment of every column (ground truth) to a row
// (query) of a Q x G cost matrix, Q >= G. O(Q^3) Kuhn-Munkres with row and
// column potentials; among optimal assignments the lexicographically smallest
// pair list is returned.
MatchResult hungarian_match(const Eigen::MatrixXd& cost);

}  // namespace kplift
