#pragma once

// 3D evaluation: zero-mean MPJPE with the best of two depth flips, Stress,
// and mutual coherence of a latent basis.

#include "kplift/geometry.hpp"

#include <Eigen/Core>

#include <iosfwd>
#include <string>
#include <vector>

namespace kplift {

struct MpjpeResult {
  double value = 0.0;
  bool flipped = false;  // the depth-flipped prediction scored strictly better
};

MpjpeResult mpjpe_detail(const Structure3D& predicted, const Structure3D& truth);
double mpjpe(const Structure3D& predicted, const Structure3D& truth);
// Sum over i<j of the absolute pairwise-distance difference, over K(K-1).
double stress(const Structure3D& predicted, const Structure3D& truth);
// max over i != j of |<w_i, w_j>| / (|w_i| |w_j|), over the columns of w.
double mutual_coherence(const Eigen::MatrixXd& w);

struct CategoryMetrics {
  std::string name;
  std::size_t samples = 0;
  double mpjpe = 0.0;
  double stress = 0.0;
};

struct EvalReport {
  double mpjpe = 0.0;
  double stress = 0.0;
  double flip_fraction = 0.0;
  std::size_t samples = 0;
  // Only meaningful for image-based evaluation.
  double category_accuracy = 1.0;
  std::vector<CategoryMetrics> per_category;

  void write_table(std::ostream& out) const;
  // One "key value" pair per line.
  void write_key_values(std::ostream& out) const;
};

// Accumulates per-sample scores in insertion order.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(std::vector<std::string> category_names);
  void add(int category, const Structure3D& predicted, const Structure3D& truth, bool category_correct = true);
  EvalReport report() const;

 private:
  std::vector<std::string> names_;
  std::vector<double> mpjpe_sum_;
  std::vector<double> stress_sum_;
  std::vector<std::size_t> count_;
  std::size_t flips_ = 0;
  std::size_t correct_ = 0;
};

}  // namespace kplift
