#include "kplift/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace kplift {

void LossWeights::validate() const {
  for (double w : {location, type, category, reprojection, deformation}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and nonnegative");
  }
  if (location + type + category + reprojection <= 0.0) {
    throw std::invalid_argument("at least one loss weight must be positive");
  }
}

Tensor loss_location(const Tensor& gt, const Tensor& predicted) {
  if (gt.shape() != predicted.shape()) {
    throw ShapeError("loss_location: gt " + shape_str(gt.shape()) + " vs prediction " + shape_str(predicted.shape()));
  }
  return mean(abs(sub(gt, predicted)));
}

Tensor loss_type(const Tensor& logits, std::span<const int> gt_types) { return cross_entropy(logits, gt_types); }

Tensor loss_type(const Tensor& logits, const Eigen::MatrixXd& gt_onehot) {
  std::vector<int> targets;
  for (Eigen::Index r = 0; r < gt_onehot.rows(); ++r) {
    Eigen::Index hot = -1;
    const double total = gt_onehot.row(r).sum();
    if (total != 1.0 || gt_onehot.row(r).maxCoeff(&hot) != 1.0) {
      throw std::invalid_argument("loss_type: row " + std::to_string(r) + " is not one-hot");
    }
    targets.push_back(static_cast<int>(hot));
  }
  return cross_entropy(logits, targets);
}

Tensor loss_category(const Tensor& logits, std::span<const int> gt_categories) {
  return cross_entropy(logits, gt_categories);
}

Tensor loss_reprojection(const Tensor& gt, const Tensor& reprojection, const Tensor& zeta, const Tensor& visibility,
                         double huber_delta) {
  if (gt.shape() != reprojection.shape() || gt.ndim() != 3 || gt.dim(1) != 2) {
    throw ShapeError("loss_reprojection: gt " + shape_str(gt.shape()) + " vs reprojection " +
                     shape_str(reprojection.shape()));
  }
  const std::size_t batch = gt.dim(0);
  const std::size_t k = gt.dim(2);
  if (zeta.shape() != Shape{batch, k} || visibility.shape() != Shape{batch, k}) {
    throw ShapeError("loss_reprojection: masks " + shape_str(zeta.shape()) + " / " + shape_str(visibility.shape()) +
                     " do not match " + shape_str(gt.shape()));
  }
  const Tensor weight = reshape(mul(zeta, visibility), {batch, 1, k});
  double supervised = 0.0;
  for (double w : weight.data()) supervised += w;
  supervised *= 2.0;
  if (supervised <= 0.0) throw std::invalid_argument("loss_reprojection: no supervised coordinates");
  return scale(sum(mul(huber(sub(gt, reprojection), huber_delta), weight)), 1.0 / supervised);
}

Tensor loss_deformation(const Tensor& deformation, const Tensor& zeta) {
  if (deformation.ndim() != 3 || deformation.dim(1) != 3 || zeta.shape() != Shape{deformation.dim(0), deformation.dim(2)}) {
    throw ShapeError("loss_deformation: deformation " + shape_str(deformation.shape()) + " vs mask " +
                     shape_str(zeta.shape()));
  }
  double points = 0.0;
  for (double z : zeta.data()) points += z;
  if (points <= 0.0) throw std::invalid_argument("loss_deformation: empty mask");
  const Tensor w = reshape(zeta, {zeta.dim(0), 1, zeta.dim(1)});
  return scale(sum(mul(square(deformation), w)), 1.0 / points);
}

Tensor total_loss(const LossComponents& parts, const LossWeights& weights) {
  Tensor total = add(add(scale(parts.location, weights.location), scale(parts.type, weights.type)),
                     add(scale(parts.category, weights.category), scale(parts.reprojection, weights.reprojection)));
  if (weights.deformation != 0.0) total = add(total, scale(parts.deformation, weights.deformation));
  return total;
}

Eigen::MatrixXd matching_cost(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& type_logits,
                              const Eigen::MatrixXd& gt, std::span<const int> gt_types) {
  const Eigen::Index q = predicted.rows();
  const Eigen::Index g = gt.rows();
  if (predicted.cols() != 2 || gt.cols() != 2 || type_logits.rows() != q ||
      static_cast<std::size_t>(g) != gt_types.size()) {
    throw std::invalid_argument("matching_cost: inconsistent shapes");
  }
  Eigen::VectorXd lse(q);
  for (Eigen::Index i = 0; i < q; ++i) {
    const double mx = type_logits.row(i).maxCoeff();
    lse(i) = mx + std::log((type_logits.row(i).array() - mx).exp().sum());
  }
  const double inv_g = 1.0 / static_cast<double>(g);
  Eigen::MatrixXd cost(q, g);
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < g; ++j) {
      const double l1 = std::fabs(gt(j, 0) - predicted(i, 0)) + std::fabs(gt(j, 1) - predicted(i, 1));
      const double ce = lse(i) - type_logits(i, gt_types[static_cast<std::size_t>(j)]);
      cost(i, j) = 0.5 * l1 * inv_g + ce * inv_g;
    }
  }
  return cost;
}

}  // namespace kplift
