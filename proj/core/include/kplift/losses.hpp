#pragma once

// Training losses for the detector and the lifter.
//
//   L_l  location:      mean |Y - delta| over matched coordinates
//   L_k  keypoint type: mean cross-entropy of the matched type logits
//   L_b  category:      cross-entropy of the category logits
//   L_r  reprojection:  Huber on (Y - Pi R X), masked by zeta and visibility,
//                       averaged over supervised coordinates
//
// Hungarian matching uses L_H = L_l + L_k per sample.

#include "kplift/hungarian.hpp"
#include "kplift/tensor.hpp"

#include <Eigen/Core>

#include <span>

namespace kplift {

inline constexpr double kDefaultHuberDelta = 0.1;

struct LossWeights {
  double location = 5.0;
  double type = 1.0;
  double category = 1.0;
  double reprojection = 1.0;
  // Optional shape prior, off by default.
  double deformation = 0.0;

  // Throws unless all weights are nonnegative and one is positive.
  void validate() const;
};

struct LossComponents {
  Tensor location = Tensor::scalar(0.0);
  Tensor type = Tensor::scalar(0.0);
  Tensor category = Tensor::scalar(0.0);
  Tensor reprojection = Tensor::scalar(0.0);
  Tensor deformation = Tensor::scalar(0.0);
};

Tensor loss_location(const Tensor& gt, const Tensor& predicted);
Tensor loss_type(const Tensor& logits, std::span<const int> gt_types);
// Targets as one-hot rows (G x K).
Tensor loss_type(const Tensor& logits, const Eigen::MatrixXd& gt_onehot);
Tensor loss_category(const Tensor& logits, std::span<const int> gt_categories);
// gt, reprojection: [B,2,k]; zeta, visibility: [B,k].
Tensor loss_reprojection(const Tensor& gt, const Tensor& reprojection, const Tensor& zeta, const Tensor& visibility,
                         double huber_delta = kDefaultHuberDelta);

// Mean squared norm of the coded deformation over the category's points.
// deformation: [B,3,k]; zeta: [B,k].
Tensor loss_deformation(const Tensor& deformation, const Tensor& zeta);

Tensor total_loss(const LossComponents& parts, const LossWeights& weights);

// Per-pair matching cost for one sample, scaled so that the sum over any
// assignment equals L_l + L_k of that assignment.
//   predicted: Q x 2, type_logits: Q x K, gt: G x 2, gt_types: G.
Eigen::MatrixXd matching_cost(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& type_logits,
                              const Eigen::MatrixXd& gt, std::span<const int> gt_types);

}  // namespace kplift
