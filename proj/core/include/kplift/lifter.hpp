#pragma once

// 2D -> 3D lifting network.
//
// Input: masked keypoints (stacked layout), the visibility mask and an
// optional context vector, concatenated and fed to an MLP trunk f. Two heads
// read the trunk: the latent map beta' = W_g f + b_g, decoded through the
// shared shape dictionary, and a 6-real rotation head.

#include "kplift/geometry.hpp"
#include "kplift/nn.hpp"
#include "kplift/shape_model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace kplift {

struct LifterConfig {
  std::size_t hidden = 256;
  std::size_t features = 128;  // F
  std::size_t latent_dim = 16;  // D
  std::size_t context_dim = 64;  // N_rho
  // false: alpha = W_g f + b_g decoded as alpha S, no ReLU and no b_S.
  bool cutoff = true;
};

struct NormalizedKeypoints {
  Keypoints2D points;  // invisible columns are zero
  Eigen::Vector2d center;
  double scale = 1.0;  // RMS radius of the visible input points
};

// Centers the visible points at zero mean and scales them to unit RMS radius.
NormalizedKeypoints normalize_keypoints(const Keypoints2D& raw, std::span<const std::uint8_t> visibility);

struct LifterInput {
  Tensor keypoints;               // [B,2,k]
  Tensor visibility;              // [B,k], 0/1
  std::optional<Tensor> context;  // [B,N_rho]; absent means zeros
  std::vector<int> categories;    // B ids
};

struct LifterOutput {
  Tensor beta_raw;      // [B,D]
  Tensor rotation_raw;  // [B,6]
  Tensor rotation;      // [B,3,3]
  Tensor structure;     // [B,3,k]
  Tensor deformation;   // [B,3,k], the coded part: ReLU(beta') S (or alpha S)
  Tensor reprojection;  // [B,2,k]
};

// Per-sample category masks as a [B,k] tensor.
Tensor category_masks(const CategoryRegistry& registry, std::span<const int> categories);

class Lifter {
 public:
  Lifter() = default;
  Lifter(const LifterConfig& config, std::size_t total_keypoints, Rng& rng);

  LifterOutput lift(const LifterInput& input, const CategoryRegistry& registry) const;

  const LifterConfig& config() const { return config_; }
  std::size_t keypoints() const { return keypoints_; }
  std::size_t input_width() const { return 3 * keypoints_ + config_.context_dim; }

  // Latent basis W_g as F x D (one column per latent atom).
  Eigen::MatrixXd latent_basis() const { return to_matrix(latent_head.weight); }

  void collect(ParamList& out) const;
  ParamList parameters() const;

  Linear trunk1;
  Linear trunk2;
  Linear trunk3;
  Linear latent_head;
  Linear rotation_head;
  ShapeDictionary shape;

 private:
  LifterConfig config_;
  std::size_t keypoints_ = 0;
};

}  // namespace kplift
