#pragma once

// Rotations, orthographic projection and the flat <-> 3 x k structure layout.
//
// Layout: a structure row vector s of length 3k stores point j as the triple
// (s[3j], s[3j+1], s[3j+2]). Rotations are decoded from 6 reals by
// Gram-Schmidt; R holds r1, r2, r3 as columns.

#include "kplift/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <span>
#include <stdexcept>

namespace kplift {

using Structure3D = Eigen::Matrix3Xd;
using Keypoints2D = Eigen::Matrix2Xd;

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kDegenerateNorm = 1e-9;
inline constexpr double kDegeneratePerturbation = 1e-6;

Eigen::Matrix3d rotation_from_6d(std::span<const double, 6> raw);
// [B,6] -> [B,3,3], differentiable.
Tensor rotation_from_6d(const Tensor& raw);
// The 6 reals that decode to R exactly (its first two columns).
std::array<double, 6> rotation_to_6d(const Eigen::Matrix3d& rotation);

Structure3D reshape_structure(std::span<const double> row);
std::vector<double> flatten_structure(const Structure3D& points);
// [B,3k] -> [B,3,k]
Tensor reshape_structure(const Tensor& rows);

Keypoints2D orthographic_project(const Eigen::Matrix3d& rotation, const Structure3D& points);
// R [B,3,3], X [B,3,k] -> [B,2,k]
Tensor orthographic_project(const Tensor& rotation, const Tensor& points);

Structure3D depth_flip(const Structure3D& points);

Eigen::Matrix3d rotation_about_x(double radians);

}  // namespace kplift
