#include "kplift/geometry.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <string>

namespace kplift {

namespace {

constexpr std::array<double, 6> kPerturbation = {kDegeneratePerturbation, 0.0, 0.0, 0.0, kDegeneratePerturbation, 0.0};

// Returns false when either Gram-Schmidt norm is below the threshold.
bool gram_schmidt(const double* raw, Eigen::Matrix3d& out) {
  const Eigen::Vector3d a1(raw[0], raw[1], raw[2]);
  const Eigen::Vector3d a2(raw[3], raw[4], raw[5]);
  const double n1 = a1.norm();
  if (n1 < kDegenerateNorm) return false;
  const Eigen::Vector3d r1 = a1 / n1;
  const Eigen::Vector3d u2 = a2 - r1.dot(a2) * r1;
  const double n2 = u2.norm();
  if (n2 < kDegenerateNorm) return false;
  const Eigen::Vector3d r2 = u2 / n2;
  out.col(0) = r1;
  out.col(1) = r2;
  out.col(2) = r1.cross(r2);
  return true;
}

Tensor column_component(const Tensor& v, std::size_t i) { return slice(v, 1, i, 1); }

}  // namespace

Eigen::Matrix3d rotation_from_6d(std::span<const double, 6> raw) {
  Eigen::Matrix3d r;
  if (gram_schmidt(raw.data(), r)) return r;
  std::array<double, 6> nudged{};
  for (std::size_t i = 0; i < 6; ++i) nudged[i] = raw[i] + kPerturbation[i];
  if (gram_schmidt(nudged.data(), r)) return r;
  throw GeometryError("rotation_from_6d: degenerate input (zero or parallel vectors)");
}

Tensor rotation_from_6d(const Tensor& raw) {
  if (raw.ndim() != 2 || raw.dim(1) != 6) {
    throw ShapeError("rotation_from_6d: expected [B,6], got " + shape_str(raw.shape()));
  }
  const std::size_t batch = raw.dim(0);
  // Degenerate rows get the same one-shot nudge as the scalar version.
  std::vector<double> nudge(raw.numel(), 0.0);
  bool any = false;
  Eigen::Matrix3d scratch;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = raw.data().data() + 6 * b;
    if (gram_schmidt(row, scratch)) continue;
    std::array<double, 6> nudged{};
    for (std::size_t i = 0; i < 6; ++i) nudged[i] = row[i] + kPerturbation[i];
    if (!gram_schmidt(nudged.data(), scratch)) {
      throw GeometryError("rotation_from_6d: degenerate input in row " + std::to_string(b));
    }
    std::copy(kPerturbation.begin(), kPerturbation.end(), nudge.begin() + static_cast<std::ptrdiff_t>(6 * b));
    any = true;
  }
  const Tensor input = any ? add(raw, Tensor::from(raw.shape(), std::move(nudge))) : raw;

  const Tensor a1 = slice(input, 1, 0, 3);
  const Tensor a2 = slice(input, 1, 3, 3);
  const Tensor r1 = div(a1, reshape(sqrt(sum_last(square(a1))), {batch, 1}));
  const Tensor proj = reshape(sum_last(mul(r1, a2)), {batch, 1});
  const Tensor u2 = sub(a2, mul(proj, r1));
  const Tensor r2 = div(u2, reshape(sqrt(sum_last(square(u2))), {batch, 1}));
  const Tensor x1 = column_component(r1, 0), y1 = column_component(r1, 1), z1 = column_component(r1, 2);
  const Tensor x2 = column_component(r2, 0), y2 = column_component(r2, 1), z2 = column_component(r2, 2);
  const Tensor r3 = concat({sub(mul(y1, z2), mul(z1, y2)), sub(mul(z1, x2), mul(x1, z2)), sub(mul(x1, y2), mul(y1, x2))}, 1);
  // Columns of R are r1, r2, r3.
  return concat({reshape(r1, {batch, 3, 1}), reshape(r2, {batch, 3, 1}), reshape(r3, {batch, 3, 1})}, 2);
}

std::array<double, 6> rotation_to_6d(const Eigen::Matrix3d& rotation) {
  return {rotation(0, 0), rotation(1, 0), rotation(2, 0), rotation(0, 1), rotation(1, 1), rotation(2, 1)};
}

Structure3D reshape_structure(std::span<const double> row) {
  if (row.size() % 3 != 0) {
    throw GeometryError("reshape_structure: length " + std::to_string(row.size()) + " is not divisible by 3");
  }
  const auto k = static_cast<Eigen::Index>(row.size() / 3);
  Structure3D points(3, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (Eigen::Index c = 0; c < 3; ++c) points(c, j) = row[static_cast<std::size_t>(3 * j + c)];
  }
  return points;
}

std::vector<double> flatten_structure(const Structure3D& points) {
  std::vector<double> row(static_cast<std::size_t>(points.size()));
  for (Eigen::Index j = 0; j < points.cols(); ++j) {
    for (Eigen::Index c = 0; c < 3; ++c) row[static_cast<std::size_t>(3 * j + c)] = points(c, j);
  }
  return row;
}

Tensor reshape_structure(const Tensor& rows) {
  if (rows.ndim() != 2 || rows.dim(1) % 3 != 0) {
    throw GeometryError("reshape_structure: expected [B,3k], got " + shape_str(rows.shape()));
  }
  return transpose_last2(reshape(rows, {rows.dim(0), rows.dim(1) / 3, 3}));
}

Keypoints2D orthographic_project(const Eigen::Matrix3d& rotation, const Structure3D& points) {
  return (rotation * points).topRows<2>();
}

Tensor orthographic_project(const Tensor& rotation, const Tensor& points) {
  return slice(bmm(rotation, points), 1, 0, 2);
}

Structure3D depth_flip(const Structure3D& points) {
  Structure3D out = points;
  out.row(2) = -out.row(2);
  return out;
}

Eigen::Matrix3d rotation_about_x(double radians) {
  return Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitX()).toRotationMatrix();
}

}  // namespace kplift
