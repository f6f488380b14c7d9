#include "kplift/shape_model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace kplift {

int CategoryRegistry::register_category(CategorySchema schema) {
  if (find(schema.name)) throw std::invalid_argument("register_category: duplicate category name '" + schema.name + "'");
  if (schema.keypoint_count() < kMinKeypointsPerCategory) {
    throw std::invalid_argument("register_category: '" + schema.name + "' has " +
                                std::to_string(schema.keypoint_count()) + " keypoints, need at least 3");
  }
  std::set<std::string> names(schema.keypoint_names.begin(), schema.keypoint_names.end());
  if (names.size() != schema.keypoint_names.size()) {
    throw std::invalid_argument("register_category: '" + schema.name + "' has repeated keypoint names");
  }
  schema.id = static_cast<int>(categories_.size());
  schema.block_offset = total_;
  total_ += schema.keypoint_count();
  categories_.push_back(std::move(schema));
  return categories_.back().id;
}

const CategorySchema& CategoryRegistry::at(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= categories_.size()) {
    throw std::out_of_range("unknown category id " + std::to_string(id));
  }
  return categories_[static_cast<std::size_t>(id)];
}

std::optional<int> CategoryRegistry::find(std::string_view name) const {
  for (const auto& c : categories_) {
    if (c.name == name) return c.id;
  }
  return std::nullopt;
}

std::size_t CategoryRegistry::max_keypoints() const {
  std::size_t k = 0;
  for (const auto& c : categories_) k = std::max(k, c.keypoint_count());
  return k;
}

std::vector<double> CategoryRegistry::mask(int id) const {
  const auto& c = at(id);
  std::vector<double> zeta(total_, 0.0);
  std::fill_n(zeta.begin() + static_cast<std::ptrdiff_t>(c.block_offset), c.keypoint_count(), 1.0);
  return zeta;
}

ShapeDictionary ShapeDictionary::initialize(std::size_t latent_dim, std::size_t keypoints, Rng& rng) {
  return {normal_parameter({latent_dim, 3 * keypoints}, 1.0 / std::sqrt(static_cast<double>(latent_dim)), rng),
          constant_parameter({3 * keypoints}, 0.0)};
}

void ShapeDictionary::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".basis", basis});
  out.push_back({prefix + ".bias", bias});
}

Tensor cutoff_decode(const Tensor& beta_raw, const ShapeDictionary& dict) {
  if (beta_raw.ndim() != 2 || beta_raw.dim(1) != dict.latent_dim()) {
    throw ShapeError("cutoff_decode: code " + shape_str(beta_raw.shape()) + " does not match basis " +
                     shape_str(dict.basis.shape()));
  }
  return reshape_structure(add(matmul(relu(beta_raw), dict.basis), dict.bias));
}

Tensor linear_decode(const Tensor& alpha, const ShapeDictionary& dict) {
  if (alpha.ndim() != 2 || alpha.dim(1) != dict.latent_dim()) {
    throw ShapeError("linear_decode: code " + shape_str(alpha.shape()) + " does not match basis " +
                     shape_str(dict.basis.shape()));
  }
  return reshape_structure(matmul(alpha, dict.basis));
}

Structure3D cutoff_decode(std::span<const double> beta_raw, const ShapeDictionary& dict) {
  const Tensor out = cutoff_decode(Tensor::from({1, beta_raw.size()}, {beta_raw.begin(), beta_raw.end()}), dict);
  const std::size_t k = dict.keypoints();
  Structure3D points(3, static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < k; ++j) points(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = out[c * k + j];
  }
  return points;
}

Structure3D cross_category_decode(std::span<const double> beta_raw, int category, const ShapeDictionary& dict,
                                  const CategoryRegistry& registry) {
  const auto& schema = registry.at(category);
  const Structure3D full = cutoff_decode(beta_raw, dict);
  return full.middleCols(static_cast<Eigen::Index>(schema.block_offset), static_cast<Eigen::Index>(schema.keypoint_count()));
}

OracleResult expressiveness_oracle(const Eigen::MatrixXd& alphas, const Eigen::MatrixXd& basis) {
  return expressiveness_oracle(alphas, basis, Eigen::VectorXd::Zero(alphas.cols()));
}

OracleResult expressiveness_oracle(const Eigen::MatrixXd& alphas, const Eigen::MatrixXd& basis,
                                   const Eigen::VectorXd& eps) {
  if (alphas.rows() < 1) throw std::invalid_argument("expressiveness_oracle: need at least one sample");
  if (alphas.cols() != basis.rows() || eps.size() != alphas.cols()) {
    throw std::invalid_argument("expressiveness_oracle: latent dimensions disagree");
  }
  OracleResult r;
  r.minima = alphas.colwise().minCoeff();
  const Eigen::RowVectorXd shift = r.minima - eps.transpose();
  r.betas = alphas.rowwise() - shift;
  r.bias = shift * basis;
  return r;
}

std::vector<std::size_t> inactive_atoms(const Eigen::MatrixXd& beta_raw, double fraction) {
  std::vector<std::size_t> out;
  if (beta_raw.rows() == 0) return out;
  for (Eigen::Index d = 0; d < beta_raw.cols(); ++d) {
    const auto zeros = (beta_raw.col(d).array() <= 0.0).count();
    if (static_cast<double>(zeros) > fraction * static_cast<double>(beta_raw.rows())) out.push_back(static_cast<std::size_t>(d));
  }
  return out;
}

std::vector<std::size_t> zero_basis_rows(const ShapeDictionary& dict) {
  std::vector<std::size_t> out;
  const std::size_t cols = dict.basis.dim(1);
  for (std::size_t d = 0; d < dict.latent_dim(); ++d) {
    bool zero = true;
    for (std::size_t c = 0; c < cols && zero; ++c) zero = dict.basis[d * cols + c] == 0.0;
    if (zero) out.push_back(d);
  }
  return out;
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.ndim() != 2) throw ShapeError("to_matrix: expected 2-D tensor, got " + shape_str(t.shape()));
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t[r * t.dim(1) + c];
  }
  return m;
}

}  // namespace kplift
