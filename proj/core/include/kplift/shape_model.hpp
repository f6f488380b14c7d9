#pragma once

// Shared multi-category shape dictionary.
//
// Categories are stacked: category z owns keypoints
// [block_offset, block_offset + k_z) of the k = sum_z k_z layout, and its
// mask zeta_z selects exactly that block. One basis S (D x 3k) and one bias
// b_S (3k) serve every category; a latent code beta' decodes to
// reshape(ReLU(beta') S + b_S).

#include "kplift/geometry.hpp"
#include "kplift/nn.hpp"
#include "kplift/tensor.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kplift {

inline constexpr std::size_t kMinKeypointsPerCategory = 3;

struct CategorySchema {
  int id = -1;
  std::string name;
  std::vector<std::string> keypoint_names;
  std::size_t block_offset = 0;

  std::size_t keypoint_count() const { return keypoint_names.size(); }
};

class CategoryRegistry {
 public:
  // Assigns id and block_offset (running sum of earlier k_z).
  int register_category(CategorySchema schema);

  const CategorySchema& at(int id) const;
  std::optional<int> find(std::string_view name) const;
  std::span<const CategorySchema> categories() const { return categories_; }
  std::size_t size() const { return categories_.size(); }
  std::size_t total_keypoints() const { return total_; }
  std::size_t max_keypoints() const;

  // zeta_z as 0/1 values over the stacked layout.
  std::vector<double> mask(int id) const;

 private:
  std::vector<CategorySchema> categories_;
  std::size_t total_ = 0;
};

struct ShapeDictionary {
  Tensor basis;  // [D, 3k]
  Tensor bias;   // [3k]

  // Basis i.i.d. normal with stddev 1/sqrt(D), bias zero.
  static ShapeDictionary initialize(std::size_t latent_dim, std::size_t keypoints, Rng& rng);

  std::size_t latent_dim() const { return basis.dim(0); }
  std::size_t keypoints() const { return basis.dim(1) / 3; }
  void collect(const std::string& prefix, ParamList& out) const;
};

// [B,D] -> [B,3,k]
Tensor cutoff_decode(const Tensor& beta_raw, const ShapeDictionary& dict);
// Unconstrained decode alpha S (no ReLU, no bias); the "standard" formulation.
Tensor linear_decode(const Tensor& alpha, const ShapeDictionary& dict);

Structure3D cutoff_decode(std::span<const double> beta_raw, const ShapeDictionary& dict);

// Decodes a latent code and keeps category z's block only.
Structure3D cross_category_decode(std::span<const double> beta_raw, int category, const ShapeDictionary& dict,
                                  const CategoryRegistry& registry);

// Constructive proof that cut-off coefficients lose no expressiveness: given
// unconstrained codes alpha (N x D) over basis S, returns nonnegative betas and
// a bias with beta_n S + b_S == alpha_n S for every n.
struct OracleResult {
  Eigen::MatrixXd betas;      // N x D, entries >= eps_d
  Eigen::RowVectorXd bias;    // 3k
  Eigen::RowVectorXd minima;  // m_d = min_n alpha_nd
};

OracleResult expressiveness_oracle(const Eigen::MatrixXd& alphas, const Eigen::MatrixXd& basis,
                                   const Eigen::VectorXd& eps);
OracleResult expressiveness_oracle(const Eigen::MatrixXd& alphas, const Eigen::MatrixXd& basis);

// Atoms whose post-ReLU coefficient is zero on more than `fraction` of the
// rows of beta_raw (reference set, N x D).
std::vector<std::size_t> inactive_atoms(const Eigen::MatrixXd& beta_raw, double fraction = 0.99);
// Basis rows that are identically zero.
std::vector<std::size_t> zero_basis_rows(const ShapeDictionary& dict);

Eigen::MatrixXd to_matrix(const Tensor& t);

}  // namespace kplift
