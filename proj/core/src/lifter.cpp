#include "kplift/lifter.hpp"

#include <cmath>
#include <stdexcept>

namespace kplift {

NormalizedKeypoints normalize_keypoints(const Keypoints2D& raw, std::span<const std::uint8_t> visibility) {
  if (visibility.size() != static_cast<std::size_t>(raw.cols())) {
    throw std::invalid_argument("normalize_keypoints: visibility length does not match keypoint count");
  }
  NormalizedKeypoints out;
  out.center.setZero();
  std::size_t visible = 0;
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    if (visibility[static_cast<std::size_t>(j)]) {
      out.center += raw.col(j);
      ++visible;
    }
  }
  if (visible < 2) throw std::invalid_argument("normalize_keypoints: fewer than 2 visible keypoints");
  out.center /= static_cast<double>(visible);
  double sq = 0.0;
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    if (visibility[static_cast<std::size_t>(j)]) sq += (raw.col(j) - out.center).squaredNorm();
  }
  out.scale = std::sqrt(sq / static_cast<double>(visible));
  if (!(out.scale > 1e-12)) throw std::invalid_argument("normalize_keypoints: visible keypoints are coincident");
  out.points = Keypoints2D::Zero(2, raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    if (visibility[static_cast<std::size_t>(j)]) out.points.col(j) = (raw.col(j) - out.center) / out.scale;
  }
  return out;
}

Tensor category_masks(const CategoryRegistry& registry, std::span<const int> categories) {
  const std::size_t k = registry.total_keypoints();
  std::vector<double> values;
  values.reserve(categories.size() * k);
  for (int z : categories) {
    const auto zeta = registry.mask(z);
    values.insert(values.end(), zeta.begin(), zeta.end());
  }
  return Tensor::from({categories.size(), k}, std::move(values));
}

Lifter::Lifter(const LifterConfig& config, std::size_t total_keypoints, Rng& rng)
    : config_(config), keypoints_(total_keypoints) {
  trunk1 = Linear(input_width(), config.hidden, rng);
  trunk2 = Linear(config.hidden, config.hidden, rng);
  trunk3 = Linear(config.hidden, config.features, rng);
  latent_head = Linear(config.features, config.latent_dim, rng);
  rotation_head = Linear(config.features, 6, rng);
  shape = ShapeDictionary::initialize(config.latent_dim, total_keypoints, rng);
}

LifterOutput Lifter::lift(const LifterInput& input, const CategoryRegistry& registry) const {
  const std::size_t batch = input.categories.size();
  const std::size_t k = keypoints_;
  if (registry.total_keypoints() != k) {
    throw std::invalid_argument("lift: registry has " + std::to_string(registry.total_keypoints()) +
                                " stacked keypoints, model expects " + std::to_string(k));
  }
  if (input.keypoints.shape() != Shape{batch, 2, k} || input.visibility.shape() != Shape{batch, k}) {
    throw ShapeError("lift: keypoints " + shape_str(input.keypoints.shape()) + " / visibility " +
                     shape_str(input.visibility.shape()) + " do not match batch " + std::to_string(batch) +
                     " and k=" + std::to_string(k));
  }
  // Throws on unregistered ids.
  const Tensor zeta = category_masks(registry, input.categories);
  const Tensor vis = mul(input.visibility, zeta);
  const Tensor masked = mul(input.keypoints, reshape(vis, {batch, 1, k}));
  Tensor context = input.context ? *input.context : Tensor::zeros({batch, config_.context_dim});
  if (context.shape() != Shape{batch, config_.context_dim}) {
    throw ShapeError("lift: context " + shape_str(context.shape()) + ", expected [" + std::to_string(batch) + "," +
                     std::to_string(config_.context_dim) + "]");
  }
  const Tensor x = concat({reshape(masked, {batch, 2 * k}), vis, context}, 1);
  const Tensor f = relu(trunk3(relu(trunk2(relu(trunk1(x))))));

  LifterOutput out;
  out.beta_raw = latent_head(f);
  out.rotation_raw = rotation_head(f);
  out.rotation = rotation_from_6d(out.rotation_raw);
  const Tensor code = config_.cutoff ? relu(out.beta_raw) : out.beta_raw;
  out.deformation = reshape_structure(matmul(code, shape.basis));
  const Tensor decoded = config_.cutoff ? add(out.deformation, reshape_structure(reshape(shape.bias, {1, 3 * k})))
                                        : out.deformation;
  // The input is centered on its visible points and the projection has no
  // translation, so the structure is centered on the same points.
  const Tensor vis3 = reshape(vis, {batch, 1, k});
  const Tensor count = reshape(add_scalar(sum_last(vis), 1e-12), {batch, 1});
  const Tensor center = div(sum_last(mul(decoded, vis3)), count);
  out.structure = sub(decoded, reshape(center, {batch, 3, 1}));
  out.reprojection = orthographic_project(out.rotation, out.structure);
  return out;
}

void Lifter::collect(ParamList& out) const {
  trunk1.collect("lifter.trunk1", out);
  trunk2.collect("lifter.trunk2", out);
  trunk3.collect("lifter.trunk3", out);
  latent_head.collect("lifter.latent", out);
  rotation_head.collect("lifter.rotation", out);
  shape.collect("shape", out);
}

ParamList Lifter::parameters() const {
  ParamList out;
  collect(out);
  return out;
}

}  // namespace kplift
