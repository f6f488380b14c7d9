#include "kplift/synthetic.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

namespace kplift {

namespace {

constexpr std::uint64_t kCategoryStream = 0x6361746567ULL;
constexpr int kVisibilityRetries = 10;

// Prim's algorithm from point 0; ties go to the lower index.
std::vector<std::pair<int, int>> minimum_spanning_tree(const Structure3D& points) {
  const auto k = static_cast<int>(points.cols());
  std::vector<bool> in_tree(static_cast<std::size_t>(k), false);
  std::vector<double> best(static_cast<std::size_t>(k), std::numeric_limits<double>::infinity());
  std::vector<int> parent(static_cast<std::size_t>(k), -1);
  std::vector<std::pair<int, int>> edges;
  best[0] = 0.0;
  for (int step = 0; step < k; ++step) {
    int u = -1;
    for (int v = 0; v < k; ++v) {
      if (!in_tree[v] && (u < 0 || best[v] < best[u])) u = v;
    }
    in_tree[u] = true;
    if (parent[u] >= 0) edges.emplace_back(std::min(parent[u], u), std::max(parent[u], u));
    for (int v = 0; v < k; ++v) {
      const double d = (points.col(u) - points.col(v)).norm();
      if (!in_tree[v] && d < best[v]) {
        best[v] = d;
        parent[v] = u;
      }
    }
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

// Removes the per-axis mean over points from a flat 3k row.
void remove_translation(Eigen::RowVectorXd& row) {
  const Eigen::Index k = row.size() / 3;
  for (int axis = 0; axis < 3; ++axis) {
    double m = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) m += row(3 * j + axis);
    m /= static_cast<double>(k);
    for (Eigen::Index j = 0; j < k; ++j) row(3 * j + axis) -= m;
  }
}

double distance_to_segment(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace

std::size_t SyntheticSample::visible_count() const {
  return static_cast<std::size_t>(std::count(visibility.begin(), visibility.end(), std::uint8_t{1}));
}

std::vector<SyntheticCategory> gen_categories(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("gen_categories: need at least one category");
  std::vector<SyntheticCategory> out;
  std::size_t offset = 0;
  for (std::size_t c = 0; c < count; ++c) {
    Rng rng(mix_seed(seed ^ kCategoryStream, c));
    const auto k = static_cast<std::size_t>(
        rng.uniform_int(kMinSyntheticKeypoints, kMaxSyntheticKeypoints));
    SyntheticCategory cat;
    cat.schema.id = static_cast<int>(c);
    cat.schema.name = "shape" + std::to_string(c);
    cat.schema.block_offset = offset;
    for (std::size_t j = 0; j < k; ++j) cat.schema.keypoint_names.push_back("kp" + std::to_string(j));
    offset += k;

    // Random points with prescribed principal extents: distinct, so that no
    // two rotations look alike, and none small, so depth stays observable
    // (a handful of Gaussian points is often nearly planar).
    const Eigen::Vector3d axes(1.0, rng.uniform(0.7, 0.9), rng.uniform(0.45, 0.6));
    Structure3D t(3, static_cast<Eigen::Index>(k));
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      for (int a = 0; a < 3; ++a) t(a, j) = rng.normal();
    }
    t.colwise() -= t.rowwise().mean();
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(t, Eigen::ComputeThinU | Eigen::ComputeThinV);
    t = svd.matrixU() * axes.asDiagonal() * svd.matrixV().transpose();
    const double rms = std::sqrt(t.colwise().squaredNorm().mean());
    cat.shape_template = t / rms;

    Eigen::MatrixXd basis(kDeformationModes, 3 * k);
    for (Eigen::Index r = 0; r < basis.rows(); ++r) {
      Eigen::RowVectorXd row(basis.cols());
      for (Eigen::Index i = 0; i < row.size(); ++i) row(i) = rng.normal();
      remove_translation(row);
      for (Eigen::Index q = 0; q < r; ++q) row -= row.dot(basis.row(q)) * basis.row(q);
      basis.row(r) = row.normalized();
    }
    // One unit of a coefficient moves the points by unit RMS.
    cat.deformation_basis = basis * std::sqrt(static_cast<double>(k));
    cat.skeleton = minimum_spanning_tree(cat.shape_template);
    out.push_back(std::move(cat));
  }
  return out;
}

CategoryRegistry make_registry(const std::vector<SyntheticCategory>& categories) {
  CategoryRegistry registry;
  for (const auto& c : categories) {
    CategorySchema s = c.schema;
    registry.register_category(std::move(s));
  }
  return registry;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  const double u1 = rng.uniform();
  const double u2 = rng.uniform() * 2.0 * M_PI;
  const double u3 = rng.uniform() * 2.0 * M_PI;
  const double a = std::sqrt(1.0 - u1);
  const double b = std::sqrt(u1);
  Eigen::Quaterniond q(a * std::cos(u2), a * std::sin(u2), b * std::sin(u3), b * std::cos(u3));
  q.normalize();
  return q.toRotationMatrix();
}

std::optional<std::vector<std::uint8_t>> draw_visibility(const Structure3D& camera_points, Rng& rng) {
  const auto k = static_cast<std::size_t>(camera_points.cols());
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return camera_points(2, static_cast<Eigen::Index>(a)) > camera_points(2, static_cast<Eigen::Index>(b));
  });
  const std::size_t rear = (k + 3) / 4;
  for (int attempt = 0; attempt < kVisibilityRetries; ++attempt) {
    std::vector<std::uint8_t> vis(k, 1);
    for (std::size_t r = 0; r < rear; ++r) {
      if (rng.uniform() < 0.5) vis[order[r]] = 0;
    }
    if (static_cast<std::size_t>(std::count(vis.begin(), vis.end(), std::uint8_t{1})) >= kMinVisible) return vis;
  }
  return std::nullopt;
}

SyntheticSample sample_instance(const SyntheticCategory& category, std::uint64_t seed, double deformation_scale,
                                double context_coupling, bool occlusion) {
  Rng rng(seed);
  SyntheticSample s;
  s.category = category.schema.id;
  s.context = rng.uniform();
  s.deformation.resize(kDeformationModes);
  for (std::size_t d = 0; d < kDeformationModes; ++d) s.deformation[d] = rng.normal();
  s.deformation[0] += context_coupling * (s.context - 0.5);
  for (double& v : s.deformation) v *= deformation_scale;

  const auto k = category.shape_template.cols();
  Eigen::RowVectorXd offset = Eigen::RowVectorXd::Zero(3 * k);
  for (std::size_t d = 0; d < kDeformationModes; ++d) {
    offset += s.deformation[d] * category.deformation_basis.row(static_cast<Eigen::Index>(d));
  }
  s.keypoints3d = category.shape_template + reshape_structure(std::span<const double>(offset.data(), offset.size()));

  for (;;) {
    s.rotation = random_rotation(rng);
    const Structure3D cam = s.camera_points();
    if (!occlusion) {
      s.visibility.assign(static_cast<std::size_t>(k), 1);
      break;
    }
    if (auto vis = draw_visibility(cam, rng)) {
      s.visibility = std::move(*vis);
      break;
    }
  }
  s.keypoints2d = orthographic_project(s.rotation, s.keypoints3d);
  s.image = render_image(s, category);
  return s;
}

Eigen::Vector2d to_pixels(const Eigen::Vector2d& point) {
  const double c = static_cast<double>(kImageSize) / 2.0;
  return {c + kPixelsPerUnit * point.x(), c + kPixelsPerUnit * point.y()};
}

Eigen::Vector2d to_unit_square(const Eigen::Vector2d& point) {
  return to_pixels(point) / static_cast<double>(kImageSize);
}

Eigen::Vector2d from_unit_square(const Eigen::Vector2d& unit) {
  const double c = static_cast<double>(kImageSize) / 2.0;
  return (unit * static_cast<double>(kImageSize) - Eigen::Vector2d(c, c)) / kPixelsPerUnit;
}

ImageRaster render_image(const SyntheticSample& sample, const SyntheticCategory& category) {
  constexpr double kSigma = 1.5;
  constexpr double kLineIntensity = 0.5;
  ImageRaster img(kImageSize, kImageSize);
  std::vector<Eigen::Vector2d> px;
  for (Eigen::Index j = 0; j < sample.keypoints2d.cols(); ++j) px.push_back(to_pixels(sample.keypoints2d.col(j)));
  const double brightness = 0.5 + 0.5 * sample.context;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const Eigen::Vector2d p(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      double v = 0.0;
      for (const auto& [a, b] : category.skeleton) {
        const double d = distance_to_segment(p, px[static_cast<std::size_t>(a)], px[static_cast<std::size_t>(b)]);
        v = std::max(v, kLineIntensity * std::max(0.0, 1.0 - d));
      }
      for (std::size_t j = 0; j < px.size(); ++j) {
        if (!sample.visibility[j]) continue;
        v = std::max(v, std::exp(-(p - px[j]).squaredNorm() / (2.0 * kSigma * kSigma)));
      }
      img.at(x, y) = std::clamp(brightness * v, 0.0, 1.0);
    }
  }
  quantize_8bit(img);
  return img;
}

std::vector<const SyntheticSample*> Dataset::split(bool test) const {
  std::vector<const SyntheticSample*> out;
  for (const auto& s : samples) {
    if (s.test == test) out.push_back(&s);
  }
  return out;
}

Dataset generate_dataset(const GeneratorConfig& config) {
  Dataset ds;
  ds.categories = gen_categories(config.categories, config.seed);
  ds.deformation_scale = config.deformation_scale;
  const std::size_t n = config.categories;
  const std::size_t train = n * config.train_per_category;
  const std::size_t total = train + n * config.test_per_category;
  ds.samples.resize(total);
  auto make = [&](std::size_t i) {
    const auto& cat = ds.categories[i % n];
    SyntheticSample s = sample_instance(cat, mix_seed(config.seed, i), config.deformation_scale,
                                        config.context_coupling, config.occlusion);
    s.id = i;
    s.test = i >= train;
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.pgm", i);
    s.image_file = name;
    ds.samples[i] = std::move(s);
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(config.threads, total));
  if (threads == 1) {
    for (std::size_t i = 0; i < total; ++i) make(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < total; i += threads) make(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  return ds;
}

}  // namespace kplift
