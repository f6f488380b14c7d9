#pragma once

// Procedural multi-category benchmark of deformable point clouds.
//
// A category is a unit-RMS template plus a few orthogonal deformation
// directions. An instance adds a random combination of them, rotates the
// result uniformly over SO(3) and projects it orthographically. A scalar
// context factor c in [0,1] shifts the first deformation coefficient and
// scales the rendered image brightness, so the image carries shape
// information the keypoints alone do not.

#include "kplift/geometry.hpp"
#include "kplift/image.hpp"
#include "kplift/shape_model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace kplift {

inline constexpr std::size_t kMinSyntheticKeypoints = 6;
inline constexpr std::size_t kMaxSyntheticKeypoints = 14;
inline constexpr std::size_t kDeformationModes = 3;
inline constexpr std::size_t kMinVisible = 3;
inline constexpr std::size_t kImageSize = 64;
// Shape units to pixels; the image center is the origin.
inline constexpr double kPixelsPerUnit = 12.0;

struct GeneratorConfig {
  std::size_t categories = 3;
  std::size_t train_per_category = 100;
  std::size_t test_per_category = 25;
  std::uint64_t seed = 0;
  double deformation_scale = 0.2;
  // Gain of (c - 0.5) in the first deformation coefficient, in units of the
  // per-mode standard deviation.
  double context_coupling = 2.0;
  bool occlusion = true;
  std::size_t threads = 1;
};

struct SyntheticCategory {
  CategorySchema schema;
  Structure3D shape_template;            // 3 x k_z
  Eigen::MatrixXd deformation_basis;     // kDeformationModes x 3k_z, orthogonal rows
  std::vector<std::pair<int, int>> skeleton;
};

struct SyntheticSample {
  std::size_t id = 0;
  int category = -1;
  bool test = false;
  std::vector<double> deformation;  // kDeformationModes
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Structure3D keypoints3d;  // canonical frame, 3 x k_z
  Keypoints2D keypoints2d;  // 2 x k_z
  std::vector<std::uint8_t> visibility;
  double context = 0.0;
  std::string image_file;
  std::optional<ImageRaster> image;

  std::size_t visible_count() const;
  // R X: the 3D points in the camera frame, which is what evaluation compares.
  Structure3D camera_points() const { return rotation * keypoints3d; }
};

std::vector<SyntheticCategory> gen_categories(std::size_t count, std::uint64_t seed);

CategoryRegistry make_registry(const std::vector<SyntheticCategory>& categories);

// Uniformly distributed rotation (unit quaternion from three uniforms).
Eigen::Matrix3d random_rotation(Rng& rng);

// Rear-depth-quartile coin flips, at least kMinVisible visible. Larger camera
// z is farther away. nullopt when 10 draws in a row leave too few visible.
std::optional<std::vector<std::uint8_t>> draw_visibility(const Structure3D& camera_points, Rng& rng);

SyntheticSample sample_instance(const SyntheticCategory& category, std::uint64_t seed, double deformation_scale,
                                double context_coupling = 2.0, bool occlusion = true);

// Pixel coordinates of a point in shape units.
Eigen::Vector2d to_pixels(const Eigen::Vector2d& point);
// Detector coordinates in [0,1]^2 of a point in shape units, and back.
Eigen::Vector2d to_unit_square(const Eigen::Vector2d& point);
Eigen::Vector2d from_unit_square(const Eigen::Vector2d& unit);

ImageRaster render_image(const SyntheticSample& sample, const SyntheticCategory& category);

struct Dataset {
  std::vector<SyntheticCategory> categories;
  std::vector<SyntheticSample> samples;
  double deformation_scale = 0.0;
  CategoryRegistry registry() const { return make_registry(categories); }
  std::vector<const SyntheticSample*> split(bool test) const;
};

// Sample i belongs to category i mod n; the train samples come first. The
// per-sample seed is derived from (seed, i), so the thread count does not
// change the output.
Dataset generate_dataset(const GeneratorConfig& config);

inline constexpr int kDatasetFormatVersion = 1;

class DatasetFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
// Images are decoded only when `load_images` is set; otherwise image stays
// empty and the PGM files are not touched.
Dataset read_dataset(const std::filesystem::path& dir, bool load_images = true);
ImageRaster load_image(const std::filesystem::path& dir, const SyntheticSample& sample);

}  // namespace kplift
