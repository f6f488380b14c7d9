#include "kplift/synthetic.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace kplift;

namespace {

double rms_radius(const Structure3D& x) {
  const Structure3D c = x.colwise() - x.rowwise().mean();
  return std::sqrt(c.colwise().squaredNorm().mean());
}

}  // namespace

TEST(GenCategories, DeterministicAndNormalized) {
  const auto a = gen_categories(4, 17);
  const auto b = gen_categories(4, 17);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].shape_template, b[i].shape_template);
    EXPECT_EQ(a[i].deformation_basis, b[i].deformation_basis);
    EXPECT_EQ(a[i].schema.keypoint_names, b[i].schema.keypoint_names);
    const std::size_t k = a[i].schema.keypoint_count();
    EXPECT_GE(k, kMinSyntheticKeypoints);
    EXPECT_LE(k, kMaxSyntheticKeypoints);
    EXPECT_NEAR(rms_radius(a[i].shape_template), 1.0, 1e-9);
    EXPECT_NEAR(a[i].shape_template.rowwise().mean().norm(), 0.0, 1e-12);
    const Eigen::MatrixXd gram = a[i].deformation_basis * a[i].deformation_basis.transpose();
    EXPECT_NEAR((gram - Eigen::MatrixXd(gram.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0, 1e-9);
  }
}

TEST(GenCategories, RegistryOffsetsAreRunningSums) {
  const auto cats = gen_categories(3, 5);
  const CategoryRegistry reg = make_registry(cats);
  std::size_t offset = 0;
  for (int z = 0; z < 3; ++z) {
    EXPECT_EQ(reg.at(z).block_offset, offset);
    offset += cats[static_cast<std::size_t>(z)].schema.keypoint_count();
  }
  EXPECT_EQ(reg.total_keypoints(), offset);
}

TEST(SampleInstance, ZeroDeformationIsRotatedTemplate) {
  const auto cats = gen_categories(1, 3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticSample s = sample_instance(cats[0], seed, 0.0);
    EXPECT_TRUE(s.keypoints3d.isApprox(cats[0].shape_template, 1e-12));
    EXPECT_TRUE(s.keypoints2d.isApprox(orthographic_project(s.rotation, s.keypoints3d), 1e-9));
    EXPECT_NEAR((s.rotation.transpose() * s.rotation - Eigen::Matrix3d::Identity()).norm(), 0.0, 1e-12);
  }
}

TEST(SampleInstance, DeterministicGivenSeed) {
  const auto cats = gen_categories(2, 4);
  const SyntheticSample a = sample_instance(cats[1], 99, 0.2);
  const SyntheticSample b = sample_instance(cats[1], 99, 0.2);
  EXPECT_EQ(a.keypoints3d, b.keypoints3d);
  EXPECT_EQ(a.rotation, b.rotation);
  EXPECT_EQ(a.visibility, b.visibility);
  EXPECT_EQ(a.context, b.context);
  EXPECT_NE(sample_instance(cats[1], 100, 0.2).keypoints3d, a.keypoints3d);
}

TEST(SampleInstance, VisibleFractionOver10kSamples) {
  const auto cats = gen_categories(3, 8);
  double visible = 0.0, total = 0.0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const SyntheticSample s = sample_instance(cats[seed % 3], seed, 0.2);
    EXPECT_GE(s.visible_count(), kMinVisible);
    visible += static_cast<double>(s.visible_count());
    total += static_cast<double>(s.visibility.size());
  }
  const double fraction = visible / total;
  EXPECT_GE(fraction, 0.8);
  EXPECT_LE(fraction, 0.95);
}

TEST(SampleInstance, OcclusionOnlyHitsRearQuartile) {
  const auto cats = gen_categories(1, 9);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const SyntheticSample s = sample_instance(cats[0], seed, 0.2);
    const Structure3D cam = s.camera_points();
    std::vector<double> depth(cam.row(2).begin(), cam.row(2).end());
    std::sort(depth.begin(), depth.end());
    for (Eigen::Index j = 0; j < cam.cols(); ++j) {
      // Hidden points are never in front of the median.
      if (!s.visibility[static_cast<std::size_t>(j)]) EXPECT_GT(cam(2, j), depth[depth.size() / 2]);
    }
  }
}

// Two instances can project almost identically while their shape differs in
// depth: for the closest 2D pair with clearly different context, the mean
// depth gap exceeds the mean 2D gap.
TEST(SampleInstance, ContextCollidesIn2d) {
  const auto cats = gen_categories(1, 12);
  const std::size_t n = 10000;
  const Eigen::Index k = static_cast<Eigen::Index>(cats[0].schema.keypoint_count());
  Eigen::MatrixXd flat(2 * k, static_cast<Eigen::Index>(n));
  std::vector<SyntheticSample> samples;
  for (std::uint64_t seed = 0; seed < n; ++seed) {
    samples.push_back(sample_instance(cats[0], seed, 0.2, 2.0, false));
    flat.col(static_cast<Eigen::Index>(seed)) = samples.back().keypoints2d.reshaped();
  }
  double best = std::numeric_limits<double>::infinity();
  std::size_t bi = 0, bj = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::RowVectorXd d =
        (flat.rightCols(static_cast<Eigen::Index>(n - i - 1)).colwise() - flat.col(static_cast<Eigen::Index>(i)))
            .colwise()
            .squaredNorm();
    for (Eigen::Index t = 0; t < d.size(); ++t) {
      const std::size_t j = i + 1 + static_cast<std::size_t>(t);
      if (d(t) < best && std::fabs(samples[i].context - samples[j].context) >= 0.3) {
        best = d(t);
        bi = i;
        bj = j;
      }
    }
  }
  const Structure3D a = samples[bi].camera_points(), b = samples[bj].camera_points();
  const double gap_2d = (a.topRows(2) - b.topRows(2)).colwise().norm().mean();
  const double gap_depth = (a.row(2) - b.row(2)).cwiseAbs().mean();
  EXPECT_GT(gap_depth, gap_2d) << gap_2d << " vs depth " << gap_depth;
}

TEST(Render, PixelRangeAndBlobs) {
  const auto cats = gen_categories(1, 13);
  SyntheticSample s = sample_instance(cats[0], 5, 0.2);
  const ImageRaster img = render_image(s, cats[0]);
  EXPECT_EQ(img.width, kImageSize);
  EXPECT_EQ(img.height, kImageSize);
  for (double p : img.pixels) {
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
  const std::size_t j = static_cast<std::size_t>(std::find(s.visibility.begin(), s.visibility.end(), 1) - s.visibility.begin());
  const Eigen::Vector2d px = to_pixels(s.keypoints2d.col(static_cast<Eigen::Index>(j)));
  EXPECT_GT(img.at(static_cast<std::size_t>(std::lround(px.x())), static_cast<std::size_t>(std::lround(px.y()))), 0.3);
}

TEST(Render, AllHiddenLeavesSkeletonOnly) {
  const auto cats = gen_categories(1, 14);
  SyntheticSample s = sample_instance(cats[0], 6, 0.2);
  std::fill(s.visibility.begin(), s.visibility.end(), 0);
  s.context = 1.0;
  const ImageRaster img = render_image(s, cats[0]);
  const double peak = *std::max_element(img.pixels.begin(), img.pixels.end());
  EXPECT_GT(peak, 0.0);
  EXPECT_LE(peak, 0.5 + 1e-12);
}

TEST(Render, ContextScalesIntensity) {
  const auto cats = gen_categories(1, 15);
  SyntheticSample a = sample_instance(cats[0], 7, 0.2);
  SyntheticSample b = a;
  a.context = 0.2;
  b.context = 0.8;
  // Both images are quantized to 8 bits.
  const ImageRaster ia = render_image(a, cats[0]);
  const ImageRaster ib = render_image(b, cats[0]);
  const double ratio = (0.5 + 0.5 * 0.8) / (0.5 + 0.5 * 0.2);
  for (std::size_t i = 0; i < ia.pixels.size(); ++i) EXPECT_NEAR(ib.pixels[i], std::min(1.0, ratio * ia.pixels[i]), 2.0 / 255);
}

TEST(Render, UnitSquareRoundTrip) {
  const Eigen::Vector2d p(0.3, -1.7);
  EXPECT_TRUE(from_unit_square(to_unit_square(p)).isApprox(p, 1e-15));
  EXPECT_TRUE(to_unit_square(Eigen::Vector2d::Zero()).isApprox(Eigen::Vector2d(0.5, 0.5)));
}

TEST(GenerateDataset, ParallelEqualsSerial) {
  GeneratorConfig cfg;
  cfg.categories = 2;
  cfg.train_per_category = 30;
  cfg.test_per_category = 10;
  cfg.seed = 77;
  const Dataset serial = generate_dataset(cfg);
  cfg.threads = 4;
  const Dataset parallel = generate_dataset(cfg);
  ASSERT_EQ(serial.samples.size(), 80u);
  ASSERT_EQ(parallel.samples.size(), serial.samples.size());
  for (std::size_t i = 0; i < serial.samples.size(); ++i) {
    EXPECT_EQ(serial.samples[i].keypoints3d, parallel.samples[i].keypoints3d);
    EXPECT_EQ(serial.samples[i].visibility, parallel.samples[i].visibility);
    EXPECT_EQ(serial.samples[i].image, parallel.samples[i].image);
  }
  EXPECT_EQ(serial.split(true).size(), 20u);
}
