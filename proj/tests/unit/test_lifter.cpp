#include "kplift/gradcheck.hpp"
#include "kplift/lifter.hpp"
#include "kplift/losses.hpp"

#include <gtest/gtest.h>

using namespace kplift;

namespace {

CategoryRegistry two_categories() {
  CategoryRegistry reg;
  for (auto [name, k] : {std::pair{"a", 3}, std::pair{"b", 4}}) {
    CategorySchema s;
    s.name = name;
    for (int j = 0; j < k; ++j) s.keypoint_names.push_back("p" + std::to_string(j));
    reg.register_category(s);
  }
  return reg;
}

LifterConfig small_config() {
  LifterConfig c;
  c.hidden = 12;
  c.features = 8;
  c.latent_dim = 4;
  c.context_dim = 5;
  return c;
}

LifterInput random_input(Rng& rng, std::size_t k, std::vector<int> categories) {
  const std::size_t b = categories.size();
  std::vector<double> kp(b * 2 * k), vis(b * k);
  for (auto& v : kp) v = rng.normal();
  for (auto& v : vis) v = rng.uniform(0.0, 1.0) < 0.8 ? 1.0 : 0.0;
  LifterInput in{Tensor::from({b, 2, k}, kp), Tensor::from({b, k}, vis), std::nullopt, std::move(categories)};
  return in;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(NormalizeKeypoints, Examples) {
  Keypoints2D two(2, 2);
  two << 0, 2, 0, 0;
  const std::uint8_t both[] = {1, 1};
  NormalizedKeypoints n = normalize_keypoints(two, both);
  EXPECT_TRUE(n.points.isApprox((Keypoints2D(2, 2) << -1, 1, 0, 0).finished()));
  EXPECT_EQ(n.center, Eigen::Vector2d(1, 0));
  EXPECT_DOUBLE_EQ(n.scale, 1.0);

  const NormalizedKeypoints again = normalize_keypoints(n.points, both);
  EXPECT_TRUE(again.points.isApprox(n.points, 1e-15));
  EXPECT_NEAR(again.center.norm(), 0.0, 1e-15);
  EXPECT_NEAR(again.scale, 1.0, 1e-15);

  Rng rng(60);
  Keypoints2D raw = Keypoints2D::Random(2, 5);
  const std::uint8_t all[] = {1, 1, 1, 1, 1};
  const NormalizedKeypoints a = normalize_keypoints(raw, all);
  const NormalizedKeypoints b = normalize_keypoints(raw.colwise() + Eigen::Vector2d(5, 5), all);
  EXPECT_TRUE(b.points.isApprox(a.points, 1e-12));
  EXPECT_TRUE(b.center.isApprox(a.center + Eigen::Vector2d(5, 5), 1e-12));
}

TEST(NormalizeKeypoints, HiddenPointsAreZeroedAndIgnored) {
  Keypoints2D raw(2, 3);
  raw << 0, 100, 2, 0, -7, 0;
  const std::uint8_t vis[] = {1, 0, 1};
  const NormalizedKeypoints n = normalize_keypoints(raw, vis);
  EXPECT_EQ(n.points.col(1), Eigen::Vector2d(0, 0));
  EXPECT_EQ(n.center, Eigen::Vector2d(1, 0));
  const std::uint8_t one[] = {0, 0, 1};
  EXPECT_THROW(normalize_keypoints(raw, one), std::invalid_argument);
}

TEST(Lifter, ZeroNetworkGivesZeroStructure) {
  const CategoryRegistry reg = two_categories();
  Rng rng(61);
  Lifter lifter(small_config(), 7, rng);
  for (const auto& p : lifter.parameters()) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v = 0.0;
  }
  const LifterOutput out = lifter.lift(random_input(rng, 7, {0, 1}), reg);
  for (double v : out.structure.data()) EXPECT_EQ(v, 0.0);
  for (double v : out.reprojection.data()) EXPECT_EQ(v, 0.0);
}

TEST(Lifter, AbsentContextEqualsZeroContext) {
  const CategoryRegistry reg = two_categories();
  Rng rng(62);
  const Lifter lifter(small_config(), 7, rng);
  LifterInput in = random_input(rng, 7, {1, 0, 1});
  const LifterOutput absent = lifter.lift(in, reg);
  in.context = Tensor::zeros({3, 5});
  const LifterOutput zeros = lifter.lift(in, reg);
  EXPECT_EQ(values(absent.structure), values(zeros.structure));
  EXPECT_EQ(values(absent.reprojection), values(zeros.reprojection));
}

TEST(Lifter, HiddenInputsDoNotChangeOutput) {
  const CategoryRegistry reg = two_categories();
  Rng rng(63);
  const Lifter lifter(small_config(), 7, rng);
  LifterInput in = random_input(rng, 7, {0, 1});
  const LifterOutput base = lifter.lift(in, reg);

  std::vector<double> kp = values(in.keypoints);
  const auto vis = in.visibility.data();
  // Invisible points and points outside the category block.
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t j = 0; j < 7; ++j) {
      const bool outside = (b == 0) ? j >= 3 : j < 3;
      if (outside || vis[b * 7 + j] == 0.0) {
        kp[b * 14 + j] += 3.5;
        kp[b * 14 + 7 + j] -= 9.0;
      }
    }
  }
  in.keypoints = Tensor::from({2, 2, 7}, kp);
  const LifterOutput moved = lifter.lift(in, reg);
  EXPECT_EQ(values(moved.structure), values(base.structure));
  EXPECT_EQ(values(moved.rotation), values(base.rotation));
}

TEST(Lifter, Deterministic) {
  const CategoryRegistry reg = two_categories();
  Rng a(64), b(64);
  const Lifter la(small_config(), 7, a), lb(small_config(), 7, b);
  Rng ra(65), rb(65);
  EXPECT_EQ(values(la.lift(random_input(ra, 7, {0, 1}), reg).structure),
            values(lb.lift(random_input(rb, 7, {0, 1}), reg).structure));
}

TEST(Lifter, ReprojectionGradientMatchesFiniteDifferences) {
  const CategoryRegistry reg = two_categories();
  for (bool cutoff : {true, false}) {
    Rng rng(66);
    LifterConfig cfg = small_config();
    cfg.cutoff = cutoff;
    const Lifter lifter(cfg, 7, rng);
    LifterInput in = random_input(rng, 7, {0, 1, 1});
    std::vector<double> ctx(15);
    for (auto& v : ctx) v = rng.normal();
    in.context = Tensor::from({3, 5}, ctx);
    std::vector<double> target(42);
    for (auto& v : target) v = rng.normal();
    const Tensor gt = Tensor::from({3, 2, 7}, target);
    const Tensor zeta = category_masks(reg, in.categories);
    auto loss = [&] {
      const LifterOutput out = lifter.lift(in, reg);
      return loss_reprojection(gt, out.reprojection, zeta, in.visibility);
    };
    const GradCheckReport r = check_parameter_gradients(loss, lifter.parameters(), 1e-5, 20, 7);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst << (cutoff ? " cutoff" : " standard");
    EXPECT_GT(r.checked, 100u);
  }
}

TEST(Lifter, RejectsUnregisteredCategory) {
  const CategoryRegistry reg = two_categories();
  Rng rng(67);
  const Lifter lifter(small_config(), 7, rng);
  EXPECT_THROW(lifter.lift(random_input(rng, 7, {2}), reg), std::out_of_range);
}
