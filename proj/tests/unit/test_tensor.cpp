#include "kplift/gradcheck.hpp"
#include "kplift/rng.hpp"
#include "kplift/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace kplift;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST(Tensor, ReluMatmulSoftmaxExamples) {
  EXPECT_EQ(values(relu(Tensor::from({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(matmul(eye, Tensor::from({2, 1}, {3, 4}))), (std::vector<double>{3, 4}));
  EXPECT_EQ(values(softmax(Tensor::from({2}, {0, 0}))), (std::vector<double>{0.5, 0.5}));
}

TEST(Tensor, MatmulMatchesNaiveLoops) {
  Rng rng(3);
  const Tensor a = random_tensor({5, 7}, rng);
  const Tensor b = random_tensor({7, 4}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < 7; ++t) acc += a[i * 7 + t] * b[t * 4 + j];
      EXPECT_NEAR(c[i * 4 + j], acc, 1e-12);
    }
  }
}

TEST(Tensor, BmmTransposeFlagsAgreeWithExplicitTranspose) {
  Rng rng(4);
  const Tensor a = random_tensor({2, 4, 3}, rng);
  const Tensor b = random_tensor({2, 4, 5}, rng);
  const Tensor direct = bmm(a, b, true, false);
  const Tensor manual = bmm(transpose_last2(a), b);
  ASSERT_EQ(direct.shape(), (Shape{2, 3, 5}));
  for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_NEAR(direct[i], manual[i], 1e-12);
}

TEST(Tensor, BroadcastAdd) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor row = Tensor::from({3}, {10, 20, 30});
  EXPECT_EQ(values(add(a, row)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  const Tensor col = Tensor::from({2, 1}, {100, 200});
  EXPECT_EQ(values(add(a, col)), (std::vector<double>{101, 102, 103, 204, 205, 206}));
}

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
  EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4}), ShapeError);
}

TEST(Tensor, CrossEntropyUniformLogits) {
  const Tensor logits = Tensor::zeros({2, 4});
  const int targets[] = {0, 3};
  EXPECT_NEAR(cross_entropy(logits, targets).item(), std::log(4.0), 1e-12);
}

TEST(Tensor, LayerNormZeroMeanUnitVariance) {
  Rng rng(5);
  const Tensor y = layer_norm(random_tensor({3, 16}, rng), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-10);
  }
}

TEST(Tensor, ScatterInvertsIndexRows) {
  Rng rng(6);
  const Tensor a = random_tensor({3, 2}, rng);
  const std::size_t rows[] = {4, 0, 2};
  const Tensor s = scatter_rows(a, rows, 5);
  const Tensor back = index_rows(s, rows);
  EXPECT_EQ(values(back), values(a));
  EXPECT_EQ(s[1 * 2], 0.0);
  EXPECT_EQ(s[3 * 2 + 1], 0.0);
}

TEST(Autograd, SumAndReluExamples) {
  const Tensor x = Tensor::parameter({3}, {0.3, -2, 5});
  EXPECT_EQ(values(gradient_of(sum(x), {x})[x]), (std::vector<double>{1, 1, 1}));
  const Tensor y = Tensor::parameter({2}, {-1, 2});
  EXPECT_EQ(values(gradient_of(sum(relu(y)), {y})[y]), (std::vector<double>{0, 1}));
}

TEST(Autograd, UnusedParameterGetsZeroGradient) {
  const Tensor x = Tensor::parameter({2}, {1, 2});
  const Tensor unused = Tensor::parameter({3}, {1, 2, 3});
  const auto g = gradient_of(sum(square(x)), {x, unused});
  EXPECT_EQ(values(g[unused]), (std::vector<double>{0, 0, 0}));
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  // d/dx (x*x + x) = 2x + 1
  const Tensor x = Tensor::parameter({1}, {3});
  const Tensor y = add(mul(x, x), x);
  EXPECT_DOUBLE_EQ(gradient_of(sum(y), {x})[x][0], 7.0);
}

TEST(Autograd, DetachStopsGradient) {
  const Tensor x = Tensor::parameter({2}, {1, 2});
  const auto g = gradient_of(sum(mul(x, x.detach())), {x});
  EXPECT_EQ(values(g[x]), (std::vector<double>{1, 2}));
}

// Every differentiable op against central differences on a random input.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(100 + static_cast<std::uint64_t>(GetParam()));
  const Tensor w = random_tensor({4, 3}, rng);
  const Tensor other = random_tensor({2, 3, 4}, rng);
  const Tensor positive = Tensor::from({2, 3, 4}, [&] {
    std::vector<double> v(24);
    for (auto& x : v) x = rng.uniform(0.5, 2.0);
    return v;
  }());
  const int targets[] = {1, 0, 3, 2, 2, 0};
  const std::size_t rows[] = {2, 0, 5, 5};
  std::vector<std::function<Tensor(const Tensor&)>> fns = {
      [&](const Tensor& x) { return sum(mul(matmul(reshape(x, {6, 4}), w), matmul(reshape(x, {6, 4}), w))); },
      [&](const Tensor& x) { return sum(square(bmm(x, other, false, true))); },
      [&](const Tensor& x) { return sum(div(x, positive)); },
      [&](const Tensor& x) { return sum(div(positive, add_scalar(square(x), 1.0))); },
      [&](const Tensor& x) { return sum(mul(sigmoid(x), other)); },
      [&](const Tensor& x) { return sum(log(add_scalar(square(x), 0.5))); },
      [&](const Tensor& x) { return sum(sqrt(add_scalar(square(x), 0.5))); },
      [&](const Tensor& x) { return sum(mul(exp(scale(x, 0.3)), other)); },
      [&](const Tensor& x) { return sum(mul(softmax(x), other)); },
      [&](const Tensor& x) { return sum(mul(log_softmax(x), other)); },
      [&](const Tensor& x) { return cross_entropy(reshape(x, {6, 4}), targets); },
      [&](const Tensor& x) { return sum(mul(layer_norm(x), other)); },
      [&](const Tensor& x) { return sum(square(sum_last(x))); },
      [&](const Tensor& x) { return sum(mul(transpose_last2(x), transpose_last2(other))); },
      [&](const Tensor& x) { return sum(square(slice(x, 2, 1, 2))); },
      [&](const Tensor& x) { return sum(square(concat({x, other}, 1))); },
      [&](const Tensor& x) { return sum(square(index_rows(reshape(x, {6, 4}), rows))); },
      [&](const Tensor& x) { return sum(square(scatter_rows(slice(reshape(x, {6, 4}), 0, 0, 4), rows, 6))); },
      [&](const Tensor& x) { return sum(huber(x, 0.7)); },
      [&](const Tensor& x) { return sum(abs(x)); },
      [&](const Tensor& x) { return mean(mul(relu(x), other)); },
      [&](const Tensor& x) {
        return sum(square(attention(reshape(x, {2, 3, 4}), other, mul(other, positive), 2)));
      },
  };
  const Tensor x = random_tensor({2, 3, 4}, rng);
  const auto& fn = fns.at(static_cast<std::size_t>(GetParam()));
  EXPECT_LT(finite_difference_check(fn, x, 1e-5), 1e-6) << "op #" << GetParam();
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 22));

TEST(FiniteDifference, Examples) {
  auto squares = [](const Tensor& x) { return sum(square(x)); };
  EXPECT_LT(finite_difference_check(squares, Tensor::from({2}, {1, 2}), 1e-5), 1e-6);
  auto constant = [](const Tensor& x) { return add_scalar(scale(sum(x), 0.0), 4.0); };
  EXPECT_EQ(finite_difference_check(constant, Tensor::from({2}, {1, 2}), 1e-5), 0.0);
  auto hub = [](const Tensor& x) { return sum(huber(x, 0.1)); };
  EXPECT_LT(finite_difference_check(hub, Tensor::from({1}, {0.0}), 1e-5), 1e-6);
}

TEST(FiniteDifference, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(gradient_relative_error(0.5, 0.4), 0.1);
  EXPECT_DOUBLE_EQ(gradient_relative_error(10.0, 9.0), 0.1);
}

TEST(FiniteDifference, KinkIsSkipped) {
  // relu at exactly 0 with step 1e-5 straddles the kink, where the one-sided
  // slopes average to 0.5 against an analytic 0; that coordinate is skipped.
  auto fn = [](const Tensor& x) { return sum(relu(x)); };
  EXPECT_LT(finite_difference_check(fn, Tensor::from({2}, {0.0, 1.0}), 1e-5), 1e-6);
}

TEST(BranchTrace, DistinguishesBranches) {
  auto trace_of = [](double v) {
    BranchTrace t;
    relu(Tensor::from({1}, {v}));
    return t.value();
  };
  EXPECT_EQ(trace_of(1.0), trace_of(2.0));
  EXPECT_NE(trace_of(1.0), trace_of(-1.0));
  EXPECT_FALSE(BranchTrace::active());
}
