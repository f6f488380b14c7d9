#pragma once

#include "kplift/gradcheck.hpp"
#include "kplift/rng.hpp"
#include "kplift/tensor.hpp"

#include <string>
#include <vector>

namespace kplift {

using ParamList = std::vector<NamedParam>;

Tensor uniform_parameter(Shape shape, double bound, Rng& rng);
Tensor normal_parameter(Shape shape, double stddev, Rng& rng);
Tensor constant_parameter(Shape shape, double value);

// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  // He-uniform weights, zero bias.
  Linear(std::size_t in, std::size_t out, Rng& rng);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  void collect(const std::string& prefix, ParamList& out) const;
};

// Layer normalization with a learned per-feature gain and offset.
struct LayerNorm {
  Tensor gain;
  Tensor offset;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor operator()(const Tensor& x) const { return add(mul(layer_norm(x), gain), offset); }
  void collect(const std::string& prefix, ParamList& out) const;
};

void fill(Tensor& leaf, double value);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  // Parameters are matched to moment buffers by position; the list must be
  // the same on every call.
  void step(const ParamList& params, const Gradients& grads);
  std::size_t steps() const { return steps_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const AdamOptions& options() const { return options_; }

 private:
  AdamOptions options_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

double l2_norm(std::span<const double> values);

}  // namespace kplift
