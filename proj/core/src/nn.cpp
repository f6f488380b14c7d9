#include "kplift/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace kplift {

Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> values(numel_of(shape));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(values));
}

Tensor normal_parameter(Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(numel_of(shape));
  for (auto& v : values) v = rng.normal(0.0, stddev);
  return Tensor::parameter(std::move(shape), std::move(values));
}

Tensor constant_parameter(Shape shape, double value) {
  std::vector<double> values(numel_of(shape), value);
  return Tensor::parameter(std::move(shape), std::move(values));
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(uniform_parameter({in, out}, std::sqrt(6.0 / static_cast<double>(in)), rng)),
      bias(constant_parameter({out}, 0.0)) {}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t width) : gain(constant_parameter({width}, 1.0)), offset(constant_parameter({width}, 0.0)) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".offset", offset});
}

void fill(Tensor& leaf, double value) {
  for (auto& v : leaf.mutable_data()) v = value;
}

void Adam::step(const ParamList& params, const Gradients& grads) {
  if (first_.empty()) {
    for (const auto& p : params) {
      first_.emplace_back(p.tensor.numel(), 0.0);
      second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (first_.size() != params.size()) throw std::logic_error("Adam: parameter list changed between steps");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = grads.raw(params[i].tensor);
    if (g.empty()) continue;
    Tensor leaf = params[i].tensor;
    auto data = leaf.mutable_data();
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      const double update = options_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
      data[j] -= update;
    }
  }
}

double l2_norm(std::span<const double> values) {
  double acc = 0.0;
  for (double v : values) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace kplift
