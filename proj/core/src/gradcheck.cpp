#include "kplift/gradcheck.hpp"

#include "kplift/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kplift {

namespace {

struct Probe {
  double value;
  std::uint64_t branches;
};

template <typename Fn>
Probe probe(Fn&& fn) {
  BranchTrace trace;
  const double v = fn();
  return {v, trace.value()};
}

}  // namespace

double gradient_relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max(1.0, std::fabs(analytic));
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  std::vector<double> base(x.data().begin(), x.data().end());
  Tensor leaf = Tensor::parameter(x.shape(), base);
  const Tensor loss = fn(leaf);
  const auto grads = gradient_of(loss, {leaf});
  const Tensor analytic = grads[leaf];

  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](double delta) {
      std::vector<double> shifted = base;
      shifted[i] += delta;
      return probe([&] { return fn(Tensor::from(x.shape(), shifted)).item(); });
    };
    const Probe plus = eval(step);
    const Probe minus = eval(-step);
    if (plus.branches != minus.branches) continue;
    const double numeric = (plus.value - minus.value) / (2.0 * step);
    worst = std::max(worst, gradient_relative_error(analytic[i], numeric));
  }
  return worst;
}

GradCheckReport check_parameter_gradients(const std::function<Tensor()>& loss_fn, std::vector<NamedParam> params,
                                          double step, std::size_t coords_per_param, std::uint64_t seed) {
  GradCheckReport report;
  std::vector<Tensor> leaves;
  for (const auto& p : params) leaves.push_back(p.tensor);
  const Gradients grads = gradient_of(loss_fn(), leaves);
  Rng rng(seed);
  for (auto& p : params) {
    const std::size_t n = p.tensor.numel();
    std::vector<std::size_t> candidates(n);
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    // Fisher-Yates with the stable generator.
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(candidates[i - 1], candidates[j]);
    }
    const Tensor analytic = grads[p.tensor];
    std::size_t done = 0;
    for (std::size_t c = 0; c < n && done < coords_per_param; ++c) {
      const std::size_t idx = candidates[c];
      auto data = p.tensor.mutable_data();
      const double original = data[idx];
      data[idx] = original + step;
      const Probe plus = probe([&] { return loss_fn().item(); });
      data[idx] = original - step;
      const Probe minus = probe([&] { return loss_fn().item(); });
      data[idx] = original;
      if (plus.branches != minus.branches) {
        ++report.kinks_resampled;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * step);
      const double err = gradient_relative_error(analytic[idx], numeric);
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = p.name + "[" + std::to_string(idx) + "]";
      }
      ++report.checked;
      ++done;
    }
  }
  return report;
}

}  // namespace kplift
