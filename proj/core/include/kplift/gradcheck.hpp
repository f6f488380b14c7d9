#pragma once

#include "kplift/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace kplift {

// |analytic - numeric| / max(1, |analytic|)
double gradient_relative_error(double analytic, double numeric);

// max over coordinates of gradient_relative_error(analytic, central difference).
// Coordinates whose +step and -step evaluations take different branches of a
// piecewise op (a ReLU kink, say) are skipped.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double step);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks_resampled = 0;
  std::string worst;  // "<param>[<index>]" of the largest error
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Checks d loss_fn / d p for every listed leaf at `coords_per_param` randomly
// chosen coordinates (all of them when the tensor is smaller). loss_fn must
// rebuild its graph from the current parameter values on every call; the
// check perturbs the leaves in place and restores them.
GradCheckReport check_parameter_gradients(const std::function<Tensor()>& loss_fn, std::vector<NamedParam> params,
                                          double step, std::size_t coords_per_param, std::uint64_t seed);

}  // namespace kplift
