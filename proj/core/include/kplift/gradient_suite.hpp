#pragma once

// Finite-difference check of every training loss against every parameter
// group (lifter, detector, shape dictionary) on a small random system.

#include "kplift/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kplift {

struct GradientCase {
  std::string loss;   // location | type | category | reprojection | total
  std::string group;  // lifter | detector | shape
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

struct GradientSuiteOptions {
  double step = 1e-5;
  std::size_t coords_per_tensor = 3;
  bool cutoff = true;
};

// One entry per (loss, group) pair; coordinates where a perturbation crosses
// a kink or changes the Hungarian assignment are skipped and resampled.
std::vector<GradientCase> gradient_suite(std::uint64_t seed, const GradientSuiteOptions& options = {});

}  // namespace kplift
