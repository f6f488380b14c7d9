#include "kplift/gradient_suite.hpp"

#include "kplift/trainer.hpp"

#include <array>
#include <numeric>

namespace kplift {

namespace {

constexpr std::array<const char*, 5> kLosses = {"location", "type", "category", "reprojection", "total"};
constexpr std::array<const char*, 3> kGroups = {"lifter", "detector", "shape"};

std::size_t group_of(const std::string& name) {
  if (name.rfind("lifter.", 0) == 0) return 0;
  if (name.rfind("detector.", 0) == 0) return 1;
  return 2;
}

std::array<Tensor, 5> loss_terms(const Model& model, const Batch& batch) {
  const LossComponents c = batch_losses(model, Phase::EndToEnd, batch);
  return {c.location, c.type, c.category, c.reprojection, total_loss(c, LossWeights{})};
}

struct Probe {
  std::array<double, 5> values;
  std::uint64_t branches;
};

Probe probe(const Model& model, const Batch& batch) {
  BranchTrace trace;
  const auto terms = loss_terms(model, batch);
  Probe p{};
  for (std::size_t i = 0; i < terms.size(); ++i) p.values[i] = terms[i].item();
  p.branches = trace.value();
  return p;
}

}  // namespace

std::vector<GradientCase> gradient_suite(std::uint64_t seed, const GradientSuiteOptions& options) {
  GeneratorConfig gen;
  gen.categories = 2;
  gen.train_per_category = 2;
  gen.test_per_category = 0;
  gen.seed = seed;
  const Dataset data = generate_dataset(gen);

  ModelSpec spec;
  for (const auto& c : data.categories) spec.categories.push_back(c.schema);
  spec.lifter.hidden = 12;
  spec.lifter.features = 8;
  spec.lifter.latent_dim = 4;
  spec.lifter.context_dim = 6;
  spec.lifter.cutoff = options.cutoff;
  DetectorConfig det;
  det.model_dim = 8;
  det.heads = 2;
  det.ffn_dim = 12;
  det.spare_queries = 2;
  det.context_dim = 6;
  const auto registry = data.registry();
  det.max_keypoints = registry.max_keypoints();
  det.categories = registry.size();
  spec.detector = det;
  spec.use_context = true;
  Model model(spec, mix_seed(seed, 7));
  // A nonzero shape bias so that its gradient is exercised away from zero.
  Rng rng(mix_seed(seed, 8));
  for (auto& v : model.lifter().shape.bias.mutable_data()) v = rng.normal(0.0, 0.1);

  Batch batch;
  for (const auto& s : data.samples) batch.push_back(&s);

  const ParamList params = model.parameters();
  std::vector<Tensor> leaves;
  for (const auto& p : params) leaves.push_back(p.tensor);
  const auto terms = loss_terms(model, batch);
  std::vector<Gradients> grads;
  for (const auto& t : terms) grads.push_back(gradient_of(t, leaves));

  std::vector<GradientCase> cases;
  for (const char* l : kLosses) {
    for (const char* g : kGroups) cases.push_back({l, g, 0.0, 0, {}});
  }
  for (const auto& p : params) {
    const std::size_t group = group_of(p.name);
    const std::size_t n = p.tensor.numel();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(order[i - 1], order[j]);
    }
    std::size_t done = 0;
    for (std::size_t c = 0; c < n && done < options.coords_per_tensor; ++c) {
      const std::size_t idx = order[c];
      Tensor leaf = p.tensor;
      const double original = leaf.mutable_data()[idx];
      leaf.mutable_data()[idx] = original + options.step;
      const Probe plus = probe(model, batch);
      leaf.mutable_data()[idx] = original - options.step;
      const Probe minus = probe(model, batch);
      leaf.mutable_data()[idx] = original;
      if (plus.branches != minus.branches) continue;
      ++done;
      for (std::size_t l = 0; l < kLosses.size(); ++l) {
        const double numeric = (plus.values[l] - minus.values[l]) / (2.0 * options.step);
        const double analytic = grads[l].raw(p.tensor).empty() ? 0.0 : grads[l].raw(p.tensor)[idx];
        const double err = gradient_relative_error(analytic, numeric);
        auto& gc = cases[l * kGroups.size() + group];
        ++gc.checked;
        if (err >= gc.max_rel_error) {
          gc.max_rel_error = err;
          gc.worst = p.name + "[" + std::to_string(idx) + "]";
        }
      }
    }
  }
  return cases;
}

}  // namespace kplift
