#pragma once

// Training phases, evaluation and the configuration they share.
//
//   lifter-only            GT 2D keypoints -> lifter, loss L_r
//   detector-pretrain      images -> detector, losses L_l, L_k, L_b
//   end-to-end             images -> detector -> lifter (with context), all four
//   end-to-end-no-context  same, context vector withheld from the lifter

#include "kplift/losses.hpp"
#include "kplift/metrics.hpp"
#include "kplift/model.hpp"
#include "kplift/synthetic.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace kplift {

enum class Phase { LifterOnly, DetectorPretrain, EndToEnd, EndToEndNoContext };

std::string phase_name(Phase phase);
Phase parse_phase(const std::string& name);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Phase phase = Phase::LifterOnly;
  std::string dataset;
  std::string output;
  // Starting points for the end-to-end phases.
  std::string lifter_checkpoint;
  std::string detector_checkpoint;
  std::uint64_t seed = 0;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  // "constant", or "cosine": per-step decay from learning_rate to zero.
  std::string lr_schedule = "cosine";
  LossWeights weights;
  LifterConfig lifter;
  DetectorConfig detector;
  // Use only the first n training samples (0: all).
  std::size_t max_train_samples = 0;
  // Evaluation worker threads; training itself is single threaded.
  std::size_t threads = 1;

  // Phase-dependent epochs and learning rate.
  static TrainConfig defaults(Phase phase);
  // Keys absent from the JSON keep the phase defaults; unknown keys are errors.
  static TrainConfig from_json(const std::string& text);
  static TrainConfig from_file(const std::string& path);
  // Overrides one key from its textual value, e.g. ("epochs", "5").
  void set(const std::string& key, const std::string& value);
  std::string to_json() const;
  void validate() const;
};

struct LossBreakdown {
  double location = 0.0;
  double type = 0.0;
  double category = 0.0;
  double reprojection = 0.0;
  double deformation = 0.0;
  double total = 0.0;
};

using Batch = std::vector<const SyntheticSample*>;

// Loss graph of one batch for the phase. Ground-truth 3D is never read.
LossComponents batch_losses(const Model& model, Phase phase, const Batch& batch);

// Forward, Hungarian match, losses, gradients and one Adam update over the
// parameters the phase trains. Throws TrainingError naming the component
// when a loss is not finite.
LossBreakdown train_step(Model& model, Adam& optimizer, Phase phase, const LossWeights& weights, const Batch& batch);

// Parameters a phase updates.
ParamList trainable_parameters(const Model& model, Phase phase);

struct EpochLog {
  std::size_t epoch = 0;
  LossBreakdown mean;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> history;
  CheckpointInfo info;
};

using ProgressFn = std::function<void(const EpochLog&)>;

// Builds the starting model for the phase (fresh, or loaded from the
// configured checkpoints) and runs the epochs. Deterministic in
// (config, dataset).
TrainResult train(const TrainConfig& config, const Dataset& dataset, const ProgressFn& progress = {});

enum class EvalMode { GtKeypoints, FromImages };
EvalMode parse_eval_mode(const std::string& name);

// Test split by default. Predictions are compared with R X in the camera
// frame after undoing the 2D normalization scale.
EvalReport evaluate(const Model& model, const Dataset& dataset, EvalMode mode, bool test_split = true,
                    std::size_t threads = 1);

// Predicts each sample's category template. With `oracle_rotation` the
// template is first rotated by the ground-truth rotation.
EvalReport template_baseline(const Dataset& dataset, bool oracle_rotation, bool test_split = true);

// 3D prediction for one sample (camera frame, category block only).
Structure3D predict_structure(const Model& model, const SyntheticSample& sample, EvalMode mode);

// The lifter's raw latent code for a sample given its GT keypoints.
std::vector<double> latent_code(const Model& model, const SyntheticSample& sample);

}  // namespace kplift
