// kplift command-line front end.

#include "kplift/gradient_suite.hpp"
#include "kplift/metrics.hpp"
#include "kplift/model.hpp"
#include "kplift/synthetic.hpp"
#include "kplift/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

namespace {

using namespace kplift;

struct TrainFlags {
  std::string config;
  std::string dataset;
  std::string output;
  std::string lifter_checkpoint;
  std::string detector_checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<std::size_t> max_train_samples;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
  bool no_context = false;
  bool quiet = false;
};

void add_train_options(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config, "JSON training configuration")->required()->check(CLI::ExistingFile);
  cmd->add_option("--dataset", f.dataset, "Dataset directory (overrides 'dataset')");
  cmd->add_option("--output", f.output, "Checkpoint to write (overrides 'output')");
  cmd->add_option("--lifter-checkpoint", f.lifter_checkpoint, "Initial lifter (overrides 'lifter_checkpoint')");
  cmd->add_option("--detector-checkpoint", f.detector_checkpoint,
                  "Initial detector (overrides 'detector_checkpoint')");
  cmd->add_option("--seed", f.seed, "Overrides 'seed'");
  cmd->add_option("--epochs", f.epochs, "Overrides 'epochs'");
  cmd->add_option("--batch-size", f.batch_size, "Overrides 'batch_size'");
  cmd->add_option("--learning-rate", f.learning_rate, "Overrides 'learning_rate'");
  cmd->add_option("--max-train-samples", f.max_train_samples, "Overrides 'max_train_samples'");
  cmd->add_option("--threads", f.threads, "Overrides 'threads'");
  cmd->add_option("--set", f.sets, "Override any key, e.g. --set lifter.latent_dim=8");
  cmd->add_flag("--quiet", f.quiet, "No per-epoch progress");
}

TrainConfig resolve(const TrainFlags& f, Phase phase) {
  TrainConfig c = TrainConfig::from_file(f.config);
  if (c.phase != phase) {
    // The command decides the phase; keep the file's explicit values.
    c.set("phase", phase_name(phase));
  }
  if (!f.dataset.empty()) c.dataset = f.dataset;
  if (!f.output.empty()) c.output = f.output;
  if (!f.lifter_checkpoint.empty()) c.lifter_checkpoint = f.lifter_checkpoint;
  if (!f.detector_checkpoint.empty()) c.detector_checkpoint = f.detector_checkpoint;
  if (f.seed) c.seed = *f.seed;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.batch_size) c.batch_size = *f.batch_size;
  if (f.learning_rate) c.learning_rate = *f.learning_rate;
  if (f.max_train_samples) c.max_train_samples = *f.max_train_samples;
  if (f.threads) c.threads = *f.threads;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    c.set(s.substr(0, eq), s.substr(eq + 1));
  }
  c.validate();
  if (c.dataset.empty()) throw ConfigError("no dataset given (config key 'dataset' or --dataset)");
  if (c.output.empty()) throw ConfigError("no output checkpoint given (config key 'output' or --output)");
  return c;
}

int run_train(const TrainFlags& f, Phase phase) {
  const TrainConfig config = resolve(f, phase);
  const Dataset data = read_dataset(config.dataset, phase != Phase::LifterOnly);
  const auto start = std::chrono::steady_clock::now();
  auto progress = [&](const EpochLog& log) {
    if (f.quiet) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("epoch %3zu  total %.6f  loc %.6f  type %.6f  cat %.6f  reproj %.6f  def %.6f  (%.1fs)\n", log.epoch,
                log.mean.total, log.mean.location, log.mean.type, log.mean.category, log.mean.reprojection, log.mean.deformation, secs);
    std::fflush(stdout);
  };
  TrainResult result = train(config, data, progress);
  result.model.save(config.output, result.info);
  for (const auto& [k, v] : result.info.metrics) std::printf("%s %.9g\n", k.c_str(), v);
  std::printf("wrote %s\n", config.output.c_str());
  return 0;
}

std::filesystem::path dataset_of(const CheckpointInfo& info) {
  const auto j = nlohmann::json::parse(info.config);
  if (!j.contains("dataset") || j["dataset"].get<std::string>().empty()) {
    throw ConfigError("checkpoint does not record a dataset; pass --data");
  }
  return j["dataset"].get<std::string>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kplift: multi-category keypoint detection and 3D lifting"};
  app.require_subcommand(1);

  GeneratorConfig gen;
  std::string gen_out;
  std::size_t samples = 0;
  std::optional<std::size_t> test_samples;
  bool no_occlusion = false;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen_cmd->add_option("--categories", gen.categories, "Number of categories")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--samples", samples, "Training samples per category")->required();
  gen_cmd->add_option("--test-samples", test_samples, "Test samples per category (default samples/4)");
  gen_cmd->add_option("--seed", gen.seed, "Master seed")->required();
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--deformation-scale", gen.deformation_scale, "Deformation coefficient scale")
      ->capture_default_str();
  gen_cmd->add_option("--context-coupling", gen.context_coupling, "Context gain on the first coefficient")
      ->capture_default_str();
  gen_cmd->add_flag("--no-occlusion", no_occlusion, "Keep every keypoint visible");
  gen_cmd->add_option("--threads", gen.threads, "Worker threads")->capture_default_str();

  TrainFlags lifter_flags, detector_flags, e2e_flags;
  auto* tl = app.add_subcommand("train-lifter", "Train the lifter on ground-truth keypoints");
  add_train_options(tl, lifter_flags);
  auto* td = app.add_subcommand("train-detector", "Pre-train the keypoint detector");
  add_train_options(td, detector_flags);
  auto* te = app.add_subcommand("train-e2e", "Train detector and lifter jointly from images");
  add_train_options(te, e2e_flags);
  te->add_flag("--no-context", e2e_flags.no_context, "Withhold the context vector from the lifter");

  std::string ckpt, data_dir, mode = "gt-keypoints", report_file;
  bool train_split = false, baseline = false;
  std::size_t eval_threads = std::max(1u, std::thread::hardware_concurrency());
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--mode", mode, "gt-keypoints or from-images")
      ->check(CLI::IsMember({"gt-keypoints", "from-images"}))
      ->capture_default_str();
  ev->add_flag("--train-split", train_split, "Evaluate the training split instead of the test split");
  ev->add_flag("--baseline", baseline, "Also report the category-template baselines");
  ev->add_option("--report", report_file, "Write key-value metrics to this file");
  ev->add_option("--threads", eval_threads, "Worker threads");

  std::uint64_t gc_seed = 0;
  std::size_t gc_coords = 3;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of all loss gradients");
  gc->add_option("--seed", gc_seed, "Seed of the random system")->required();
  gc->add_option("--coords", gc_coords, "Coordinates per parameter tensor")->capture_default_str();

  std::string coh_ckpt;
  auto* coh = app.add_subcommand("coherence", "Mutual coherence of the lifter's latent basis");
  coh->add_option("--checkpoint", coh_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);

  std::string morph_ckpt, morph_data, target;
  std::size_t sample_id = 0;
  auto* mo = app.add_subcommand("morph", "Decode a sample's latent code under another category");
  mo->add_option("--checkpoint", morph_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  mo->add_option("--sample", sample_id, "Sample id")->required();
  mo->add_option("--target-category", target, "Category name to decode into")->required();
  mo->add_option("--data", morph_data, "Dataset directory (default: the one the checkpoint was trained on)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_cmd) {
      gen.train_per_category = samples;
      gen.test_per_category = test_samples ? *test_samples : samples / 4;
      gen.occlusion = !no_occlusion;
      const Dataset ds = generate_dataset(gen);
      write_dataset(ds, gen_out);
      std::printf("wrote %zu samples in %zu categories to %s\n", ds.samples.size(), ds.categories.size(),
                  gen_out.c_str());
      for (const auto& c : ds.categories) {
        std::printf("  %s: %zu keypoints, block offset %zu\n", c.schema.name.c_str(), c.schema.keypoint_count(),
                    c.schema.block_offset);
      }
      return 0;
    }
    if (*tl) return run_train(lifter_flags, Phase::LifterOnly);
    if (*td) return run_train(detector_flags, Phase::DetectorPretrain);
    if (*te) return run_train(e2e_flags, e2e_flags.no_context ? Phase::EndToEndNoContext : Phase::EndToEnd);
    if (*ev) {
      const EvalMode m = parse_eval_mode(mode);
      const Model model = Model::load(ckpt);
      const Dataset ds = read_dataset(data_dir, m == EvalMode::FromImages);
      const EvalReport r = evaluate(model, ds, m, !train_split, eval_threads);
      r.write_table(std::cout);
      if (baseline) {
        std::printf("template baseline (canonical pose): mpjpe %.6f\n",
                    template_baseline(ds, false, !train_split).mpjpe);
        std::printf("template baseline (true rotation):  mpjpe %.6f\n",
                    template_baseline(ds, true, !train_split).mpjpe);
      }
      if (!report_file.empty()) {
        std::ofstream out(report_file);
        r.write_key_values(out);
        if (!out) throw std::runtime_error("cannot write " + report_file);
      }
      return 0;
    }
    if (*gc) {
      GradientSuiteOptions opts;
      opts.coords_per_tensor = gc_coords;
      const auto cases = gradient_suite(gc_seed, opts);
      bool ok = true;
      for (const auto& c : cases) {
        const bool pass = c.max_rel_error < 1e-4 && c.checked > 0;
        ok = ok && pass;
        std::printf("%-13s %-9s checked %4zu  max rel error %.3e  %s%s\n", c.loss.c_str(), c.group.c_str(), c.checked,
                    c.max_rel_error, pass ? "ok" : "FAIL at ", pass ? "" : c.worst.c_str());
      }
      if (!ok) {
        std::fprintf(stderr, "kplift: gradient check failed\n");
        return 1;
      }
      return 0;
    }
    if (*coh) {
      const Model model = Model::load(coh_ckpt);
      std::printf("%.9f\n", mutual_coherence(model.lifter().latent_basis()));
      return 0;
    }
    if (*mo) {
      CheckpointInfo info;
      const Model model = Model::load(morph_ckpt, &info);
      const std::filesystem::path dir = morph_data.empty() ? dataset_of(info) : std::filesystem::path(morph_data);
      const Dataset ds = read_dataset(dir, false);
      const SyntheticSample* sample = nullptr;
      for (const auto& s : ds.samples) {
        if (s.id == sample_id) sample = &s;
      }
      if (!sample) throw std::invalid_argument("no sample with id " + std::to_string(sample_id));
      const auto z = model.registry().find(target);
      if (!z) throw std::invalid_argument("unknown category '" + target + "'");
      const auto code = latent_code(model, *sample);
      const Structure3D x = cross_category_decode(code, *z, model.lifter().shape, model.registry());
      const auto& schema = model.registry().at(*z);
      std::printf("# sample %zu (%s) decoded as %s\n", sample->id, model.registry().at(sample->category).name.c_str(),
                  schema.name.c_str());
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        std::printf("%s %.9f %.9f %.9f\n", schema.keypoint_names[static_cast<std::size_t>(j)].c_str(), x(0, j),
                    x(1, j), x(2, j));
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "kplift: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
