#include "kplift/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace kplift {

namespace {

using nlohmann::json;

constexpr std::size_t kEvalChunk = 64;
// Shape units per unit-square unit of the detector's output.
constexpr double kUnitToShape = static_cast<double>(kImageSize) / kPixelsPerUnit;

bool uses_images(Phase p) { return p != Phase::LifterOnly; }
bool uses_lifter(Phase p) { return p != Phase::DetectorPretrain; }

const CategorySchema& schema_of(const Model& model, const SyntheticSample& s) { return model.registry().at(s.category); }

// Writes a k_z block into the stacked 2 x k layout.
Keypoints2D stack(const Model& model, const SyntheticSample& s, const Keypoints2D& block) {
  const auto& schema = schema_of(model, s);
  Keypoints2D out = Keypoints2D::Zero(2, static_cast<Eigen::Index>(model.registry().total_keypoints()));
  out.middleCols(static_cast<Eigen::Index>(schema.block_offset), block.cols()) = block;
  return out;
}

std::vector<double> stack_visibility(const Model& model, const SyntheticSample& s, bool all_visible) {
  const auto& schema = schema_of(model, s);
  std::vector<double> v(model.registry().total_keypoints(), 0.0);
  for (std::size_t j = 0; j < schema.keypoint_count(); ++j) {
    v[schema.block_offset + j] = (all_visible || s.visibility.at(j)) ? 1.0 : 0.0;
  }
  return v;
}

void check_sample(const Model& model, const SyntheticSample& s) {
  const auto& schema = model.registry().at(s.category);
  if (static_cast<std::size_t>(s.keypoints2d.cols()) != schema.keypoint_count() ||
      s.visibility.size() != schema.keypoint_count()) {
    throw std::invalid_argument("sample " + std::to_string(s.id) + " does not match category " + schema.name);
  }
}

// Packs [B,2,k] from per-sample stacked matrices.
Tensor pack_keypoints(const std::vector<Keypoints2D>& rows) {
  const std::size_t k = static_cast<std::size_t>(rows.front().cols());
  std::vector<double> v;
  v.reserve(rows.size() * 2 * k);
  for (const auto& m : rows) {
    for (int r = 0; r < 2; ++r) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(r, j));
    }
  }
  return Tensor::from({rows.size(), 2, k}, std::move(v));
}

Tensor pack_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return Tensor::from({rows.size(), rows.front().size()}, std::move(v));
}

std::vector<ImageRaster> batch_images(const Batch& batch) {
  std::vector<ImageRaster> out;
  out.reserve(batch.size());
  for (const auto* s : batch) {
    if (!s->image) throw std::invalid_argument("sample " + std::to_string(s->id) + " has no image loaded");
    out.push_back(*s->image);
  }
  return out;
}

// Zero-mean, unit-RMS normalization of [B,2,k] over the points where
// mask [B,k] is 1, differentiable in the points.
struct NormalizedTensor {
  Tensor points;
  Tensor scale;  // [B]
};

NormalizedTensor normalize_tensor(const Tensor& points, const Tensor& mask) {
  const std::size_t b = points.dim(0);
  const std::size_t k = points.dim(2);
  const Tensor m3 = reshape(mask, {b, 1, k});
  const Tensor count = sum_last(mask).detach();  // [B]
  const Tensor center = div(sum_last(mul(points, m3)), reshape(count, {b, 1}));
  const Tensor centered = mul(sub(points, reshape(center, {b, 2, 1})), m3);
  const Tensor ms = div(sum_last(sum_last(square(centered))), count);
  const Tensor scale = sqrt(add_scalar(ms, 1e-12));
  return {div(centered, reshape(scale, {b, 1, 1})), scale};
}

struct Matching {
  std::vector<std::size_t> query_rows;    // b*Q + q, one per GT keypoint, batch-major
  std::vector<std::size_t> stacked_rows;  // b*k + offset + t
  std::vector<int> types;
  Tensor gt_locations;                    // [N,2] unit square
};

Matching match_batch(const Model& model, const DetectionOutput& det, const Batch& batch) {
  const std::size_t q = det.queries();
  const std::size_t types = det.type_logits.dim(2);
  const std::size_t k = model.registry().total_keypoints();
  Matching m;
  std::vector<double> gt;
  const auto loc = det.locations.data();
  const auto logit = det.type_logits.data();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = *batch[b];
    const auto& schema = schema_of(model, s);
    const auto g = static_cast<Eigen::Index>(schema.keypoint_count());
    Eigen::MatrixXd pred(q, 2);
    Eigen::MatrixXd lg(q, types);
    for (std::size_t i = 0; i < q; ++i) {
      pred(static_cast<Eigen::Index>(i), 0) = loc[(b * q + i) * 2];
      pred(static_cast<Eigen::Index>(i), 1) = loc[(b * q + i) * 2 + 1];
      for (std::size_t t = 0; t < types; ++t) lg(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = logit[(b * q + i) * types + t];
    }
    Eigen::MatrixXd target(g, 2);
    std::vector<int> t_types(static_cast<std::size_t>(g));
    for (Eigen::Index t = 0; t < g; ++t) {
      target.row(t) = to_unit_square(s.keypoints2d.col(t)).transpose();
      t_types[static_cast<std::size_t>(t)] = static_cast<int>(t);
    }
    const MatchResult match = hungarian_match(matching_cost(pred, lg, target, t_types));
    const auto query_of = match.query_for_gt();
    // A change of assignment is a discontinuity, like a ReLU kink.
    if (BranchTrace::active()) {
      for (std::size_t qi : query_of) BranchTrace::record(qi);
    }
    for (Eigen::Index t = 0; t < g; ++t) {
      m.query_rows.push_back(b * q + query_of[static_cast<std::size_t>(t)]);
      m.stacked_rows.push_back(b * k + schema.block_offset + static_cast<std::size_t>(t));
      m.types.push_back(static_cast<int>(t));
      gt.push_back(target(t, 0));
      gt.push_back(target(t, 1));
    }
  }
  m.gt_locations = Tensor::from({m.types.size(), 2}, std::move(gt));
  return m;
}

void require_finite(const LossComponents& c, Phase phase) {
  const std::pair<const char*, const Tensor*> parts[] = {
      {"location", &c.location},         {"type", &c.type},
      {"category", &c.category},         {"reprojection", &c.reprojection},
      {"deformation", &c.deformation}};
  for (const auto& [name, t] : parts) {
    if (!std::isfinite(t->item())) {
      throw TrainingError(std::string("non-finite ") + name + " loss in phase " + phase_name(phase));
    }
  }
}

// Copies parameters by name.
void copy_parameters(const ParamList& from, const ParamList& to, const std::string& prefix) {
  for (const auto& dst : to) {
    if (dst.name.rfind(prefix, 0) != 0) continue;
    bool found = false;
    for (const auto& src : from) {
      if (src.name != dst.name) continue;
      if (src.tensor.shape() != dst.tensor.shape()) throw ConfigError("shape mismatch for " + dst.name);
      Tensor leaf = dst.tensor;
      std::copy(src.tensor.data().begin(), src.tensor.data().end(), leaf.mutable_data().begin());
      found = true;
    }
    if (!found) throw ConfigError("no parameter " + dst.name + " to copy");
  }
}

void check_categories(const std::vector<CategorySchema>& a, const std::vector<SyntheticCategory>& b,
                      const std::string& what) {
  bool same = a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) {
    same = a[i].name == b[i].schema.name && a[i].keypoint_names == b[i].schema.keypoint_names;
  }
  if (!same) throw ConfigError(what + " was trained on different categories than the dataset");
}

Model initial_model(const TrainConfig& config, const Dataset& dataset) {
  ModelSpec spec;
  for (const auto& c : dataset.categories) spec.categories.push_back(c.schema);
  spec.lifter = config.lifter;
  DetectorConfig det = config.detector;
  const auto registry = dataset.registry();
  det.max_keypoints = registry.max_keypoints();
  det.categories = registry.size();
  det.context_dim = config.lifter.context_dim;
  if (uses_images(config.phase)) spec.detector = det;
  spec.use_context = config.phase == Phase::EndToEnd;

  std::optional<Model> lifter_src;
  std::optional<Model> detector_src;
  if (!config.lifter_checkpoint.empty()) {
    lifter_src = Model::load(config.lifter_checkpoint);
    check_categories(lifter_src->spec().categories, dataset.categories, config.lifter_checkpoint);
    spec.lifter = lifter_src->spec().lifter;
  }
  if (!config.detector_checkpoint.empty() && uses_images(config.phase)) {
    detector_src = Model::load(config.detector_checkpoint);
    check_categories(detector_src->spec().categories, dataset.categories, config.detector_checkpoint);
    if (!detector_src->has_detector()) throw ConfigError(config.detector_checkpoint + " holds no detector");
    spec.detector = detector_src->spec().detector;
  }
  if (spec.detector && spec.detector->context_dim != spec.lifter.context_dim) {
    throw ConfigError("detector context width differs from the lifter's");
  }
  Model model(std::move(spec), config.seed);
  if (lifter_src) {
    ParamList dst;
    model.lifter().collect(dst);
    copy_parameters(lifter_src->parameters(), dst, "");
  }
  if (detector_src) copy_parameters(detector_src->parameters(), model.parameters(), "detector.");
  return model;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

void add_loss(LossBreakdown& acc, const LossBreakdown& x, double w) {
  acc.location += w * x.location;
  acc.type += w * x.type;
  acc.category += w * x.category;
  acc.reprojection += w * x.reprojection;
  acc.deformation += w * x.deformation;
  acc.total += w * x.total;
}

// Runs fn(begin, end) over [0, n) in kEvalChunk pieces on `threads` workers.
template <typename Fn>
void parallel_chunks(std::size_t n, std::size_t threads, Fn fn) {
  const std::size_t chunks = (n + kEvalChunk - 1) / kEvalChunk;
  auto worker = [&](std::size_t t, std::size_t stride) {
    for (std::size_t c = t; c < chunks; c += stride) fn(c * kEvalChunk, std::min(n, (c + 1) * kEvalChunk));
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    worker(0, 1);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t, threads);
  for (auto& th : pool) th.join();
}

struct Prediction {
  Structure3D points;
  bool category_correct = true;
};

std::vector<Prediction> predict_chunk(const Model& model, const Batch& batch, EvalMode mode) {
  const std::size_t n = batch.size();
  const std::size_t k = model.registry().total_keypoints();
  std::vector<Keypoints2D> inputs;
  std::vector<std::vector<double>> vis;
  std::vector<double> scales;
  std::vector<int> cats;
  std::vector<bool> correct(n, true);
  std::optional<Tensor> context;
  for (const auto* s : batch) check_sample(model, *s);

  if (mode == EvalMode::GtKeypoints) {
    for (const auto* s : batch) {
      const auto norm = normalize_keypoints(s->keypoints2d, s->visibility);
      inputs.push_back(stack(model, *s, norm.points));
      vis.push_back(stack_visibility(model, *s, false));
      scales.push_back(norm.scale);
      cats.push_back(s->category);
    }
  } else {
    if (!model.has_detector()) throw std::invalid_argument("from-images evaluation needs a detector");
    const auto images = batch_images(batch);
    const DetectionOutput det = model.detector().detect(images);
    for (std::size_t b = 0; b < n; ++b) {
      const auto& s = *batch[b];
      const auto guess = select_keypoints(det, b, model.registry());
      correct[b] = guess.category == s.category;
      const auto sel = select_keypoints(det, b, model.registry(), s.category);
      const auto& schema = schema_of(model, s);
      const auto kz = static_cast<Eigen::Index>(schema.keypoint_count());
      Keypoints2D pts(2, kz);
      for (Eigen::Index t = 0; t < kz; ++t) {
        pts.col(t) = from_unit_square(sel.keypoints.col(static_cast<Eigen::Index>(schema.block_offset) + t));
      }
      const std::vector<std::uint8_t> all(static_cast<std::size_t>(kz), 1);
      const auto norm = normalize_keypoints(pts, all);
      inputs.push_back(stack(model, s, norm.points));
      vis.push_back(stack_visibility(model, s, true));
      scales.push_back(norm.scale);
      cats.push_back(s.category);
    }
    if (model.spec().use_context) context = det.context;
  }
  LifterInput in{pack_keypoints(inputs), pack_rows(vis), context, cats};
  const LifterOutput out = model.lifter().lift(in, model.registry());
  std::vector<Prediction> result(n);
  for (std::size_t b = 0; b < n; ++b) {
    const auto& schema = schema_of(model, *batch[b]);
    Eigen::Matrix3d r;
    Structure3D x(3, static_cast<Eigen::Index>(schema.keypoint_count()));
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) r(i, j) = out.rotation[b * 9 + static_cast<std::size_t>(i * 3 + j)];
      for (Eigen::Index t = 0; t < x.cols(); ++t) {
        x(i, t) = out.structure[(b * 3 + static_cast<std::size_t>(i)) * k + schema.block_offset + static_cast<std::size_t>(t)];
      }
    }
    result[b].points = scales[b] * (r * x);
    result[b].category_correct = correct[b];
  }
  return result;
}

}  // namespace

std::string phase_name(Phase phase) {
  switch (phase) {
    case Phase::LifterOnly:
      return "lifter-only";
    case Phase::DetectorPretrain:
      return "detector-pretrain";
    case Phase::EndToEnd:
      return "end-to-end";
    case Phase::EndToEndNoContext:
      return "end-to-end-no-context";
  }
  return "?";
}

Phase parse_phase(const std::string& name) {
  for (Phase p : {Phase::LifterOnly, Phase::DetectorPretrain, Phase::EndToEnd, Phase::EndToEndNoContext}) {
    if (phase_name(p) == name) return p;
  }
  throw ConfigError("unknown phase '" + name + "'");
}

EvalMode parse_eval_mode(const std::string& name) {
  if (name == "gt-keypoints") return EvalMode::GtKeypoints;
  if (name == "from-images") return EvalMode::FromImages;
  throw ConfigError("unknown evaluation mode '" + name + "'");
}

TrainConfig TrainConfig::defaults(Phase phase) {
  TrainConfig c;
  c.phase = phase;
  switch (phase) {
    case Phase::LifterOnly:
    case Phase::DetectorPretrain:
      c.epochs = 20;
      c.learning_rate = 1e-3;
      break;
    case Phase::EndToEnd:
    case Phase::EndToEndNoContext:
      c.epochs = 30;
      c.learning_rate = 1e-4;
      break;
  }
  return c;
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c = defaults(j.contains("phase") ? parse_phase(j["phase"].get<std::string>()) : Phase::LifterOnly);
  auto take = [](const json& obj, const char* key, auto& dst) {
    if (!obj.contains(key)) return;
    try {
      dst = obj.at(key).get<std::decay_t<decltype(dst)>>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
  };
  auto known = [](const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
    for (const auto& [key, _] : obj.items()) {
      bool ok = false;
      for (const char* k : keys) ok = ok || key == k;
      if (!ok) throw ConfigError("unknown config key '" + where + key + "'");
    }
  };
  known(j,
        {"phase", "dataset", "output", "lifter_checkpoint", "detector_checkpoint", "seed", "epochs", "batch_size",
         "learning_rate", "lr_schedule", "loss_weights", "lifter", "detector", "max_train_samples", "threads"},
        "");
  take(j, "dataset", c.dataset);
  take(j, "output", c.output);
  take(j, "lifter_checkpoint", c.lifter_checkpoint);
  take(j, "detector_checkpoint", c.detector_checkpoint);
  take(j, "seed", c.seed);
  take(j, "epochs", c.epochs);
  take(j, "batch_size", c.batch_size);
  take(j, "learning_rate", c.learning_rate);
  take(j, "lr_schedule", c.lr_schedule);
  take(j, "max_train_samples", c.max_train_samples);
  take(j, "threads", c.threads);
  if (j.contains("loss_weights")) {
    const json& w = j["loss_weights"];
    known(w, {"location", "type", "category", "reprojection", "deformation"}, "loss_weights.");
    take(w, "location", c.weights.location);
    take(w, "type", c.weights.type);
    take(w, "category", c.weights.category);
    take(w, "reprojection", c.weights.reprojection);
    take(w, "deformation", c.weights.deformation);
  }
  if (j.contains("lifter")) {
    const json& l = j["lifter"];
    known(l, {"hidden", "features", "latent_dim", "context_dim", "cutoff"}, "lifter.");
    take(l, "hidden", c.lifter.hidden);
    take(l, "features", c.lifter.features);
    take(l, "latent_dim", c.lifter.latent_dim);
    take(l, "context_dim", c.lifter.context_dim);
    take(l, "cutoff", c.lifter.cutoff);
  }
  if (j.contains("detector")) {
    const json& d = j["detector"];
    known(d, {"model_dim", "blocks", "heads", "ffn_dim", "patch", "spare_queries"}, "detector.");
    take(d, "model_dim", c.detector.model_dim);
    take(d, "blocks", c.detector.blocks);
    take(d, "heads", c.detector.heads);
    take(d, "ffn_dim", c.detector.ffn_dim);
    take(d, "patch", c.detector.patch);
    take(d, "spare_queries", c.detector.spare_queries);
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  json j = json::parse(to_json());
  json v;
  try {
    v = json::parse(value);
  } catch (const json::parse_error&) {
    v = value;
  }
  json* slot = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!slot->contains(parts[i])) throw ConfigError("unknown config key '" + key + "'");
    slot = &(*slot)[parts[i]];
  }
  if (parts.empty() || !slot->contains(parts.back())) throw ConfigError("unknown config key '" + key + "'");
  // Keep string-typed keys as strings even when the value looks numeric.
  if ((*slot)[parts.back()].is_string()) v = value;
  (*slot)[parts.back()] = v;
  *this = from_json(j.dump());
}

std::string TrainConfig::to_json() const {
  json j;
  j["phase"] = phase_name(phase);
  j["dataset"] = dataset;
  j["output"] = output;
  j["lifter_checkpoint"] = lifter_checkpoint;
  j["detector_checkpoint"] = detector_checkpoint;
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["lr_schedule"] = lr_schedule;
  j["max_train_samples"] = max_train_samples;
  j["threads"] = threads;
  j["loss_weights"] = {{"location", weights.location},
                       {"type", weights.type},
                       {"category", weights.category},
                       {"reprojection", weights.reprojection},
                       {"deformation", weights.deformation}};
  j["lifter"] = {{"hidden", lifter.hidden},
                 {"features", lifter.features},
                 {"latent_dim", lifter.latent_dim},
                 {"context_dim", lifter.context_dim},
                 {"cutoff", lifter.cutoff}};
  j["detector"] = {{"model_dim", detector.model_dim}, {"blocks", detector.blocks},
                   {"heads", detector.heads},         {"ffn_dim", detector.ffn_dim},
                   {"patch", detector.patch},         {"spare_queries", detector.spare_queries}};
  return j.dump();
}

void TrainConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(epochs, "epochs");
  positive(batch_size, "batch_size");
  positive(threads, "threads");
  positive(lifter.hidden, "lifter.hidden");
  positive(lifter.features, "lifter.features");
  positive(lifter.latent_dim, "lifter.latent_dim");
  positive(lifter.context_dim, "lifter.context_dim");
  positive(detector.model_dim, "detector.model_dim");
  positive(detector.blocks, "detector.blocks");
  positive(detector.heads, "detector.heads");
  positive(detector.ffn_dim, "detector.ffn_dim");
  positive(detector.patch, "detector.patch");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be nonnegative");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw ConfigError("lr_schedule must be 'constant' or 'cosine', got '" + lr_schedule + "'");
  }
  if (detector.model_dim % detector.heads != 0) throw ConfigError("detector.model_dim must be divisible by heads");
  if (kImageSize % detector.patch != 0) throw ConfigError("detector.patch must divide the image size");
  try {
    weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

LossComponents batch_losses(const Model& model, Phase phase, const Batch& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  for (const auto* s : batch) check_sample(model, *s);
  const std::size_t n = batch.size();
  const std::size_t k = model.registry().total_keypoints();
  std::vector<int> cats;
  for (const auto* s : batch) cats.push_back(s->category);
  const Tensor zeta = category_masks(model.registry(), cats);

  LossComponents c;
  if (phase == Phase::LifterOnly) {
    std::vector<Keypoints2D> inputs;
    std::vector<std::vector<double>> vis;
    for (const auto* s : batch) {
      inputs.push_back(stack(model, *s, normalize_keypoints(s->keypoints2d, s->visibility).points));
      vis.push_back(stack_visibility(model, *s, false));
    }
    const Tensor y = pack_keypoints(inputs);
    const Tensor v = pack_rows(vis);
    const LifterOutput out = model.lifter().lift({y, v, std::nullopt, cats}, model.registry());
    c.reprojection = loss_reprojection(y, out.reprojection, zeta, v);
    c.deformation = loss_deformation(out.deformation, zeta);
    return c;
  }

  const auto images = batch_images(batch);
  const DetectionOutput det = model.detector().detect(images);
  const Matching m = match_batch(model, det, batch);
  const std::size_t q = det.queries();
  const Tensor matched = index_rows(reshape(det.locations, {n * q, 2}), m.query_rows);
  const Tensor logits = index_rows(reshape(det.type_logits, {n * q, det.type_logits.dim(2)}), m.query_rows);
  c.location = loss_location(m.gt_locations, matched);
  c.type = loss_type(logits, m.types);
  c.category = loss_category(det.category_logits, cats);
  if (!uses_lifter(phase)) return c;

  // Detected keypoints in shape units, stacked, then normalized over the
  // category block.
  const Tensor shape_units = scale(add_scalar(matched, -0.5), kUnitToShape);
  const Tensor stacked = transpose_last2(reshape(scatter_rows(shape_units, m.stacked_rows, n * k), {n, k, 2}));
  const NormalizedTensor input = normalize_tensor(stacked, zeta);

  std::vector<Keypoints2D> targets;
  std::vector<std::vector<double>> vis;
  for (const auto* s : batch) {
    const std::vector<std::uint8_t> all(s->visibility.size(), 1);
    targets.push_back(stack(model, *s, normalize_keypoints(s->keypoints2d, all).points));
    vis.push_back(stack_visibility(model, *s, false));
  }
  std::optional<Tensor> context;
  if (phase == Phase::EndToEnd) context = det.context;
  const LifterOutput out = model.lifter().lift({input.points, zeta, context, cats}, model.registry());
  c.reprojection = loss_reprojection(pack_keypoints(targets), out.reprojection, zeta, pack_rows(vis));
  c.deformation = loss_deformation(out.deformation, zeta);
  return c;
}

ParamList trainable_parameters(const Model& model, Phase phase) {
  ParamList out;
  if (uses_lifter(phase)) model.lifter().collect(out);
  if (uses_images(phase)) model.detector().collect(out);
  return out;
}

LossBreakdown train_step(Model& model, Adam& optimizer, Phase phase, const LossWeights& weights, const Batch& batch) {
  LossWeights w = weights;
  if (phase == Phase::LifterOnly) w.location = w.type = w.category = 0.0;
  if (phase == Phase::DetectorPretrain) w.reprojection = w.deformation = 0.0;
  const LossComponents c = batch_losses(model, phase, batch);
  require_finite(c, phase);
  const Tensor total = total_loss(c, w);
  const ParamList params = trainable_parameters(model, phase);
  std::vector<Tensor> leaves;
  for (const auto& p : params) leaves.push_back(p.tensor);
  const Gradients grads = gradient_of(total, leaves);
  optimizer.step(params, grads);
  return {c.location.item(), c.type.item(), c.category.item(), c.reprojection.item(), c.deformation.item(),
          total.item()};
}

TrainResult train(const TrainConfig& config, const Dataset& dataset, const ProgressFn& progress) {
  config.validate();
  TrainResult result{initial_model(config, dataset), {}, {}};
  Model& model = result.model;
  Batch samples;
  for (const auto& s : dataset.samples) {
    if (!s.test) samples.push_back(&s);
  }
  if (config.max_train_samples > 0 && samples.size() > config.max_train_samples) {
    samples.resize(config.max_train_samples);
  }
  if (samples.empty()) throw ConfigError("dataset has no training samples");

  AdamOptions opts;
  opts.learning_rate = config.learning_rate;
  Adam adam(opts);
  const std::size_t per_epoch = (samples.size() + config.batch_size - 1) / config.batch_size;
  const double total_steps = static_cast<double>(per_epoch * config.epochs);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = permutation(samples.size(), mix_seed(config.seed, 1000 + epoch));
    EpochLog log;
    log.epoch = epoch + 1;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      Batch batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(samples[order[i]]);
      }
      if (config.lr_schedule == "cosine") {
        adam.set_learning_rate(config.learning_rate * 0.5 *
                               (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps)));
      }
      ++step;
      const LossBreakdown l = train_step(model, adam, config.phase, config.weights, batch);
      add_loss(log.mean, l, static_cast<double>(batch.size()) / static_cast<double>(samples.size()));
    }
    result.history.push_back(log);
    if (progress) progress(log);
  }

  result.info.phase = phase_name(config.phase);
  result.info.epoch = config.epochs;
  result.info.config = config.to_json();
  if (!result.history.empty()) {
    const auto& last = result.history.back().mean;
    result.info.metrics["train.loss.location"] = last.location;
    result.info.metrics["train.loss.type"] = last.type;
    result.info.metrics["train.loss.category"] = last.category;
    result.info.metrics["train.loss.reprojection"] = last.reprojection;
    result.info.metrics["train.loss.deformation"] = last.deformation;
    result.info.metrics["train.loss.total"] = last.total;
  }
  if (!dataset.split(true).empty()) {
    const EvalMode mode = uses_images(config.phase) ? EvalMode::FromImages : EvalMode::GtKeypoints;
    const EvalReport r = evaluate(model, dataset, mode, true, config.threads);
    result.info.metrics["test.mpjpe"] = r.mpjpe;
    result.info.metrics["test.stress"] = r.stress;
    result.info.metrics["test.category_accuracy"] = r.category_accuracy;
  }
  return result;
}

static std::vector<Structure3D> predict_all(const Model& model, const Batch& samples, EvalMode mode, std::size_t threads,
                                     std::vector<bool>* correct) {
  std::vector<Prediction> preds(samples.size());
  parallel_chunks(samples.size(), threads, [&](std::size_t begin, std::size_t end) {
    const Batch chunk(samples.begin() + static_cast<std::ptrdiff_t>(begin),
                      samples.begin() + static_cast<std::ptrdiff_t>(end));
    auto out = predict_chunk(model, chunk, mode);
    for (std::size_t i = 0; i < out.size(); ++i) preds[begin + i] = std::move(out[i]);
  });
  std::vector<Structure3D> points;
  for (auto& p : preds) {
    points.push_back(std::move(p.points));
    if (correct) correct->push_back(p.category_correct);
  }
  return points;
}

EvalReport evaluate(const Model& model, const Dataset& dataset, EvalMode mode, bool test_split, std::size_t threads) {
  const Batch samples = dataset.split(test_split);
  std::vector<std::string> names;
  for (const auto& c : model.spec().categories) names.push_back(c.name);
  check_categories(model.spec().categories, dataset.categories, "model");
  std::vector<bool> correct;
  const auto preds = predict_all(model, samples, mode, threads, &correct);
  EvalAccumulator acc(names);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    if (s.keypoints3d.cols() == 0) throw std::invalid_argument("sample " + std::to_string(s.id) + " has no 3D ground truth");
    acc.add(s.category, preds[i], s.camera_points(), correct[i]);
  }
  EvalReport r = acc.report();
  if (mode == EvalMode::GtKeypoints) r.category_accuracy = 1.0;
  return r;
}

EvalReport template_baseline(const Dataset& dataset, bool oracle_rotation, bool test_split) {
  std::vector<std::string> names;
  for (const auto& c : dataset.categories) names.push_back(c.schema.name);
  EvalAccumulator acc(names);
  for (const auto* s : dataset.split(test_split)) {
    const Structure3D& t = dataset.categories.at(static_cast<std::size_t>(s->category)).shape_template;
    acc.add(s->category, oracle_rotation ? Structure3D(s->rotation * t) : t, s->camera_points());
  }
  return acc.report();
}

Structure3D predict_structure(const Model& model, const SyntheticSample& sample, EvalMode mode) {
  return predict_chunk(model, Batch{&sample}, mode).front().points;
}

std::vector<double> latent_code(const Model& model, const SyntheticSample& sample) {
  check_sample(model, sample);
  const auto norm = normalize_keypoints(sample.keypoints2d, sample.visibility);
  const LifterInput in{pack_keypoints({stack(model, sample, norm.points)}),
                       pack_rows({stack_visibility(model, sample, false)}), std::nullopt, {sample.category}};
  const LifterOutput out = model.lifter().lift(in, model.registry());
  return {out.beta_raw.data().begin(), out.beta_raw.data().end()};
}

}  // namespace kplift
