#include "kplift/model.hpp"

#include <json.hpp>

namespace kplift {

namespace {

using nlohmann::json;

constexpr std::uint64_t kLifterStream = 1;
constexpr std::uint64_t kDetectorStream = 2;

json lifter_json(const LifterConfig& c) {
  return {{"hidden", c.hidden},
          {"features", c.features},
          {"latent_dim", c.latent_dim},
          {"context_dim", c.context_dim},
          {"cutoff", c.cutoff}};
}

LifterConfig lifter_from(const json& j) {
  LifterConfig c;
  c.hidden = j.at("hidden").get<std::size_t>();
  c.features = j.at("features").get<std::size_t>();
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.context_dim = j.at("context_dim").get<std::size_t>();
  c.cutoff = j.at("cutoff").get<bool>();
  return c;
}

json detector_json(const DetectorConfig& c) {
  return {{"image_size", c.image_size},       {"patch", c.patch},       {"model_dim", c.model_dim},
          {"blocks", c.blocks},               {"heads", c.heads},       {"ffn_dim", c.ffn_dim},
          {"spare_queries", c.spare_queries}, {"context_dim", c.context_dim}, {"max_keypoints", c.max_keypoints},
          {"categories", c.categories}};
}

DetectorConfig detector_from(const json& j) {
  DetectorConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.spare_queries = j.at("spare_queries").get<std::size_t>();
  c.context_dim = j.at("context_dim").get<std::size_t>();
  c.max_keypoints = j.at("max_keypoints").get<std::size_t>();
  c.categories = j.at("categories").get<std::size_t>();
  return c;
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  for (auto s : spec_.categories) registry_.register_category(std::move(s));
  Rng rng(mix_seed(seed, kLifterStream));
  lifter_ = Lifter(spec_.lifter, registry_.total_keypoints(), rng);
  if (spec_.detector) {
    Rng drng(mix_seed(seed, kDetectorStream));
    detector_ = Detector(*spec_.detector, drng);
  }
}

Detector& Model::detector() {
  if (!detector_) throw std::logic_error("model has no detector");
  return *detector_;
}

const Detector& Model::detector() const {
  if (!detector_) throw std::logic_error("model has no detector");
  return *detector_;
}

void Model::attach_detector(const DetectorConfig& config, std::uint64_t seed) {
  spec_.detector = config;
  Rng drng(mix_seed(seed, kDetectorStream));
  detector_ = Detector(config, drng);
}

ParamList Model::parameters() const {
  ParamList out;
  lifter_.collect(out);
  if (detector_) detector_->collect(out);
  return out;
}

void Model::save(const std::filesystem::path& path, const CheckpointInfo& info) const {
  json meta;
  json cats = json::array();
  for (const auto& c : spec_.categories) cats.push_back({{"name", c.name}, {"keypoint_names", c.keypoint_names}});
  meta["categories"] = cats;
  meta["lifter"] = lifter_json(spec_.lifter);
  meta["detector"] = spec_.detector ? detector_json(*spec_.detector) : json(nullptr);
  meta["use_context"] = spec_.use_context;
  meta["phase"] = info.phase;
  meta["epoch"] = info.epoch;
  meta["config"] = info.config.empty() ? json::object() : json::parse(info.config);
  meta["metrics"] = info.metrics;
  save_checkpoint(path, parameters(), meta.dump(1));
}

Model Model::load(const std::filesystem::path& path, CheckpointInfo* info) {
  const CheckpointData data = load_checkpoint(path);
  ModelSpec spec;
  CheckpointInfo parsed;
  try {
    const json meta = json::parse(data.metadata);
    for (const auto& c : meta.at("categories")) {
      CategorySchema s;
      s.name = c.at("name").get<std::string>();
      s.keypoint_names = c.at("keypoint_names").get<std::vector<std::string>>();
      spec.categories.push_back(std::move(s));
    }
    spec.lifter = lifter_from(meta.at("lifter"));
    if (!meta.at("detector").is_null()) spec.detector = detector_from(meta.at("detector"));
    spec.use_context = meta.at("use_context").get<bool>();
    parsed.phase = meta.at("phase").get<std::string>();
    parsed.epoch = meta.at("epoch").get<std::size_t>();
    parsed.config = meta.at("config").dump();
    parsed.metrics = meta.at("metrics").get<std::map<std::string, double>>();
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad metadata: " + e.what());
  }
  // Parameter values are overwritten below; the seed only fixes the shapes.
  Model model(std::move(spec), 0);
  assign_parameters(data, model.parameters());
  if (info) *info = std::move(parsed);
  return model;
}

}  // namespace kplift
