#pragma once

// A trained system: the category layout, the lifter and, once image training
// has happened, the detector.

#include "kplift/checkpoint.hpp"
#include "kplift/detector.hpp"
#include "kplift/lifter.hpp"
#include "kplift/shape_model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kplift {

struct ModelSpec {
  std::vector<CategorySchema> categories;
  LifterConfig lifter;
  std::optional<DetectorConfig> detector;
  // Feed the detector's context vector to the lifter.
  bool use_context = false;
};

struct CheckpointInfo {
  std::string phase;
  std::size_t epoch = 0;
  std::string config;  // JSON echo of the training configuration
  std::map<std::string, double> metrics;
};

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const CategoryRegistry& registry() const { return registry_; }
  bool has_detector() const { return detector_.has_value(); }
  Lifter& lifter() { return lifter_; }
  const Lifter& lifter() const { return lifter_; }
  Detector& detector();
  const Detector& detector() const;
  void set_use_context(bool on) { spec_.use_context = on; }
  // Adds a freshly initialized detector.
  void attach_detector(const DetectorConfig& config, std::uint64_t seed);

  ParamList parameters() const;

  void save(const std::filesystem::path& path, const CheckpointInfo& info) const;
  static Model load(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

 private:
  ModelSpec spec_;
  CategoryRegistry registry_;
  Lifter lifter_;
  std::optional<Detector> detector_;
};

}  // namespace kplift
