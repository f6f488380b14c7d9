#pragma once

// Query-based keypoint extractor T(I) = (Y_z, z, rho).
//
// Patches of the image are embedded by a per-patch MLP plus a fixed 2D
// sinusoidal position code. Q keypoint queries and one context query pass
// through pre-norm blocks of query self-attention, cross-attention to the
// patch features, and a feed-forward layer. Keypoint queries are read out as
// a location in [0,1]^2 and K type logits; the context query as rho and the
// category logits.

#include "kplift/image.hpp"
#include "kplift/nn.hpp"
#include "kplift/shape_model.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <vector>

namespace kplift {

struct DetectorConfig {
  std::size_t image_size = 64;
  std::size_t patch = 8;
  std::size_t model_dim = 64;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t spare_queries = 4;
  std::size_t context_dim = 64;  // N_rho
  std::size_t max_keypoints = 0;  // K = max_z k_z
  std::size_t categories = 0;     // |Z|

  std::size_t queries() const { return max_keypoints + spare_queries; }
  std::size_t grid() const { return image_size / patch; }
};

struct DetectionOutput {
  Tensor locations;        // [B,Q,2], sigmoid-bounded (x, y)
  Tensor type_logits;      // [B,Q,K]
  Tensor context;          // [B,N_rho]
  Tensor category_logits;  // [B,|Z|]

  std::size_t batch() const { return locations.dim(0); }
  std::size_t queries() const { return locations.dim(1); }
};

// Fixed 2D sinusoidal code for a grid x grid layout, [grid*grid, width].
Tensor grid_position_code(std::size_t grid, std::size_t width);

struct AttentionLayer {
  Linear query;
  Linear key;
  Linear value;
  Linear output;

  AttentionLayer() = default;
  AttentionLayer(std::size_t width, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& memory, std::size_t heads) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct DecoderBlock {
  LayerNorm self_norm;
  AttentionLayer self_attention;
  LayerNorm cross_norm;
  AttentionLayer cross_attention;
  LayerNorm ffn_norm;
  Linear ffn_in;
  Linear ffn_out;

  DecoderBlock() = default;
  DecoderBlock(std::size_t width, std::size_t ffn, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& memory, std::size_t heads) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

class Detector {
 public:
  Detector() = default;
  Detector(const DetectorConfig& config, Rng& rng);

  // [B, P, model_dim] patch features (before any attention).
  Tensor embed_grid(std::span<const ImageRaster> images) const;
  DetectionOutput detect(std::span<const ImageRaster> images) const;

  const DetectorConfig& config() const { return config_; }
  void collect(ParamList& out) const;
  ParamList parameters() const;

  Linear patch_in;
  Linear patch_out;
  Tensor keypoint_queries;  // [Q, model_dim]
  Tensor context_query;     // [1, model_dim]
  std::vector<DecoderBlock> blocks;
  LayerNorm final_norm;
  Linear location_hidden;
  Linear location_out;
  Linear type_head;
  Linear context_hidden;
  Linear context_out;
  Linear category_head;

 private:
  DetectorConfig config_;
  Tensor position_code_;
};

struct KeypointSelection {
  int category = -1;
  Keypoints2D keypoints;            // 2 x k stacked, zero outside the category block
  std::vector<double> confidence;   // per stacked keypoint, zero outside the block
  std::vector<std::size_t> queries;  // chosen query per keypoint type of the category
};

// Evaluation-time readout: argmax category, then for every keypoint type of
// that category the query with the highest softmax probability for the type.
// Ties go to the lower index. `category` overrides the argmax when set.
KeypointSelection select_keypoints(const DetectionOutput& detection, std::size_t batch_index,
                                   const CategoryRegistry& registry, std::optional<int> category = std::nullopt);

}  // namespace kplift
