#include "kplift/detector.hpp"

#include <cmath>
#include <stdexcept>

namespace kplift {

Tensor grid_position_code(std::size_t grid, std::size_t width) {
  if (width % 4 != 0) throw std::invalid_argument("grid_position_code: width must be a multiple of 4");
  const std::size_t bands = width / 4;
  std::vector<double> code(grid * grid * width);
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      double* row = code.data() + (gy * grid + gx) * width;
      for (std::size_t i = 0; i < bands; ++i) {
        const double freq = std::pow(static_cast<double>(grid), -static_cast<double>(i) / static_cast<double>(bands));
        const double y = static_cast<double>(gy) * freq;
        const double x = static_cast<double>(gx) * freq;
        row[i] = std::sin(y);
        row[bands + i] = std::cos(y);
        row[2 * bands + i] = std::sin(x);
        row[3 * bands + i] = std::cos(x);
      }
    }
  }
  return Tensor::from({grid * grid, width}, std::move(code));
}

AttentionLayer::AttentionLayer(std::size_t width, Rng& rng)
    : query(width, width, rng), key(width, width, rng), value(width, width, rng), output(width, width, rng) {
  // Xavier-scale projections keep the attention logits moderate at init.
  for (Linear* l : {&query, &key, &value, &output}) {
    for (auto& w : l->weight.mutable_data()) w *= std::sqrt(0.5);
  }
}

Tensor AttentionLayer::operator()(const Tensor& x, const Tensor& memory, std::size_t heads) const {
  return output(attention(query(x), key(memory), value(memory), heads));
}

void AttentionLayer::collect(const std::string& prefix, ParamList& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

DecoderBlock::DecoderBlock(std::size_t width, std::size_t ffn, Rng& rng)
    : self_norm(width),
      self_attention(width, rng),
      cross_norm(width),
      cross_attention(width, rng),
      ffn_norm(width),
      ffn_in(width, ffn, rng),
      ffn_out(ffn, width, rng) {
  for (auto& w : ffn_out.weight.mutable_data()) w *= 0.5;
}

Tensor DecoderBlock::operator()(const Tensor& x, const Tensor& memory, std::size_t heads) const {
  const Tensor s = self_norm(x);
  Tensor h = add(x, self_attention(s, s, heads));
  h = add(h, cross_attention(cross_norm(h), memory, heads));
  return add(h, ffn_out(relu(ffn_in(ffn_norm(h)))));
}

void DecoderBlock::collect(const std::string& prefix, ParamList& out) const {
  self_norm.collect(prefix + ".self_norm", out);
  self_attention.collect(prefix + ".self_attention", out);
  cross_norm.collect(prefix + ".cross_norm", out);
  cross_attention.collect(prefix + ".cross_attention", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
  ffn_in.collect(prefix + ".ffn_in", out);
  ffn_out.collect(prefix + ".ffn_out", out);
}

Detector::Detector(const DetectorConfig& config, Rng& rng) : config_(config) {
  if (config.image_size % config.patch != 0) {
    throw std::invalid_argument("Detector: image size " + std::to_string(config.image_size) +
                                " is not divisible by patch " + std::to_string(config.patch));
  }
  if (config.max_keypoints == 0 || config.categories == 0) {
    throw std::invalid_argument("Detector: max_keypoints and categories must be set");
  }
  const std::size_t w = config.model_dim;
  patch_in = Linear(config.patch * config.patch, w, rng);
  patch_out = Linear(w, w, rng);
  keypoint_queries = normal_parameter({config.queries(), w}, 1.0, rng);
  context_query = normal_parameter({1, w}, 1.0, rng);
  for (std::size_t i = 0; i < config.blocks; ++i) blocks.emplace_back(w, config.ffn_dim, rng);
  final_norm = LayerNorm(w);
  location_hidden = Linear(w, w, rng);
  location_out = Linear(w, 2, rng);
  type_head = Linear(w, config.max_keypoints, rng);
  context_hidden = Linear(w, w, rng);
  context_out = Linear(w, config.context_dim, rng);
  category_head = Linear(w, config.categories, rng);
  for (Linear* l : {&location_out, &type_head, &context_out, &category_head}) {
    for (auto& v : l->weight.mutable_data()) v *= 0.1;
  }
  position_code_ = grid_position_code(config.grid(), w);
}

Tensor Detector::embed_grid(std::span<const ImageRaster> images) const {
  const std::size_t n = images.size();
  const std::size_t g = config_.grid();
  const std::size_t p = config_.patch;
  const std::size_t cells = g * g;
  std::vector<double> patches(n * cells * p * p);
  for (std::size_t b = 0; b < n; ++b) {
    const auto& img = images[b];
    if (img.width != config_.image_size || img.height != config_.image_size) {
      throw std::invalid_argument("embed_grid: image is " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height) + ", detector expects " +
                                  std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size));
    }
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        double* dst = patches.data() + ((b * cells) + gy * g + gx) * p * p;
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) dst[y * p + x] = img.at(gx * p + x, gy * p + y);
        }
      }
    }
  }
  const Tensor raw = Tensor::from({n, cells, p * p}, std::move(patches));
  return add(patch_out(relu(patch_in(raw))), position_code_);
}

DetectionOutput Detector::detect(std::span<const ImageRaster> images) const {
  const std::size_t n = images.size();
  const std::size_t w = config_.model_dim;
  const std::size_t q = config_.queries();
  const Tensor memory = embed_grid(images);
  Tensor x = add(Tensor::zeros({n, q + 1, w}), concat({keypoint_queries, context_query}, 0));
  for (const auto& block : blocks) x = block(x, memory, config_.heads);
  x = final_norm(x);
  const Tensor kp = slice(x, 1, 0, q);
  const Tensor ctx = reshape(slice(x, 1, q, 1), {n, w});

  DetectionOutput out;
  out.locations = sigmoid(location_out(relu(location_hidden(kp))));
  out.type_logits = type_head(kp);
  out.context = context_out(relu(context_hidden(ctx)));
  out.category_logits = category_head(ctx);
  return out;
}

void Detector::collect(ParamList& out) const {
  patch_in.collect("detector.patch_in", out);
  patch_out.collect("detector.patch_out", out);
  out.push_back({"detector.keypoint_queries", keypoint_queries});
  out.push_back({"detector.context_query", context_query});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("detector.block" + std::to_string(i), out);
  final_norm.collect("detector.final_norm", out);
  location_hidden.collect("detector.location_hidden", out);
  location_out.collect("detector.location_out", out);
  type_head.collect("detector.type", out);
  context_hidden.collect("detector.context_hidden", out);
  context_out.collect("detector.context_out", out);
  category_head.collect("detector.category", out);
}

ParamList Detector::parameters() const {
  ParamList out;
  collect(out);
  return out;
}

KeypointSelection select_keypoints(const DetectionOutput& detection, std::size_t batch_index,
                                   const CategoryRegistry& registry, std::optional<int> category) {
  const std::size_t nq = detection.queries();
  const std::size_t types = detection.type_logits.dim(2);
  const std::size_t ncat = detection.category_logits.dim(1);
  if (batch_index >= detection.batch()) throw std::out_of_range("select_keypoints: batch index out of range");

  KeypointSelection sel;
  if (category) {
    sel.category = *category;
  } else {
    const double* logits = detection.category_logits.data().data() + batch_index * ncat;
    std::size_t best = 0;
    for (std::size_t c = 1; c < ncat; ++c) {
      if (logits[c] > logits[best]) best = c;
    }
    sel.category = static_cast<int>(best);
  }
  const auto& schema = registry.at(sel.category);
  const std::size_t kz = schema.keypoint_count();
  if (nq < kz || types < kz) throw std::invalid_argument("select_keypoints: fewer queries or types than keypoints");

  // Row-wise softmax of the type logits.
  std::vector<double> probs(nq * types);
  const double* tl = detection.type_logits.data().data() + batch_index * nq * types;
  for (std::size_t qi = 0; qi < nq; ++qi) {
    double mx = tl[qi * types];
    for (std::size_t t = 1; t < types; ++t) mx = std::max(mx, tl[qi * types + t]);
    double total = 0.0;
    for (std::size_t t = 0; t < types; ++t) total += (probs[qi * types + t] = std::exp(tl[qi * types + t] - mx));
    for (std::size_t t = 0; t < types; ++t) probs[qi * types + t] /= total;
  }

  const std::size_t k = registry.total_keypoints();
  sel.keypoints = Keypoints2D::Zero(2, static_cast<Eigen::Index>(k));
  sel.confidence.assign(k, 0.0);
  const double* loc = detection.locations.data().data() + batch_index * nq * 2;
  for (std::size_t t = 0; t < kz; ++t) {
    std::size_t best = 0;
    for (std::size_t qi = 1; qi < nq; ++qi) {
      if (probs[qi * types + t] > probs[best * types + t]) best = qi;
    }
    const auto col = static_cast<Eigen::Index>(schema.block_offset + t);
    sel.keypoints(0, col) = loc[best * 2];
    sel.keypoints(1, col) = loc[best * 2 + 1];
    sel.confidence[schema.block_offset + t] = probs[best * types + t];
    sel.queries.push_back(best);
  }
  return sel;
}

}  // namespace kplift
