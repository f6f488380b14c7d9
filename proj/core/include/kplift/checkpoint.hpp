#pragma once

// Checkpoint file layout:
//
//   kplift-checkpoint 1
//   metadata <n>
//   <n bytes of JSON: config echo, epoch, metric snapshot, model description>
//   tensors <t>
//   <name> f32le <d0>x<d1>x... <byte offset>      (t lines)
//   payload <p>
//   <p bytes: little-endian binary32 values, tensors back to back>
//
// Offsets are relative to the start of the payload.

#include "kplift/nn.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace kplift {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::vector<double> values;  // widened from binary32
};

struct CheckpointData {
  std::string metadata;  // JSON text
  std::vector<StoredTensor> tensors;
  const StoredTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const ParamList& params, const std::string& metadata);
// Validates the whole file before returning anything.
CheckpointData load_checkpoint(const std::filesystem::path& path);

// Copies stored values into the parameters. Every parameter must appear once
// with a matching shape, and nothing else may be stored.
void assign_parameters(const CheckpointData& data, const ParamList& params);

// Rounds every parameter to the nearest binary32 value, which is what a
// save/load cycle does.
void round_to_binary32(const ParamList& params);

}  // namespace kplift
