#include "kplift/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace kplift {

namespace {

constexpr const char* kMagic = "kplift-checkpoint";
constexpr int kVersion = 1;

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

void put_f32(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

double get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

std::string shape_token(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s.empty() ? "scalar" : s;
}

Shape parse_shape(const std::string& token, const std::string& context) {
  Shape shape;
  if (token == "scalar") return shape;
  std::stringstream ss(token);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw CheckpointError(context + ": bad shape '" + token + "'");
    }
    shape.push_back(std::stoull(part));
  }
  return shape;
}

// Reads one '\n'-terminated header line.
std::string header_line(std::istream& in, const std::string& file, const char* what) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(file + ": truncated header, expected " + what);
  return line;
}

}  // namespace

const StoredTensor* CheckpointData::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const ParamList& params, const std::string& metadata) {
  std::set<std::string> names;
  std::ostringstream header;
  header << kMagic << ' ' << kVersion << '\n';
  header << "metadata " << metadata.size() << '\n' << metadata << '\n';
  header << "tensors " << params.size() << '\n';
  std::string payload;
  for (const auto& p : params) {
    if (!names.insert(p.name).second) throw CheckpointError("duplicate tensor name " + p.name);
    if (p.name.empty() || p.name.find_first_of(" \n") != std::string::npos) {
      throw CheckpointError("tensor name '" + p.name + "' is not a single token");
    }
    header << p.name << " f32le " << shape_token(p.tensor.shape()) << ' ' << payload.size() << '\n';
    for (double v : p.tensor.data()) put_f32(payload, v);
  }
  header << "payload " << payload.size() << '\n';

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + file);

  std::istringstream first(header_line(in, file, "magic"));
  std::string magic;
  int version = 0;
  first >> magic >> version;
  if (magic != kMagic) throw CheckpointError(file + ": not a kplift checkpoint");
  if (version != kVersion) throw CheckpointError(file + ": unsupported checkpoint version " + std::to_string(version));

  CheckpointData data;
  std::size_t meta_size = 0;
  {
    std::istringstream ls(header_line(in, file, "metadata size"));
    std::string key;
    if (!(ls >> key >> meta_size) || key != "metadata") throw CheckpointError(file + ": malformed metadata line");
  }
  data.metadata.resize(meta_size);
  in.read(data.metadata.data(), static_cast<std::streamsize>(meta_size));
  if (static_cast<std::size_t>(in.gcount()) != meta_size || in.get() != '\n') {
    throw CheckpointError(file + ": truncated metadata");
  }

  std::size_t count = 0;
  {
    std::istringstream ls(header_line(in, file, "tensor count"));
    std::string key;
    if (!(ls >> key >> count) || key != "tensors") throw CheckpointError(file + ": malformed tensor count line");
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(header_line(in, file, "tensor entry"));
    StoredTensor t;
    std::string dtype;
    std::string shape;
    if (!(ls >> t.name >> dtype >> shape >> t.offset)) {
      throw CheckpointError(file + ": malformed manifest entry " + std::to_string(i));
    }
    if (dtype != "f32le") throw CheckpointError(file + ": tensor " + t.name + " has unsupported dtype " + dtype);
    t.shape = parse_shape(shape, file + ": tensor " + t.name);
    if (t.offset != expected_offset) {
      throw CheckpointError(file + ": tensor " + t.name + " declares byte offset " + std::to_string(t.offset) +
                            " but the payload layout puts it at " + std::to_string(expected_offset));
    }
    if (data.find(t.name)) throw CheckpointError(file + ": tensor " + t.name + " appears twice");
    expected_offset += 4 * numel_of(t.shape);
    data.tensors.push_back(std::move(t));
  }
  std::size_t payload_size = 0;
  {
    std::istringstream ls(header_line(in, file, "payload size"));
    std::string key;
    if (!(ls >> key >> payload_size) || key != "payload") throw CheckpointError(file + ": malformed payload line");
  }
  if (payload_size != expected_offset) {
    throw CheckpointError(file + ": payload declared as " + std::to_string(payload_size) + " bytes, manifest needs " +
                          std::to_string(expected_offset));
  }

  std::string payload(payload_size, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload_size));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got < payload_size) {
    for (const auto& t : data.tensors) {
      if (t.offset + 4 * numel_of(t.shape) > got) {
        throw CheckpointError(file + ": payload truncated at byte " + std::to_string(got) + "; tensor " + t.name +
                              " (offset " + std::to_string(t.offset) + ") is missing");
      }
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(file + ": trailing bytes after payload");

  for (auto& t : data.tensors) {
    t.values.resize(numel_of(t.shape));
    for (std::size_t j = 0; j < t.values.size(); ++j) t.values[j] = get_f32(payload.data() + t.offset + 4 * j);
  }
  return data;
}

void assign_parameters(const CheckpointData& data, const ParamList& params) {
  std::set<std::string> wanted;
  for (const auto& p : params) {
    wanted.insert(p.name);
    const StoredTensor* t = data.find(p.name);
    if (!t) throw CheckpointError("checkpoint lacks tensor " + p.name);
    if (t->shape != p.tensor.shape()) {
      throw CheckpointError("tensor " + p.name + " has shape " + shape_str(t->shape) + ", model expects " +
                            shape_str(p.tensor.shape()));
    }
  }
  for (const auto& t : data.tensors) {
    if (!wanted.count(t.name)) throw CheckpointError("checkpoint has unexpected tensor " + t.name);
  }
  for (const auto& p : params) {
    Tensor leaf = p.tensor;
    const auto& src = data.find(p.name)->values;
    std::copy(src.begin(), src.end(), leaf.mutable_data().begin());
  }
}

void round_to_binary32(const ParamList& params) {
  for (const auto& p : params) {
    Tensor leaf = p.tensor;
    for (double& v : leaf.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace kplift
