#include "kplift/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace kplift {

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  char c = 0;
  while (in.get(c)) {
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  if (tok.empty()) throw std::runtime_error(path.string() + ": truncated PGM header");
  return tok;
}

}  // namespace

void quantize_8bit(ImageRaster& image) {
  for (auto& p : image.pixels) p = static_cast<double>(to_byte(p)) / 255.0;
}

void write_pgm(const ImageRaster& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(),
                 [](double v) { return static_cast<char>(to_byte(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ImageRaster read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (header_token(in, path) != "P5") throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
  const auto width = std::stoul(header_token(in, path));
  const auto height = std::stoul(header_token(in, path));
  const auto maxval = std::stoul(header_token(in, path));
  if (maxval != 255) throw std::runtime_error(path.string() + ": unsupported maxval " + std::to_string(maxval));
  ImageRaster image(width, height);
  std::string bytes(width * height, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error(path.string() + ": pixel data truncated at byte " + std::to_string(in.gcount()));
  }
  std::transform(bytes.begin(), bytes.end(), image.pixels.begin(),
                 [](char c) { return static_cast<double>(static_cast<unsigned char>(c)) / 255.0; });
  return image;
}

}  // namespace kplift
