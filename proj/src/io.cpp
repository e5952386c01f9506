// SPDX-License-Identifier: Apache-2.0

#include "dtcil/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dtcil::io {

namespace {
constexpr char kMagic[8] = {'D', 'T', 'C', 'I', 'L', 'T', 'F', '1'};
}

void write_tensors(const std::filesystem::path& path, const nlohmann::json& meta,
                   const std::vector<const Tensor*>& arrays) {
  nlohmann::json head = meta;
  head["shapes"] = nlohmann::json::array();
  for (const Tensor* t : arrays) head["shapes"].push_back(t->shape());
  const std::string text = head.dump();
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(len));
  for (const Tensor* t : arrays)
    os.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
  require(os.good(), "write failed for " + path.string());
}

TensorFile read_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "cannot read " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  require(is.good() && std::memcmp(magic, kMagic, sizeof kMagic) == 0, path.string() + " is not a parameter file");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  require(is.good() && len < (1ULL << 30), "corrupt header in " + path.string());
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  TensorFile f;
  f.meta = nlohmann::json::parse(text);
  for (const auto& s : f.meta.at("shapes")) {
    Tensor t(s.get<Shape>());
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    require(is.good() || (is.eof() && t.empty()), "truncated parameter data in " + path.string());
    f.arrays.push_back(std::move(t));
  }
  return f;
}

void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  require(rgb.rank() == 3 && rgb.dim(0) == 3, "ppm expects a [3,H,W] tensor");
  const int h = rgb.dim(1), w = rgb.dim(2);
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot write " + path.string());
  os << "P6\n" << w << ' ' << h << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(rgb[c * plane + i], 0.0f, 1.0f);
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), "cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os << text;
}

}  // namespace dtcil::io
