#pragma once

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbeam/cnn/tensor.hpp"

namespace nbeam::cnn {

// Container layout (all integers little-endian):
//   8 bytes  magic "NBEAMCKP"
//   u32      format version
//   u64      manifest length in bytes
//   manifest JSON: {"meta": {...}, "arrays": [{"name", "shape", "dtype": "f64", "offset", "count"}]}
//   payload  raw little-endian float64 values, offsets counted in elements
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  void add(std::string name, Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) throw std::invalid_argument("Checkpoint: size mismatch for " + name);
    arrays.push_back({std::move(name), std::move(shape), std::move(values)});
  }

  const NamedArray& get(const std::string& name) const {
    for (const auto& a : arrays) {
      if (a.name == name) return a;
    }
    throw std::runtime_error("checkpoint: missing array '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (const auto& a : arrays) {
      if (a.name == name) return true;
    }
    return false;
  }

  // Copies a stored array into `dst`, rejecting any shape disagreement.
  void restore(const std::string& name, const Shape& expected, std::span<double> dst) const {
    const auto& a = get(name);
    if (a.shape != expected) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': stored " + shape_str(a.shape) +
                               ", expected " + shape_str(expected));
    }
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_bytes(std::ofstream& os, const void* p, std::size_t n) { os.write(static_cast<const char*>(p), std::streamsize(n)); }

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["meta"] = ckpt.meta;
  manifest["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    manifest["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"dtype", "f64"}, {"offset", offset}, {"count", a.values.size()}});
    offset += a.values.size();
  }
  const std::string text = manifest.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    os.write("NBEAMCKP", 8);
    const std::uint32_t version = Checkpoint::kVersion;
    const std::uint64_t len = text.size();
    detail::put_bytes(os, &version, sizeof version);
    detail::put_bytes(os, &len, sizeof len);
    os.write(text.data(), std::streamsize(text.size()));
    for (const auto& a : ckpt.arrays) detail::put_bytes(os, a.values.data(), a.values.size() * sizeof(double));
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("checkpoint: cannot finalize " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || std::memcmp(magic, "NBEAMCKP", 8) != 0) throw std::runtime_error("checkpoint: not a checkpoint file: " + path);
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  std::string text(len, '\0');
  is.read(text.data(), std::streamsize(len));
  if (!is) throw std::runtime_error("checkpoint: truncated manifest");
  const auto manifest = nlohmann::json::parse(text);
  Checkpoint ckpt;
  ckpt.meta = manifest.at("meta");
  std::vector<double> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0) throw std::runtime_error("checkpoint: payload size not a multiple of 8");
    payload.resize(rest.size() / sizeof(double));
    std::memcpy(payload.data(), rest.data(), rest.size());
  }
  for (const auto& a : manifest.at("arrays")) {
    if (a.at("dtype") != "f64") throw std::runtime_error("checkpoint: unsupported dtype");
    const auto off = a.at("offset").get<std::uint64_t>();
    const auto count = a.at("count").get<std::uint64_t>();
    if (off + count > payload.size()) throw std::runtime_error("checkpoint: truncated payload");
    NamedArray arr{a.at("name").get<std::string>(), a.at("shape").get<Shape>(),
                   std::vector<double>(payload.begin() + std::ptrdiff_t(off), payload.begin() + std::ptrdiff_t(off + count))};
    if (numel(arr.shape) != arr.values.size()) throw std::runtime_error("checkpoint: inconsistent shape for " + arr.name);
    ckpt.arrays.push_back(std::move(arr));
  }
  return ckpt;
}

}  // namespace nbeam::cnn
