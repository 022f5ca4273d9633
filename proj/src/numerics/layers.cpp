// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/numerics/layers.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace slowrec::num {

namespace {

constexpr char kMagic[8] = {'S', 'L', 'W', 'R', 'T', 'E', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, double stddev)
    : weight(randn({in, out}, stddev < 0.0 ? 1.0 / std::sqrt(static_cast<double>(in)) : stddev, rng)),
      bias(Tensor::zeros({out}, true)) {}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

void save_tensors(const std::filesystem::path& path, const ParamList& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(fmt::format("checkpoint: cannot write {}", path.string()));
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  put(os, static_cast<std::uint64_t>(params.size()));
  for (const auto& p : params) {
    put(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.tensor.shape();
    put(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put(os, static_cast<std::uint64_t>(d));
    auto data = p.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  }
  if (!os) throw std::runtime_error(fmt::format("checkpoint: write failed for {}", path.string()));
}

void load_tensors(const std::filesystem::path& path, const ParamList& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(fmt::format("checkpoint: cannot read {}", path.string()));
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(fmt::format("checkpoint: {} is not a tensor file", path.string()));
  }
  if (auto v = get<std::uint32_t>(is); v != kVersion) {
    throw std::runtime_error(fmt::format("checkpoint: unsupported version {}", v));
  }
  if (auto n = get<std::uint64_t>(is); n != params.size()) {
    throw std::runtime_error(fmt::format("checkpoint: {} tensors in file, {} expected", n, params.size()));
  }
  for (const auto& p : params) {
    std::string name(get<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != p.name) throw std::runtime_error(fmt::format("checkpoint: found '{}', expected '{}'", name, p.name));
    Shape shape(get<std::uint32_t>(is));
    for (auto& d : shape) d = get<std::uint64_t>(is);
    if (shape != p.tensor.shape()) {
      throw std::runtime_error(fmt::format("checkpoint: '{}' has shape {}, expected {}", name,
                                           shape_string(shape), shape_string(p.tensor.shape())));
    }
    auto t = p.tensor;
    auto data = t.mutable_data();
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()))) {
      throw std::runtime_error("checkpoint: truncated file");
    }
  }
}

void copy_values(const ParamList& src, const ParamList& dst) {
  if (src.size() != dst.size()) throw std::invalid_argument("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw std::invalid_argument(fmt::format("copy_values: shape mismatch at '{}'", src[i].name));
    }
    auto s = src[i].tensor.data();
    auto t = dst[i].tensor;
    std::copy(s.begin(), s.end(), t.mutable_data().begin());
  }
}

}  // namespace slowrec::num
