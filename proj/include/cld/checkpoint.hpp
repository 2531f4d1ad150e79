#pragma once

// Checkpoint file layout:
//   u64 little-endian header length N
//   N bytes of UTF-8 JSON header
//   raw little-endian scalars for every tensor, in header order
//
// Header: {"format_version", "dtype": "f32"|"f64",
//          "tensors": [{"name", "shape", "offset", "nbytes"}], "meta": {...}}
// Offsets are relative to the first payload byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cld/tensor.hpp"

namespace cld {

inline constexpr int kCheckpointFormatVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;  // widened on load; narrowed by the caller
};

struct CheckpointData {
  nlohmann::json header;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor& find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw ValidationError("checkpoint has no tensor named '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }
};

namespace detail {

template <typename U>
void append_le(std::string& out, U value) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  Bits bits;
  std::memcpy(&bits, &value, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U read_le(const unsigned char* p) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(p[i]) << (8 * i);
  U value;
  std::memcpy(&value, &bits, sizeof(U));
  return value;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& tensors,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["dtype"] = dtype_name<T>();
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, tensor] : tensors) {
    const std::size_t offset = payload.size();
    for (T v : tensor.values()) detail::append_le<T>(payload, v);
    header["tensors"].push_back({{"name", name},
                                 {"shape", tensor.shape()},
                                 {"offset", offset},
                                 {"nbytes", payload.size() - offset}});
  }
  const std::string text = header.dump();
  std::string prefix;
  detail::append_le<std::uint64_t>(prefix, static_cast<std::uint64_t>(text.size()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(prefix.data(), static_cast<std::streamsize>(prefix.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw ValidationError("checkpoint truncated: " + path);
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto header_len = detail::read_le<std::uint64_t>(raw);
  if (header_len > bytes.size() - 8) throw ValidationError("checkpoint header overruns file: " + path);
  CheckpointData data;
  try {
    data.header = nlohmann::json::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (data.header.value("format_version", 0) != kCheckpointFormatVersion) {
    throw ValidationError("unsupported checkpoint format version in " + path);
  }
  const std::string dtype = data.header.value("dtype", "");
  const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
  if (width == 0) throw ValidationError("unknown checkpoint dtype '" + dtype + "'");
  const std::size_t base = 8 + header_len;
  for (const auto& entry : data.header.at("tensors")) {
    CheckpointTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto nbytes = entry.at("nbytes").get<std::size_t>();
    if (nbytes != shape_numel(t.shape) * width || base + offset + nbytes > bytes.size()) {
      throw ValidationError("checkpoint tensor '" + t.name + "' has inconsistent extent");
    }
    t.values.resize(shape_numel(t.shape));
    const unsigned char* p = raw + base + offset;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      t.values[i] = width == 4 ? detail::read_le<float>(p + 4 * i)
                               : detail::read_le<double>(p + 8 * i);
    }
    data.tensors.push_back(std::move(t));
  }
  return data;
}

}  // namespace cld
