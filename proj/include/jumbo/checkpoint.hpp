#pragma once

// Checkpoint container:
//   8 bytes  magic "JUMBOCKP"
//   8 bytes  header length, little-endian u64
//   header   JSON {format_version, config, parameters: [{name, shape, dtype, offset}]}
//   blobs    little-endian IEEE-754 float32 values in manifest order;
//            offsets are bytes from the start of the blob section.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "jumbo/model.hpp"

namespace jumbo {

inline constexpr char kCheckpointMagic[8] = {'J', 'U', 'M', 'B', 'O', 'C', 'K', 'P'};
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

template <class T>
std::string serialize_checkpoint(const Model<T>& m, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = m.config();
  header["parameters"] = nlohmann::json::array();
  std::string blobs;
  for (const auto& [name, t] : m.parameters()) {
    header["parameters"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", blobs.size()}});
    for (T v : t.values()) detail::put_u32le(blobs, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!extra.empty()) header["extra"] = extra;
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  const auto len = static_cast<std::uint64_t>(text.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  out += text;
  out += blobs;
  return out;
}

template <class T>
Model<T> deserialize_checkpoint(const std::string& bytes, nlohmann::json* extra = nullptr) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw DataError("checkpoint: bad magic");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t len = detail::get_u64le(raw + 8);
  if (len > bytes.size() - 16) throw DataError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (header.value("format_version", 0) != kCheckpointVersion) throw DataError("checkpoint: unsupported format_version");
  ModelConfig config;
  try {
    config = header.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad config: ") + e.what());
  }
  auto m = Model<T>::zeros(config);
  const std::size_t blob_start = 16 + len;
  const auto& manifest = header.at("parameters");
  if (manifest.size() != m.parameters().size()) throw DataError("checkpoint: parameter count does not match config");
  for (const auto& entry : manifest) {
    const auto name = entry.at("name").get<std::string>();
    if (!m.has_param(name)) throw DataError("checkpoint: unexpected parameter '" + name + "'");
    auto t = m.param(name);
    if (entry.at("shape").get<Shape>() != t.shape()) throw DataError("checkpoint: shape mismatch for '" + name + "'");
    if (entry.at("dtype").get<std::string>() != "f32") throw DataError("checkpoint: unsupported dtype for '" + name + "'");
    const std::size_t off = blob_start + entry.at("offset").get<std::size_t>();
    if (off + 4 * t.numel() > bytes.size()) throw DataError("checkpoint: truncated blob for '" + name + "'");
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 3; b >= 0; --b) u = (u << 8) | raw[off + 4 * i + static_cast<std::size_t>(b)];
      v[i] = static_cast<T>(std::bit_cast<float>(u));
    }
  }
  if (extra) *extra = header.value("extra", nlohmann::json::object());
  return m;
}

template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path, const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open " + path);
  const auto bytes = serialize_checkpoint(m, extra);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

template <class T = float>
Model<T> load_checkpoint(const std::string& path, nlohmann::json* extra = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes, extra);
}

}  // namespace jumbo
