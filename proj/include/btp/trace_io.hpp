#pragma once

// Trace directories: manifest.json plus one raw little-endian f32 file per
// tensor, row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "btp/types.hpp"

namespace btp {

inline constexpr const char *kTraceVersion = "1";
inline constexpr const char *kDtypeF32LE = "f32le";
inline constexpr const char *kManifestFile = "manifest.json";

inline std::string hidden_name(std::size_t layer) {
  return "hidden_l" + std::to_string(layer);
}

inline std::string attention_name(std::size_t layer) {
  return "attn_l" + std::to_string(layer);
}

struct TensorEntry {
  std::string name;
  Shape shape;
  std::string dtype = kDtypeF32LE;
  std::string file;
  std::uint64_t offset = 0;

  std::uint64_t byte_length() const { return 4 * shape_volume(shape); }

  friend bool operator==(const TensorEntry &, const TensorEntry &) = default;
};

struct TraceManifest {
  std::string version = kTraceVersion;
  ModelDims model_dims;
  TokenLayout layout;
  std::vector<TensorEntry> tensors;

  friend bool operator==(const TraceManifest &, const TraceManifest &) = default;
};

struct Trace {
  TraceManifest manifest;
  std::map<std::string, TensorBlob> tensors;

  const TensorBlob &tensor(const std::string &name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      fail_format("trace: no tensor named '", name, "'");
    return it->second;
  }

  bool has(const std::string &name) const { return tensors.count(name) != 0; }
};

namespace detail {

inline bool valid_tensor_name(const std::string &name) {
  if (name.empty() || name == "." || name == "..")
    return false;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
    if (!ok)
      return false;
  }
  return true;
}

inline std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0x000000FFu) << 24) | ((v & 0x0000FF00u) << 8) |
         ((v & 0x00FF0000u) >> 8) | ((v & 0xFF000000u) >> 24);
}

inline std::vector<char> encode_f32le(std::span<const float> values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big)
      bits = byteswap32(bits);
    std::memcpy(bytes.data() + 4 * i, &bits, 4);
  }
  return bytes;
}

inline std::vector<float> decode_f32le(const std::vector<char> &bytes) {
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big)
      bits = byteswap32(bits);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

} // namespace detail

inline nlohmann::json layout_to_json(const TokenLayout &layout) {
  return {{"n_system", layout.n_system()}, {"n_image", layout.n_image()},
          {"n_text", layout.n_text()},     {"grid_rows", layout.grid_rows()},
          {"grid_cols", layout.grid_cols()}};
}

inline TokenLayout layout_from_json(const nlohmann::json &j) {
  return TokenLayout(j.at("n_system").get<std::size_t>(),
                     j.at("n_image").get<std::size_t>(),
                     j.at("n_text").get<std::size_t>(),
                     j.at("grid_rows").get<std::size_t>(),
                     j.at("grid_cols").get<std::size_t>());
}

inline nlohmann::json dims_to_json(const ModelDims &dims) {
  return {{"layers", dims.num_layers},
          {"d", dims.hidden},
          {"heads", dims.heads},
          {"m", dims.mlp}};
}

inline ModelDims dims_from_json(const nlohmann::json &j) {
  ModelDims dims;
  dims.num_layers = j.at("layers").get<std::size_t>();
  dims.hidden = j.at("d").get<std::size_t>();
  dims.heads = j.at("heads").get<std::size_t>();
  dims.mlp = j.at("m").get<std::size_t>();
  dims.validate();
  return dims;
}

inline nlohmann::json manifest_to_json(const TraceManifest &manifest) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto &t : manifest.tensors) {
    nlohmann::json entry = {
        {"name", t.name}, {"shape", t.shape}, {"dtype", t.dtype}, {"file", t.file}};
    if (t.offset != 0)
      entry["offset"] = t.offset;
    tensors.push_back(std::move(entry));
  }
  return {{"version", manifest.version},
          {"model_dims", dims_to_json(manifest.model_dims)},
          {"layout", layout_to_json(manifest.layout)},
          {"tensors", std::move(tensors)}};
}

inline TraceManifest manifest_from_json(const nlohmann::json &j) {
  TraceManifest manifest;
  try {
    manifest.version = j.at("version").get<std::string>();
    manifest.model_dims = dims_from_json(j.at("model_dims"));
    manifest.layout = layout_from_json(j.at("layout"));
    for (const auto &e : j.at("tensors")) {
      TensorEntry entry;
      entry.name = e.at("name").get<std::string>();
      try {
        entry.shape = e.at("shape").get<Shape>();
        entry.dtype = e.at("dtype").get<std::string>();
        entry.file = e.at("file").get<std::string>();
        entry.offset = e.value("offset", std::uint64_t{0});
      } catch (const nlohmann::json::exception &ex) {
        fail_format("manifest: tensor '", entry.name, "': ", ex.what());
      }
      manifest.tensors.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception &ex) {
    fail_format("manifest: ", ex.what());
  } catch (const ValidationError &ex) {
    fail_format("manifest: ", ex.what());
  }
  if (manifest.version != kTraceVersion)
    fail_format("manifest: unsupported version '", manifest.version, "'");
  for (const auto &t : manifest.tensors) {
    if (!detail::valid_tensor_name(t.name))
      fail_format("manifest: invalid tensor name '", t.name, "'");
    if (t.dtype != kDtypeF32LE)
      fail_format("manifest: tensor '", t.name, "': unknown dtype '", t.dtype,
                  "'");
    if (t.shape.empty() ||
        std::find(t.shape.begin(), t.shape.end(), 0u) != t.shape.end())
      fail_format("manifest: tensor '", t.name, "': invalid shape ",
                  shape_string(t.shape));
    const std::filesystem::path file(t.file);
    if (t.file.empty() || file.has_parent_path() || t.file == "." ||
        t.file == "..")
      fail_format("manifest: tensor '", t.name, "': file '", t.file,
                  "' must be a plain filename");
  }
  return manifest;
}

/// Manifest describing `tensors` with one `<name>.bin` per tensor.
inline TraceManifest make_manifest(const ModelDims &dims,
                                   const TokenLayout &layout,
                                   const std::map<std::string, TensorBlob> &tensors) {
  TraceManifest manifest;
  manifest.model_dims = dims;
  manifest.layout = layout;
  for (const auto &[name, blob] : tensors)
    manifest.tensors.push_back({name, blob.shape(), kDtypeF32LE, name + ".bin", 0});
  return manifest;
}

inline Trace read_trace(const std::filesystem::path &dir) {
  namespace fs = std::filesystem;
  const auto manifest_path = dir / kManifestFile;
  std::ifstream in(manifest_path);
  if (!in)
    fail_format("trace: cannot open ", manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &ex) {
    fail_format("trace: malformed JSON in ", manifest_path.string(), ": ",
                ex.what());
  }

  Trace trace;
  trace.manifest = manifest_from_json(j);
  for (const auto &entry : trace.manifest.tensors) {
    if (trace.tensors.count(entry.name))
      fail_format("trace: tensor '", entry.name, "' declared twice");
    const auto file = dir / entry.file;
    std::error_code ec;
    const auto size = fs::file_size(file, ec);
    if (ec)
      fail_format("trace: tensor '", entry.name, "': missing file ",
                  file.string());
    const auto need = entry.offset + entry.byte_length();
    if (size != need)
      fail_format("trace: tensor '", entry.name, "': shape ",
                  shape_string(entry.shape), " requires ", entry.byte_length(),
                  " bytes at offset ", entry.offset, " but file has ", size);
    std::ifstream bin(file, std::ios::binary);
    if (!bin)
      fail_format("trace: tensor '", entry.name, "': cannot open ", file.string());
    bin.seekg(static_cast<std::streamoff>(entry.offset));
    std::vector<char> bytes(entry.byte_length());
    if (!bin.read(bytes.data(), static_cast<std::streamsize>(bytes.size())))
      fail_format("trace: tensor '", entry.name, "': short read from ",
                  file.string());
    trace.tensors.emplace(entry.name, TensorBlob(entry.name, entry.shape,
                                                 detail::decode_f32le(bytes)));
  }
  return trace;
}

/// Writes into a sibling temporary directory, then swaps it into place.
inline void write_trace(const std::filesystem::path &dir,
                        const TraceManifest &manifest,
                        const std::map<std::string, TensorBlob> &tensors) {
  namespace fs = std::filesystem;
  if (manifest.tensors.size() != tensors.size())
    fail_validation("write_trace: manifest lists ", manifest.tensors.size(),
                    " tensors but ", tensors.size(), " were supplied");
  for (const auto &entry : manifest.tensors) {
    auto it = tensors.find(entry.name);
    if (it == tensors.end())
      fail_validation("write_trace: tensor '", entry.name,
                      "' in manifest but not supplied");
    if (it->second.shape() != entry.shape)
      fail_validation("write_trace: tensor '", entry.name, "': manifest shape ",
                      shape_string(entry.shape), " != tensor shape ",
                      shape_string(it->second.shape()));
    if (entry.dtype != kDtypeF32LE)
      fail_validation("write_trace: tensor '", entry.name, "': unknown dtype '",
                      entry.dtype, "'");
    if (entry.offset != 0)
      fail_validation("write_trace: tensor '", entry.name,
                      "': non-zero offsets are read-only");
    if (!detail::valid_tensor_name(entry.name) ||
        fs::path(entry.file).has_parent_path() || entry.file.empty())
      fail_validation("write_trace: tensor '", entry.name,
                      "': invalid name or file");
  }
  // Round-trip through the parser so what we write is what we accept.
  manifest_from_json(manifest_to_json(manifest));

  const fs::path target = fs::absolute(dir).lexically_normal();
  const fs::path parent = target.parent_path();
  std::random_device rd;
  const auto tag = std::to_string(rd());
  const fs::path staging = parent / (target.filename().string() + ".tmp-" + tag);
  const fs::path retired = parent / (target.filename().string() + ".old-" + tag);

  std::error_code ec;
  fs::create_directories(staging, ec);
  if (ec)
    fail_format("write_trace: cannot create ", staging.string(), ": ",
                ec.message());
  try {
    {
      std::ofstream out(staging / kManifestFile);
      if (!out)
        fail_format("write_trace: cannot write manifest in ", staging.string());
      out << manifest_to_json(manifest).dump(2) << "\n";
      if (!out)
        fail_format("write_trace: failed writing manifest");
    }
    for (const auto &entry : manifest.tensors) {
      const auto bytes = detail::encode_f32le(tensors.at(entry.name).data());
      std::ofstream out(staging / entry.file, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out)
        fail_format("write_trace: failed writing tensor '", entry.name, "'");
    }
    if (fs::exists(target)) {
      fs::rename(target, retired);
      fs::rename(staging, target);
      fs::remove_all(retired);
    } else {
      fs::rename(staging, target);
    }
  } catch (const fs::filesystem_error &ex) {
    fs::remove_all(staging, ec);
    fail_format("write_trace: ", ex.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
}

inline void write_trace(const std::filesystem::path &dir, const ModelDims &dims,
                        const TokenLayout &layout,
                        const std::map<std::string, TensorBlob> &tensors) {
  write_trace(dir, make_manifest(dims, layout, tensors), tensors);
}

} // namespace btp
