#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/nn/parameters.hpp"
#include "normtune/util/error.hpp"

namespace normtune::nn {

inline constexpr int kCheckpointVersion = 1;

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }
inline Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw FormatError("unknown tensor dtype '" + s + "'");
}

struct CheckpointMetadata {
  std::string kind;  // "lm" or "classifier"
  nlohmann::json hyperparams = nlohmann::json::object();
  std::string vocab_sha256;
  // Storage type per tensor, in parameter order; empty means all f64.
  std::vector<Dtype> dtypes;
};

struct LoadedCheckpoint {
  ParameterSet params;
  CheckpointMetadata metadata;
  std::vector<std::string> warnings;
};

namespace detail {

template <class T>
void append_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  auto bits = std::bit_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

template <class T>
T read_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<T>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

// Writes <dir>/manifest.json and <dir>/weights.bin (raw little-endian
// values, concatenated in parameter order).
inline void save_checkpoint(const ParameterSet& params, const CheckpointMetadata& meta,
                            const std::filesystem::path& dir) {
  if (!meta.dtypes.empty() && meta.dtypes.size() != params.size()) {
    throw InvalidArgument("checkpoint dtype list does not match parameter count");
  }
  std::filesystem::create_directories(dir);
  std::string blob;
  auto tensors = nlohmann::json::array();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    const Dtype dt = meta.dtypes.empty() ? Dtype::f64 : meta.dtypes[k];
    const std::size_t offset = blob.size();
    for (double v : p.value.values()) {
      if (dt == Dtype::f64) {
        detail::append_le(blob, v);
      } else {
        detail::append_le(blob, static_cast<float>(v));
      }
    }
    tensors.push_back({{"name", p.name},
                       {"dtype", dtype_name(dt)},
                       {"shape", p.value.shape()},
                       {"offset", offset},
                       {"length", blob.size() - offset}});
  }
  const nlohmann::json manifest{{"version", kCheckpointVersion},
                                {"kind", meta.kind},
                                {"hyperparams", meta.hyperparams},
                                {"vocab_sha256", meta.vocab_sha256},
                                {"tensors", tensors}};
  detail::write_file(dir / "weights.bin", blob);
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

// A vocabulary hash differing from `expected_vocab_sha256` is reported as a
// warning rather than an error; the caller decides.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                        const std::optional<std::string>& expected_vocab_sha256 = std::nullopt) {
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw IoError("checkpoint not found: " + (dir / "manifest.json").string());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest " + dir.string() + ": " + e.what());
  }
  LoadedCheckpoint out;
  try {
    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + dir.string());
    }
    out.metadata.kind = manifest.at("kind").get<std::string>();
    out.metadata.hyperparams = manifest.at("hyperparams");
    out.metadata.vocab_sha256 = manifest.at("vocab_sha256").get<std::string>();
    const std::string blob = detail::read_file(dir / "weights.bin");
    std::size_t expected_size = 0;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const Dtype dt = parse_dtype(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      const std::size_t count = element_count(shape);
      if (length != count * dtype_size(dt)) {
        throw FormatError("tensor '" + name + "' length does not match its shape");
      }
      if (offset != expected_size || offset + length > blob.size()) {
        throw FormatError("weights.bin is truncated or inconsistent at tensor '" + name + "'");
      }
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        const char* p = blob.data() + offset + i * dtype_size(dt);
        values[i] = dt == Dtype::f64 ? detail::read_le<double>(p) : detail::read_le<float>(p);
      }
      out.params.add(name, Tensor(shape, std::move(values)));
      out.metadata.dtypes.push_back(dt);
      expected_size = offset + length;
    }
    if (expected_size != blob.size()) {
      throw FormatError("weights.bin size " + std::to_string(blob.size()) + " does not match manifest (" +
                        std::to_string(expected_size) + " bytes)");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest " + dir.string() + ": " + e.what());
  }
  if (expected_vocab_sha256 && *expected_vocab_sha256 != out.metadata.vocab_sha256) {
    out.warnings.push_back("vocabulary hash mismatch: checkpoint " + out.metadata.vocab_sha256 + ", expected " +
                           *expected_vocab_sha256);
  }
  return out;
}

}  // namespace normtune::nn
