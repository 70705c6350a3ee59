#pragma once

// On-disk format: one little-endian float64 blob (tensors.bin) plus a JSON
// manifest listing every tensor's name, shape and element offset, the blob's
// crc32 and a format version.

#include <filesystem>
#include <stdexcept>
#include <utility>

#include <nlohmann/json.hpp>

#include "ttg/metatrain.hpp"
#include "ttg/tensor.hpp"

namespace ttg {

inline constexpr int kFormatVersion = 1;

struct ChecksumError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// `meta` is stored verbatim under the manifest's "meta" key.
void write_tensors(const std::filesystem::path& dir, const TensorMap& tensors, const nlohmann::json& meta);
std::pair<TensorMap, nlohmann::json> read_tensors(const std::filesystem::path& dir);

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Resumable mid-run trainer state.
void save_trainer_state(const std::filesystem::path& dir, const Trainer& trainer);
void load_trainer_state(const std::filesystem::path& dir, Trainer& trainer);

}  // namespace ttg
