#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "gradinit/nn/model.hpp"

namespace gi::harness {

/// File-system failure while writing or reading an artifact.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'G', 'I', 'C', 'K', 'P', 'T', '0', '1'};

/// Layout (all integers little-endian):
///   [0, 8)        magic "GICKPT01"
///   [8, 16)       u64 header length H
///   [16, 16 + H)  UTF-8 JSON header
///   [16 + H, ...) payload: tensors back to back, IEEE-754 little-endian
/// Header entries give each tensor's offset and byte count relative to the
/// payload start. `extra` is stored under "meta".
void save_checkpoint(const std::filesystem::path& path, const nn::Model& model, const nlohmann::json& extra = {});

/// Header of a checkpoint file.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

/// Restores parameters and running statistics into a model of the same
/// architecture. Throws IoError on a malformed file and
/// std::invalid_argument when block names or shapes differ.
void load_checkpoint(const std::filesystem::path& path, nn::Model& model);

}  // namespace gi::harness
