#pragma once

// Versioned checkpoint file ("MSGCL-CK"): configuration hash, JSON metadata,
// and a table of named tensors stored as 64-bit (canonical) or 32-bit floats.

#include "msgcl/config.hpp"
#include "msgcl/trainer.hpp"

#include <filesystem>
#include <string>

namespace msgcl {

struct CheckpointHeader {
  std::uint64_t config_hash{0};
  int scalar_bytes{8};
  ModelConfig model;
  TrainConfig train;
  nlohmann::json meta;
};

template <typename Scalar>
std::string serialize_checkpoint(const ModelConfig& mc, const TrainConfig& tc, const TrainState<Scalar>& state);

/// Reads any precision into `Scalar`; throws on bad magic, version, or hash.
template <typename Scalar>
TrainState<Scalar> deserialize_checkpoint(const std::string& bytes, CheckpointHeader* header = nullptr);

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& mc, const TrainConfig& tc,
                     const TrainState<Scalar>& state);

template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

}  // namespace msgcl
