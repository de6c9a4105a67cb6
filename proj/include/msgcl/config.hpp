#pragma once

// Training configuration and JSON (de)serialization of all configs.

#include "msgcl/evaluation.hpp"
#include "msgcl/losses.hpp"
#include "msgcl/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace msgcl {

enum class TrainMode { kMetaTwoStep, kJoint };
enum class Stage2Granularity { kBatch, kEpoch };

struct TrainConfig {
  double lr{0.001};
  int batch_size{256};
  int max_epochs{200};
  int patience{100};
  TrainMode mode{TrainMode::kMetaTwoStep};
  std::uint64_t seed{42};
  int precision{64};
  Stage2Granularity stage2{Stage2Granularity::kBatch};
  bool log_steps{true};

  void validate() const {
    require(lr >= 0.0, "train config: lr must be non-negative");
    require(batch_size >= 2, "train config: batch_size must be at least 2");
    require(max_epochs >= 1, "train config: max_epochs must be positive");
    require(patience >= 1, "train config: patience must be at least 1");
    require(precision == 32 || precision == 64, "train config: precision must be 32 or 64");
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(Similarity, {{Similarity::kDot, "dot"}, {Similarity::kCosine, "cosine"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NormPlacement, {{NormPlacement::kPre, "pre"}, {NormPlacement::kPost, "post"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Pooling, {{Pooling::kAnchor, "anchor"}, {Pooling::kMean, "mean"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ScoreFrom, {{ScoreFrom::kDecoder, "decoder"}, {ScoreFrom::kLatent, "latent"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TrainMode, {{TrainMode::kMetaTwoStep, "meta"}, {TrainMode::kJoint, "joint"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Stage2Granularity, {{Stage2Granularity::kBatch, "batch"}, {Stage2Granularity::kEpoch, "epoch"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, num_items, max_len, hidden, num_heads, num_layers, dropout,
                                                alpha, beta, tau, similarity, norm, pooling, score_from, twin, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr, batch_size, max_epochs, patience, mode, seed, precision,
                                                stage2, log_steps)

inline nlohmann::json loss_to_json(const LossBreakdown& b) {
  return {{"l_rs1", b.l_rs1}, {"l_rs2", b.l_rs2}, {"l_kl1", b.l_kl1}, {"l_kl2", b.l_kl2},
          {"l_cl", b.l_cl},   {"total", b.total}, {"alpha", b.alpha}, {"beta", b.beta},
          {"tau", b.tau}};
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json hr = nlohmann::json::object(), ndcg = nlohmann::json::object();
  for (const auto& [k, v] : r.hr) hr[std::to_string(k)] = v;
  for (const auto& [k, v] : r.ndcg) ndcg[std::to_string(k)] = v;
  return {{"hr", hr}, {"ndcg", ndcg}, {"num_users", r.num_users}, {"config_hash", r.config_hash}};
}

/// FNV-1a over the canonical JSON of the model config.
inline std::uint64_t config_hash(const ModelConfig& c) {
  const std::string s = nlohmann::json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace msgcl
