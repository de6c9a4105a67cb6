#pragma once

// Full-catalog ranking evaluation with pessimistic tie handling.

#include "msgcl/common.hpp"
#include "msgcl/data.hpp"
#include "msgcl/model.hpp"

#include <cmath>
#include <map>
#include <span>
#include <vector>

namespace msgcl {

/// 1 + number of items scoring strictly higher, + number of other items tied
/// with the target (the target loses every tie).
template <typename Scalar>
int rank_target(const Vector<Scalar>& scores, ItemIndex target) {
  require(target >= 1 && target <= scores.size(), "rank_target: target out of range");
  const Scalar s = scores(target - 1);
  int rank = 1;
  for (Eigen::Index v = 0; v < scores.size(); ++v)
    if (v != target - 1 && scores(v) >= s) ++rank;
  return rank;
}

struct HitNdcg {
  double hr{0};
  double ndcg{0};
};

inline HitNdcg metrics_at_k(std::span<const int> ranks, int k) {
  require(k >= 1, "metrics_at_k: k must be positive");
  require(!ranks.empty(), "metrics_at_k: no ranks");
  double hits = 0, gain = 0;
  for (int r : ranks) {
    if (r <= k) {
      hits += 1;
      gain += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
  }
  const double n = static_cast<double>(ranks.size());
  return {hits / n, gain / n};
}

struct EvalReport {
  std::map<int, double> hr;
  std::map<int, double> ndcg;
  int num_users{0};
  std::uint64_t config_hash{0};
};

inline EvalReport report_from_ranks(std::span<const int> ranks, std::span<const int> ks = std::span<const int>()) {
  static constexpr int kDefaultKs[] = {1, 5, 10};
  if (ks.empty()) ks = kDefaultKs;
  EvalReport r;
  r.num_users = static_cast<int>(ranks.size());
  for (int k : ks) {
    const auto m = metrics_at_k(ranks, k);
    r.hr[k] = m.hr;
    r.ndcg[k] = m.ndcg;
  }
  return r;
}

enum class Split { kValidation, kTest };

/// Deterministic forward (epsilon = 0, dropout off) for every user; returns the
/// rank of each held-out target among all N items.
template <typename Scalar>
std::vector<int> rank_split(const ModelParameters<Scalar>& params, const ModelConfig& config,
                            const SequenceDataset& ds, Split split) {
  require(config.num_items == ds.num_items && params.encoder.item_embedding.rows() == ds.num_items + 1,
          "evaluate: model and dataset vocabularies differ");
  require(config.max_len == ds.max_len, "evaluate: model and dataset max_len differ");
  std::vector<int> ranks(static_cast<std::size_t>(ds.num_users));
  for (int u = 0; u < ds.num_users; ++u) {
    const auto& s = ds.split[static_cast<std::size_t>(u)];
    const bool test = split == Split::kTest;
    const auto input = test ? ds.test_input(u) : ds.validation_input(u);
    const auto scores = predict_scores(input, params, config);
    ranks[static_cast<std::size_t>(u)] = rank_target<Scalar>(scores, test ? s.test_target : s.validation_target);
  }
  return ranks;
}

template <typename Scalar>
EvalReport evaluate(const ModelParameters<Scalar>& params, const ModelConfig& config, const SequenceDataset& ds,
                    Split split) {
  const auto ranks = rank_split(params, config, ds, split);
  return report_from_ranks(ranks);
}

/// Popularity ranker: scores are training-prefix frequencies.
inline EvalReport evaluate_popularity(const SequenceDataset& ds, Split split) {
  const auto freq = item_frequencies(ds);
  Vector<double> scores(ds.num_items);
  for (int v = 1; v <= ds.num_items; ++v) scores(v - 1) = static_cast<double>(freq[static_cast<std::size_t>(v)]);
  std::vector<int> ranks;
  for (const auto& s : ds.split)
    ranks.push_back(rank_target<double>(scores, split == Split::kTest ? s.test_target : s.validation_target));
  return report_from_ranks(ranks);
}

}  // namespace msgcl
