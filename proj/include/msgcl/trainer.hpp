#pragma once

// Optimization: the two-stage meta update (stage 1: everything except the
// second variance head under the full objective; stage 2: only that head
// under the contrastive term), the joint baseline, and the epoch loop with
// validation-driven early stopping.

#include "msgcl/config.hpp"
#include "msgcl/data.hpp"
#include "msgcl/evaluation.hpp"
#include "msgcl/model.hpp"
#include "msgcl/noise.hpp"
#include "msgcl/optimizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace msgcl {

template <typename Scalar>
struct TrainState {
  ModelParameters<Scalar> params;
  ModelParameters<Scalar> best_params;
  AdamState<Scalar> adam;
  int epoch{0};            // completed epochs
  std::int64_t step{0};    // completed batches
  double best_ndcg{-1.0};  // best validation NDCG@10
  int best_epoch{0};
  int bad_epochs{0};
  bool finished{false};
  std::mt19937_64 shuffle_rng;

  static TrainState fresh(const ModelConfig& mc, const TrainConfig& tc) {
    TrainState s;
    s.params = init_parameters<Scalar>(mc);
    s.best_params = s.params;
    s.adam = AdamState<Scalar>::zeros(mc);
    s.shuffle_rng.seed(derive_seed(tc.seed, SeedStream::kShuffle));
    return s;
  }
};

/// Next-item examples from each training prefix: input = prefix without its
/// last item, targets = prefix shifted by one. Users with a single training
/// item contribute nothing.
inline std::vector<TrainingExample> make_training_examples(const SequenceDataset& ds) {
  std::vector<TrainingExample> out;
  for (int u = 0; u < ds.num_users; ++u) {
    const auto items = ds.train_items(u);
    if (items.size() < 2) continue;
    TrainingExample ex;
    ex.input = left_pad(std::vector<ItemIndex>(items.begin(), items.end() - 1), ds.max_len);
    ex.targets = left_pad(std::vector<ItemIndex>(items.begin() + 1, items.end()), ds.max_len);
    out.push_back(std::move(ex));
  }
  return out;
}

/// One noise source per example, seeded from (seed, stream, step, index).
template <typename Scalar>
std::vector<NoiseSource<Scalar>> batch_noise(std::uint64_t seed, SeedStream stream, std::int64_t step, std::size_t n,
                                             double dropout, std::vector<NoiseTape<Scalar>>* record = nullptr) {
  if (record) record->assign(n, {});
  std::vector<NoiseSource<Scalar>> out;
  const auto base = derive_seed(derive_seed(seed, stream), static_cast<std::uint64_t>(step));
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(NoiseSource<Scalar>::sampling(derive_seed(base, i), static_cast<Scalar>(dropout), true,
                                                record ? &(*record)[i] : nullptr));
  return out;
}

template <typename Scalar>
std::vector<NoiseSource<Scalar>> replay_noise(const std::vector<NoiseTape<Scalar>>& tapes, double dropout) {
  std::vector<NoiseSource<Scalar>> out;
  for (const auto& t : tapes) out.push_back(NoiseSource<Scalar>::replaying(t, static_cast<Scalar>(dropout)));
  return out;
}

/// Stage 1: full objective; the logvar_prime head is held fixed.
template <typename Scalar>
LossBreakdown stage1_step(TrainState<Scalar>& state, const ModelConfig& mc, const TrainConfig& tc,
                          std::span<const TrainingExample> batch, std::span<NoiseSource<Scalar>> noise) {
  auto r = evaluate_batch<Scalar>(state.params, mc, batch, noise, Objective::kTotal, true);
  adam_step(state.params, r.grad, state.adam, AdamHyper{tc.lr}, ParamGroup::kMain);
  return r.loss;
}

/// Stage 2: alpha * InfoNCE re-computed with the updated main parameters;
/// only the logvar_prime head moves. Returns L'.
template <typename Scalar>
double stage2_step(TrainState<Scalar>& state, const ModelConfig& mc, const TrainConfig& tc,
                   std::span<const TrainingExample> batch, std::span<NoiseSource<Scalar>> noise) {
  auto r = evaluate_batch<Scalar>(state.params, mc, batch, noise, Objective::kContrastive, true);
  adam_step(state.params, r.grad, state.adam, AdamHyper{tc.lr}, ParamGroup::kSigmaPrime);
  return r.value;
}

/// Joint baseline: every parameter under the full objective.
template <typename Scalar>
LossBreakdown joint_step(TrainState<Scalar>& state, const ModelConfig& mc, const TrainConfig& tc,
                         std::span<const TrainingExample> batch, std::span<NoiseSource<Scalar>> noise) {
  auto r = evaluate_batch<Scalar>(state.params, mc, batch, noise, Objective::kTotal, true);
  adam_step(state.params, r.grad, state.adam, AdamHyper{tc.lr}, ParamGroup::kMain);
  adam_step(state.params, r.grad, state.adam, AdamHyper{tc.lr}, ParamGroup::kSigmaPrime);
  return r.loss;
}

using LogSink = std::function<void(const nlohmann::json&)>;

template <typename Scalar>
using EpochHook = std::function<void(const TrainState<Scalar>&)>;

/// Batches of example indices for one epoch; a trailing singleton is merged
/// into the previous batch so the contrastive term always has negatives.
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, int batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

/// Runs (or resumes) training until early stopping or max_epochs.
template <typename Scalar>
TrainState<Scalar> fit(const SequenceDataset& ds, const ModelConfig& mc, const TrainConfig& tc,
                       TrainState<Scalar> state, const LogSink& log = {}, const EpochHook<Scalar>& on_epoch = {}) {
  mc.validate();
  tc.validate();
  const auto examples = make_training_examples(ds);
  if (examples.size() < 2) throw ContractError("fit: training split has fewer than 2 usable sequences");
  const bool meta = tc.mode == TrainMode::kMetaTwoStep && mc.twin;

  auto run_batch = [&](const std::vector<std::size_t>& idx, bool stage1_only) {
    std::vector<TrainingExample> batch;
    for (auto i : idx) batch.push_back(examples[i]);
    if (!stage1_only || !meta) {
      auto noise = batch_noise<Scalar>(tc.seed, SeedStream::kNoise, state.step, batch.size(), mc.dropout);
      const auto loss = meta ? stage1_step<Scalar>(state, mc, tc, batch, noise) : joint_step<Scalar>(state, mc, tc, batch, noise);
      if (log && tc.log_steps) {
        auto j = loss_to_json(loss);
        j["type"] = meta ? "stage1" : "joint";
        j["epoch"] = state.epoch + 1;
        j["step"] = state.step;
        log(j);
      }
    }
    return batch;
  };
  auto run_stage2 = [&](const std::vector<TrainingExample>& batch, std::int64_t step) {
    auto noise = batch_noise<Scalar>(tc.seed, SeedStream::kStage2Noise, step, batch.size(), mc.dropout);
    const double l_prime = stage2_step<Scalar>(state, mc, tc, batch, noise);
    if (log && tc.log_steps)
      log({{"type", "stage2"}, {"epoch", state.epoch + 1}, {"step", step}, {"l_prime", l_prime}});
  };

  while (!state.finished && state.epoch < tc.max_epochs) {
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), state.shuffle_rng);
    const auto batches = make_batches(std::move(order), tc.batch_size);
    std::vector<std::pair<std::vector<TrainingExample>, std::int64_t>> deferred;
    for (const auto& idx : batches) {
      auto batch = run_batch(idx, false);
      if (meta && tc.stage2 == Stage2Granularity::kBatch) run_stage2(batch, state.step);
      if (meta && tc.stage2 == Stage2Granularity::kEpoch) deferred.emplace_back(std::move(batch), state.step);
      ++state.step;
    }
    for (const auto& [batch, step] : deferred) run_stage2(batch, step);

    ++state.epoch;
    const auto report = evaluate(state.params, mc, ds, Split::kValidation);
    const double ndcg10 = report.ndcg.at(10);
    if (ndcg10 > state.best_ndcg) {
      state.best_ndcg = ndcg10;
      state.best_epoch = state.epoch;
      state.best_params = state.params;
      state.bad_epochs = 0;
    } else {
      ++state.bad_epochs;
    }
    if (state.bad_epochs >= tc.patience || state.epoch >= tc.max_epochs) state.finished = true;
    if (log) {
      auto j = report_to_json(report);
      j["type"] = "epoch";
      j["epoch"] = state.epoch;
      j["best_ndcg10"] = state.best_ndcg;
      j["best_epoch"] = state.best_epoch;
      log(j);
    }
    if (on_epoch) on_epoch(state);
  }
  state.finished = true;
  return state;
}

template <typename Scalar>
TrainState<Scalar> fit(const SequenceDataset& ds, const ModelConfig& mc, const TrainConfig& tc, const LogSink& log = {}) {
  return fit<Scalar>(ds, mc, tc, TrainState<Scalar>::fresh(mc, tc), log);
}

}  // namespace msgcl
