#pragma once

// Experiment drivers: the four-variant ablation and the noise-robustness sweep.
// Every variant or ratio is trained with the same seeds and data.

#include "msgcl/config.hpp"
#include "msgcl/data.hpp"
#include "msgcl/evaluation.hpp"
#include "msgcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace msgcl {

enum class Variant { kNoClKl, kNoCl, kNoKl, kFull };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kNoClKl: return "-clkl";
    case Variant::kNoCl: return "-cl";
    case Variant::kNoKl: return "-kl";
    case Variant::kFull: return "full";
  }
  return "?";
}

inline ModelConfig variant_config(ModelConfig c, Variant v) {
  switch (v) {
    case Variant::kNoClKl:
      c.alpha = 0.0;
      c.beta = 0.0;
      c.twin = false;
      break;
    case Variant::kNoCl: c.alpha = 0.0; break;
    case Variant::kNoKl: c.beta = 0.0; break;
    case Variant::kFull: break;
  }
  return c;
}

/// One trained run: `label` is the variant name or the noise ratio.
struct RunResult {
  std::string label;
  std::uint64_t seed{0};
  EvalReport test;
  int best_epoch{0};
};

/// Rows in the order given, one per (label, seed).
struct ExperimentTable {
  std::vector<RunResult> runs;

  std::vector<double> metric(const std::string& label, bool ndcg, int k) const {
    std::vector<double> out;
    for (const auto& r : runs)
      if (r.label == label) out.push_back(ndcg ? r.test.ndcg.at(k) : r.test.hr.at(k));
    return out;
  }
};

using RunHook = std::function<void(const RunResult&)>;

template <typename Scalar = double>
RunResult train_and_test(const SequenceDataset& train_ds, const SequenceDataset& eval_ds, const ModelConfig& mc,
                         const TrainConfig& tc, std::string label) {
  auto t = tc;
  t.log_steps = false;
  const auto state = fit<Scalar>(train_ds, mc, t);
  RunResult r;
  r.label = std::move(label);
  r.seed = tc.seed;
  r.test = evaluate(state.best_params, mc, eval_ds, Split::kTest);
  r.test.config_hash = config_hash(mc);
  r.best_epoch = state.best_epoch;
  return r;
}

/// Trains -clkl, -cl, -kl and full for every seed (model and train seeds are
/// both set to it) and reports test metrics of the best-validation parameters.
template <typename Scalar = double>
ExperimentTable run_ablation(const SequenceDataset& ds, const ModelConfig& base, const TrainConfig& train,
                             const std::vector<std::uint64_t>& seeds, const RunHook& hook = {}) {
  require(!seeds.empty(), "run_ablation: no seeds");
  ExperimentTable table;
  for (Variant v : {Variant::kNoClKl, Variant::kNoCl, Variant::kNoKl, Variant::kFull}) {
    for (auto seed : seeds) {
      auto mc = variant_config(base, v);
      mc.seed = seed;
      auto tc = train;
      tc.seed = seed;
      table.runs.push_back(train_and_test<Scalar>(ds, ds, mc, tc, variant_name(v)));
      if (hook) hook(table.runs.back());
    }
  }
  return table;
}

inline std::string ratio_label(double ratio) {
  std::ostringstream s;
  s.precision(2);
  s << std::fixed << ratio;
  return s.str();
}

/// Trains on inject_noise(ds, ratio) and evaluates on the clean test split.
template <typename Scalar = double>
ExperimentTable run_noise_robustness(const SequenceDataset& ds, const std::vector<double>& ratios,
                                     const ModelConfig& config, const TrainConfig& train,
                                     const std::vector<std::uint64_t>& seeds, const RunHook& hook = {}) {
  require(!seeds.empty(), "run_noise_robustness: no seeds");
  for (double r : ratios) {
    const double tenth = r * 10.0;
    require(r >= 0.0 && r <= 0.5 + 1e-12 && std::abs(tenth - std::round(tenth)) < 1e-9,
            "run_noise_robustness: ratios must be in {0, 0.1, ..., 0.5}");
  }
  ExperimentTable table;
  for (double ratio : ratios) {
    for (auto seed : seeds) {
      const auto noisy = inject_noise(ds, NoiseSpec{ratio, seed});
      auto mc = config;
      mc.seed = seed;
      auto tc = train;
      tc.seed = seed;
      table.runs.push_back(train_and_test<Scalar>(noisy, ds, mc, tc, ratio_label(ratio)));
      if (hook) hook(table.runs.back());
    }
  }
  return table;
}

/// One row per (label, seed). Columns: label, seed, HR@5, HR@10, NDCG@5, NDCG@10.
inline std::string runs_tsv(const ExperimentTable& t, const std::string& label_column) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << label_column << "\tseed\tHR@5\tHR@10\tNDCG@5\tNDCG@10\n";
  for (const auto& r : t.runs)
    out << r.label << '\t' << r.seed << '\t' << r.test.hr.at(5) << '\t' << r.test.hr.at(10) << '\t'
        << r.test.ndcg.at(5) << '\t' << r.test.ndcg.at(10) << '\n';
  return out.str();
}

/// One row per label (seed mean), in first-appearance order.
/// Columns: label, HR@5, HR@10, NDCG@5, NDCG@10.
inline std::string summary_tsv(const ExperimentTable& t, const std::string& label_column) {
  std::vector<std::string> labels;
  for (const auto& r : t.runs)
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
  auto mean = [](const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
  };
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << label_column << "\tHR@5\tHR@10\tNDCG@5\tNDCG@10\n";
  for (const auto& l : labels)
    out << l << '\t' << mean(t.metric(l, false, 5)) << '\t' << mean(t.metric(l, false, 10)) << '\t'
        << mean(t.metric(l, true, 5)) << '\t' << mean(t.metric(l, true, 10)) << '\n';
  return out.str();
}

}  // namespace msgcl
