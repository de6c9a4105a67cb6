#include "msgcl/cli.hpp"
#include "msgcl/evaluation.hpp"
#include "msgcl/experiments.hpp"
#include "msgcl/projection.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <random>

using namespace msgcl;

namespace {

/// Rank by sorting (score desc, target after its ties).
int sort_rank(const Vector<double>& s, ItemIndex target) {
  std::vector<std::pair<double, bool>> rows;
  for (Eigen::Index v = 0; v < s.size(); ++v) rows.emplace_back(s(v), v == target - 1);
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return !a.second && b.second;
  });
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].second) return static_cast<int>(i) + 1;
  return -1;
}

ModelConfig small_config(const SequenceDataset& ds) {
  ModelConfig mc;
  mc.num_items = ds.num_items;
  mc.max_len = ds.max_len;
  mc.hidden = 8;
  mc.num_heads = 2;
  return mc;
}

}  // namespace

TEST(Rank, MatchesSortOracle) {
  std::mt19937_64 e(1);
  std::uniform_int_distribution<int> coarse(0, 5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const int items = 1 + trial % 40;
    Vector<double> s(items);
    for (int v = 0; v < items; ++v) s(v) = trial % 2 ? coarse(e) : n(e);
    const ItemIndex target = 1 + static_cast<ItemIndex>(trial % items);
    ASSERT_EQ(rank_target<double>(s, target), sort_rank(s, target)) << trial;
  }
}

TEST(Rank, TiesArePessimistic) {
  EXPECT_EQ(rank_target<double>(Vector<double>::Zero(7), 4), 7);
  Vector<double> s(3);
  s << 1, 2, 2;
  EXPECT_EQ(rank_target<double>(s, 2), 2);
  EXPECT_EQ(rank_target<double>(s, 3), 2);
  EXPECT_EQ(rank_target<double>(s, 1), 3);
}

TEST(Rank, InvariantUnderMonotoneTransform) {
  std::mt19937_64 e(2);
  std::normal_distribution<double> n(0.0, 1.0);
  Vector<double> s(30);
  for (int v = 0; v < 30; ++v) s(v) = n(e);
  const Vector<double> t = (3.0 * s.array()).exp() + 5.0;
  for (ItemIndex target = 1; target <= 30; ++target) EXPECT_EQ(rank_target<double>(s, target), rank_target<double>(t, target));
}

TEST(Metrics, HandCases) {
  const std::vector<int> third{3};
  EXPECT_DOUBLE_EQ(metrics_at_k(third, 5).ndcg, 0.5);
  EXPECT_DOUBLE_EQ(metrics_at_k(third, 5).hr, 1.0);
  EXPECT_DOUBLE_EQ(metrics_at_k(third, 2).hr, 0.0);
  const std::vector<int> first{1, 1};
  EXPECT_DOUBLE_EQ(metrics_at_k(first, 1).ndcg, 1.0);
  const std::vector<int> ranks{1, 4, 11, 2};
  EXPECT_DOUBLE_EQ(metrics_at_k(ranks, 11).hr, 1.0);
  EXPECT_NEAR(metrics_at_k(ranks, 10).ndcg, (1.0 + 1.0 / std::log2(5.0) + 1.0 / std::log2(3.0)) / 4.0, 1e-15);
  EXPECT_THROW(metrics_at_k(ranks, 0), ContractError);
}

TEST(Metrics, FullCatalogHitRateIsOne) {
  std::mt19937_64 e(3);
  std::uniform_int_distribution<int> r(1, 50);
  std::vector<int> ranks(100);
  for (auto& x : ranks) x = r(e);
  EXPECT_DOUBLE_EQ(metrics_at_k(ranks, 50).hr, 1.0);
}

TEST(Metrics, RandomScoresHitAtChance) {
  std::mt19937_64 e(4);
  std::normal_distribution<double> n(0.0, 1.0);
  const int items = 40, users = 20000;
  std::vector<int> ranks;
  for (int u = 0; u < users; ++u) {
    Vector<double> s(items);
    for (int v = 0; v < items; ++v) s(v) = n(e);
    ranks.push_back(rank_target<double>(s, 1 + u % items));
  }
  for (int k : {1, 5, 10}) {
    const double p = static_cast<double>(k) / items;
    EXPECT_NEAR(metrics_at_k(ranks, k).hr, p, 4.0 * std::sqrt(p * (1 - p) / users));
  }
}

TEST(Evaluate, DeterministicAndPure) {
  const auto ds = synth_markov_dataset(10, 15, 8, 2.0, 3);
  const auto mc = small_config(ds);
  const auto p = init_parameters<double>(mc);
  const auto copy = p;
  const auto a = evaluate(p, mc, ds, Split::kTest);
  const auto b = evaluate(p, mc, ds, Split::kTest);
  EXPECT_EQ(a.hr, b.hr);
  EXPECT_EQ(a.ndcg, b.ndcg);
  EXPECT_EQ(a.num_users, 10);
  std::vector<Matrix<double>> before, after;
  copy.for_each([&](const std::string&, const Matrix<double>& m) { before.push_back(m); });
  p.for_each([&](const std::string&, const Matrix<double>& m) { after.push_back(m); });
  EXPECT_EQ(before, after);
}

TEST(Evaluate, VocabularyMismatchRejected) {
  const auto ds = synth_markov_dataset(4, 15, 8, 2.0, 3);
  auto mc = small_config(ds);
  mc.num_items = 14;
  EXPECT_THROW(evaluate(init_parameters<double>(mc), mc, ds, Split::kTest), ContractError);
}

TEST(Evaluate, PopularityGolden) {
  const auto ds = cli::load_any_dataset(MSGCL_FIXTURES "/tiny.tsv", 10, LogFormat::kTsv);
  std::ifstream in(MSGCL_FIXTURES "/tiny_popularity_eval.json");
  const auto golden = nlohmann::json::parse(in);
  const auto r = evaluate_popularity(ds, Split::kTest);
  EXPECT_EQ(r.num_users, golden["num_users"].get<int>());
  for (int k : {1, 5, 10}) {
    EXPECT_NEAR(r.hr.at(k), golden["hr"][std::to_string(k)].get<double>(), 1e-12) << k;
    EXPECT_NEAR(r.ndcg.at(k), golden["ndcg"][std::to_string(k)].get<double>(), 1e-12) << k;
  }
}

TEST(Projection, PlanarEmbeddingsKeepDistances) {
  std::mt19937_64 e(5);
  std::normal_distribution<double> n(0.0, 1.0);
  // Points on a random 2-D plane in R^6.
  Matrix<double> basis(2, 6);
  for (Eigen::Index i = 0; i < basis.size(); ++i) basis.data()[i] = n(e);
  Eigen::HouseholderQR<Matrix<double>> qr(basis.transpose());
  const Matrix<double> q = qr.householderQ() * Matrix<double>::Identity(6, 2);
  const int items = 25;
  Matrix<double> table = Matrix<double>::Zero(items + 1, 6);
  for (int v = 1; v <= items; ++v) table.row(v) = (q * Eigen::Vector2d(n(e), n(e))).transpose();
  const std::vector<std::int64_t> freq(items + 1, 3);
  const auto p = emit_embedding_projection(table, freq);
  ASSERT_EQ(p.rows.size(), static_cast<std::size_t>(items));
  for (int a = 0; a < items; ++a)
    for (int b = a + 1; b < items; ++b) {
      const double orig = (table.row(a + 1) - table.row(b + 1)).norm();
      const double proj = std::hypot(p.rows[a].x - p.rows[b].x, p.rows[a].y - p.rows[b].y);
      ASSERT_NEAR(orig, proj, 1e-9);
    }
  EXPECT_NEAR(p.explained_variance_ratio(0) + p.explained_variance_ratio(1), 1.0, 1e-12);
  EXPECT_EQ(p.rows[0].item, 1);
  EXPECT_EQ(p.rows[0].bucket, 2);
}

TEST(Projection, IsotropicCloudSharesVarianceEvenly) {
  std::mt19937_64 e(6);
  std::normal_distribution<double> n(0.0, 1.0);
  const int items = 20000, d = 8;
  Matrix<double> table(items + 1, d);
  for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = n(e);
  const auto p = emit_embedding_projection(table, std::vector<std::int64_t>(items + 1, 0));
  EXPECT_NEAR(p.explained_variance_ratio(0) + p.explained_variance_ratio(1), 2.0 / d, 0.02);
}

TEST(Projection, RankDeficientTableThrows) {
  Matrix<double> table = Matrix<double>::Zero(6, 4);
  for (int v = 1; v <= 5; ++v) table(v, 0) = v;
  EXPECT_THROW(emit_embedding_projection(table, std::vector<std::int64_t>(6, 1)), NumericError);
}

TEST(Projection, TsvHeader) {
  Projection p;
  p.rows.push_back({3, 7, 3, 0.5, -0.25});
  EXPECT_EQ(projection_tsv(p).substr(0, projection_tsv(p).find('\n')), "item\tfrequency\tbucket\tx\ty");
}

namespace {

TrainConfig quick_train() {
  TrainConfig tc;
  tc.lr = 0.005;
  tc.batch_size = 8;
  tc.max_epochs = 2;
  return tc;
}

}  // namespace

TEST(Experiments, AblationHasFourVariants) {
  const auto ds = synth_markov_dataset(16, 10, 8, 3.0, 2);
  const auto table = run_ablation<double>(ds, small_config(ds), quick_train(), {1});
  ASSERT_EQ(table.runs.size(), 4u);
  const auto summary = summary_tsv(table, "variant");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 5);
  for (const char* v : {"-clkl", "-cl", "-kl", "full"}) EXPECT_NE(summary.find(std::string("\n") + v + "\t"), std::string::npos);
}

TEST(Experiments, VariantConfigs) {
  const ModelConfig base;
  EXPECT_FALSE(variant_config(base, Variant::kNoClKl).twin);
  EXPECT_EQ(variant_config(base, Variant::kNoCl).alpha, 0.0);
  EXPECT_EQ(variant_config(base, Variant::kNoCl).beta, base.beta);
  EXPECT_EQ(variant_config(base, Variant::kNoKl).beta, 0.0);
  EXPECT_EQ(variant_config(base, Variant::kFull).alpha, base.alpha);
}

TEST(Experiments, ZeroNoiseMatchesCleanRun) {
  const auto ds = synth_markov_dataset(16, 10, 8, 3.0, 2);
  const auto mc = small_config(ds);
  const auto noisy = run_noise_robustness<double>(ds, {0.0}, mc, quick_train(), {4});
  auto m = mc;
  m.seed = 4;
  auto tc = quick_train();
  tc.seed = 4;
  const auto clean = train_and_test<double>(ds, ds, m, tc, "clean");
  EXPECT_EQ(noisy.runs.at(0).test.ndcg, clean.test.ndcg);
  EXPECT_EQ(noisy.runs.at(0).test.hr, clean.test.hr);
  EXPECT_EQ(noisy.runs.at(0).label, "0.00");
}

TEST(Experiments, NoiseRatiosValidated) {
  const auto ds = synth_markov_dataset(16, 10, 8, 3.0, 2);
  EXPECT_THROW(run_noise_robustness<double>(ds, {0.25}, small_config(ds), quick_train(), {1}), ContractError);
  EXPECT_THROW(run_noise_robustness<double>(ds, {0.6}, small_config(ds), quick_train(), {1}), ContractError);
}
