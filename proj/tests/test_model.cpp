#include "msgcl/model.hpp"
#include "msgcl/trainer.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace msgcl;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_items = 9;
  c.max_len = 6;
  c.hidden = 4;
  c.num_heads = 2;
  c.num_layers = 2;
  c.dropout = 0.0;
  return c;
}

/// Initial parameters with every tensor jittered, so gains and biases matter.
ModelParameters<double> jittered(const ModelConfig& c, std::uint64_t seed) {
  auto p = init_parameters<double>(c);
  std::mt19937_64 e(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  p.for_each([&](const std::string&, Matrix<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += n(e);
  });
  p.encoder.item_embedding.row(0).setZero();
  return p;
}

bool rows_equal(const Matrix<double>& a, const Matrix<double>& b, Eigen::Index upto) {
  for (Eigen::Index t = 0; t <= upto; ++t)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (a(t, j) != b(t, j)) return false;
  return true;
}

}  // namespace

TEST(Embed, AllPaddingRowsEqualPositions) {
  const auto c = small_config();
  const auto p = jittered(c, 1);
  auto off = NoiseSource<double>::off();
  const auto e = embed<double>(std::vector<ItemIndex>(6, 0), p.encoder.item_embedding, p.encoder.position_embedding, off);
  EXPECT_EQ(e, p.encoder.position_embedding);
}

TEST(Embed, HandAddition) {
  Matrix<double> items = Matrix<double>::Zero(3, 2), pos = Matrix<double>::Zero(3, 2);
  items.row(2) << 1, 0;
  pos.row(2) << 0, 1;
  auto off = NoiseSource<double>::off();
  const auto e = embed<double>({0, 0, 2}, items, pos, off);
  EXPECT_EQ(e(2, 0), 1.0);
  EXPECT_EQ(e(2, 1), 1.0);
}

TEST(Embed, IndexOutOfRangeThrows) {
  Matrix<double> items = Matrix<double>::Zero(3, 2), pos = Matrix<double>::Zero(3, 2);
  auto off = NoiseSource<double>::off();
  EXPECT_THROW(embed<double>({0, 0, 3}, items, pos, off), std::exception);
}

TEST(Attention, SingleValidPositionReturnsItsValue) {
  Matrix<double> x(2, 2);
  x << 0, 0, 3, -1;
  const Matrix<double> id = Matrix<double>::Identity(2, 2);
  auto off = NoiseSource<double>::off();
  const auto h = attention_head<double>(x, id, id, id, {false, true}, off);
  EXPECT_EQ(h(1, 0), 3.0);
  EXPECT_EQ(h(1, 1), -1.0);
  EXPECT_EQ(h.row(0).squaredNorm(), 0.0);  // padded query row
}

TEST(Attention, EqualLogitsAverageValues) {
  Matrix<double> q(2, 1), k(2, 1), v(2, 2);
  q << 0, 0;  // zero query: every visible logit is 0
  k << 1, 2;
  v << 1, 0, 0, 1;
  auto off = NoiseSource<double>::off();
  const auto h = attend<double>(q, k, v, {true, true}, off, nullptr);
  EXPECT_DOUBLE_EQ(h(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(h(1, 1), 0.5);
  EXPECT_DOUBLE_EQ(h(0, 0), 1.0);  // causal: position 0 sees only itself
}

TEST(Attention, ScaleIsPerHeadWidth) {
  // Two positions, head width 4: logit = q.k / 2.
  Matrix<double> q = Matrix<double>::Zero(2, 4), k = Matrix<double>::Zero(2, 4), v(2, 1);
  q.row(1) << 1, 1, 1, 1;
  k.row(0) << 1, 1, 1, 1;  // logit 4/2 = 2 vs 0
  v << 1, 0;
  auto off = NoiseSource<double>::off();
  const auto h = attend<double>(q, k, v, {true, true}, off, nullptr);
  EXPECT_NEAR(h(1, 0), std::exp(2.0) / (std::exp(2.0) + 1.0), 1e-15);
}

TEST(SanBlock, ZeroFfnIsResidualIdentity) {
  const auto c = small_config();
  auto p = jittered(c, 2);
  auto layer = p.encoder.stack.layers[0];
  layer.w_ffn1.setZero();
  layer.w_ffn2.setZero();
  layer.b_ffn1.setZero();
  layer.b_ffn2.setZero();
  Matrix<double> x = Matrix<double>::Random(6, 4);
  const ValidMask valid(6, true);
  auto off = NoiseSource<double>::off();
  const auto f = san_block<double>(x, layer, 2, valid, NormPlacement::kPre, off);
  // O = X + concat(heads) on LN1(X).
  const auto ln = layer_norm<double>(x, layer.ln1_gain, layer.ln1_bias, nullptr);
  Matrix<double> heads(6, 4);
  for (int i = 0; i < 2; ++i)
    heads.middleCols(2 * i, 2) = attention_head<double>(ln, layer.w_query.middleCols(2 * i, 2), layer.w_key.middleCols(2 * i, 2),
                                                       layer.w_value.middleCols(2 * i, 2), valid, off);
  EXPECT_TRUE(f.isApprox(x + heads, 1e-12));
  EXPECT_EQ(f.cols(), 4);
}

TEST(Encode, OneLayerEqualsOneBlockWithClosingNorm) {
  auto c = small_config();
  c.num_layers = 1;
  const auto p = jittered(c, 3);
  const std::vector<ItemIndex> seq{0, 0, 3, 1, 4, 2};
  auto off = NoiseSource<double>::off();
  const auto h = encode(seq, p.encoder, 2, NormPlacement::kPre, off);
  const auto e = embed<double>(seq, p.encoder.item_embedding, p.encoder.position_embedding, off);
  const auto f = san_block<double>(e, p.encoder.stack.layers[0], 2, h.valid, NormPlacement::kPre, off);
  const auto expected = layer_norm<double>(f, p.encoder.stack.final_gain, p.encoder.stack.final_bias, nullptr);
  EXPECT_EQ(h.states, expected);
}

TEST(Encode, TwoLayersComposeBlocks) {
  const auto c = small_config();
  const auto p = jittered(c, 4);
  const std::vector<ItemIndex> seq{0, 5, 3, 1, 4, 2};
  auto off = NoiseSource<double>::off();
  const auto h = encode(seq, p.encoder, 2, NormPlacement::kPost, off);
  const auto e = embed<double>(seq, p.encoder.item_embedding, p.encoder.position_embedding, off);
  const auto f1 = san_block<double>(e, p.encoder.stack.layers[0], 2, h.valid, NormPlacement::kPost, off);
  const auto f2 = san_block<double>(f1, p.encoder.stack.layers[1], 2, h.valid, NormPlacement::kPost, off);
  EXPECT_EQ(h.states, f2);
}

TEST(Encode, OrderOfPastItemsMatters) {
  const auto c = small_config();
  const auto p = jittered(c, 5);
  auto off = NoiseSource<double>::off();
  const auto a = encode({0, 0, 1, 2, 3, 4}, p.encoder, 2, NormPlacement::kPre, off);
  const auto b = encode({0, 0, 2, 1, 3, 4}, p.encoder, 2, NormPlacement::kPre, off);
  EXPECT_GT((a.states.row(5) - b.states.row(5)).norm(), 1e-6);
}

TEST(Encode, CausalityAndPaddingAreExact) {
  const auto c = small_config();
  for (auto placement : {NormPlacement::kPre, NormPlacement::kPost}) {
    const auto p = jittered(c, 6);
    auto off = NoiseSource<double>::off();
    const std::vector<ItemIndex> base{0, 0, 3, 1, 4, 2};
    const auto h = encode(base, p.encoder, 2, placement, off);
    for (Eigen::Index t = 2; t < 5; ++t) {
      auto changed = base;
      for (auto i = static_cast<std::size_t>(t + 1); i < changed.size(); ++i) changed[i] = static_cast<ItemIndex>(1 + (changed[i] + 3) % 9);
      const auto h2 = encode(changed, p.encoder, 2, placement, off);
      EXPECT_TRUE(rows_equal(h.states, h2.states, t)) << "position " << t;
      const auto mu = affine(h.states, p.heads.mu_weight, p.heads.mu_bias);
      const auto mu2 = affine(h2.states, p.heads.mu_weight, p.heads.mu_bias);
      const auto d1 = decode(mu, p.decoder, p.encoder.position_embedding, h.valid, 2, placement, off);
      const auto d2 = decode(mu2, p.decoder, p.encoder.position_embedding, h2.valid, 2, placement, off);
      EXPECT_TRUE(rows_equal(d1.states, d2.states, t)) << "decoder position " << t;
    }
    // Padding positions hold the padding index; their contents never reach valid rows.
    auto perturbed = p;
    perturbed.encoder.position_embedding.topRows(2).setRandom();
    const auto h3 = encode(base, perturbed.encoder, 2, placement, off);
    EXPECT_EQ(h3.states.bottomRows(4), h.states.bottomRows(4));
  }
}

TEST(Encode, ShapeIsMaxLenByHidden) {
  const auto c = small_config();
  const auto p = jittered(c, 7);
  auto off = NoiseSource<double>::off();
  const auto h = encode({0, 0, 0, 0, 0, 1}, p.encoder, 2, NormPlacement::kPre, off);
  EXPECT_EQ(h.states.rows(), 6);
  EXPECT_EQ(h.states.cols(), 4);
}

TEST(Config, RejectsZeroLayersAndBadHeads) {
  auto c = small_config();
  c.num_layers = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = small_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Config, DefaultsMatchPaperImplementationDetails) {
  const ModelConfig c;
  const TrainConfig t;
  EXPECT_EQ(c.hidden, 64);
  EXPECT_EQ(c.num_heads, 2);
  EXPECT_DOUBLE_EQ(c.dropout, 0.2);
  EXPECT_EQ(c.max_len, 50);
  EXPECT_DOUBLE_EQ(c.alpha, 0.03);
  EXPECT_DOUBLE_EQ(c.beta, 0.2);
  EXPECT_DOUBLE_EQ(c.tau, 1.0);
  EXPECT_EQ(c.similarity, Similarity::kDot);
  EXPECT_DOUBLE_EQ(t.lr, 0.001);
  EXPECT_EQ(t.patience, 100);
}

// ---------------------------------------------------------------------------

TEST(LatentViews, ZeroNoiseCollapsesToMean) {
  const auto c = small_config();
  const auto p = jittered(c, 8);
  auto off = NoiseSource<double>::off();
  const auto h = encode({0, 1, 2, 3, 4, 5}, p.encoder, 2, NormPlacement::kPre, off);
  const auto v = latent_views(h.states, p.heads, off);
  EXPECT_EQ(v.z, v.mu);
  EXPECT_EQ(v.z_prime, v.mu);
  const auto out = forward_twin({0, 1, 2, 3, 4, 5}, p, c, off);
  EXPECT_EQ(out.scores, out.scores_prime);
  EXPECT_EQ(out.scores.size(), c.num_items);
  EXPECT_EQ(out.z_u.size(), c.hidden);
}

TEST(LatentViews, ReparameterizationMoments) {
  VariationalHeads<double> heads = VariationalHeads<double>::zeros(1);
  heads.mu_bias(0, 0) = 0.7;  // logvar head all zero -> sigma = 1
  const Matrix<double> states = Matrix<double>::Zero(1, 1);
  const int n = 100000;
  auto noise = NoiseSource<double>::sampling(3, 0.0);
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double z = latent_views(states, heads, noise).z(0, 0);
    s += z;
    ss += z * z;
  }
  const double mean = s / n, var = ss / n - mean * mean;
  EXPECT_NEAR(mean, 0.7, 3.0 / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(var), 1.0, 3.0 * std::sqrt(0.5 / n));
}

TEST(LatentViews, IndependentViewsAndSeedDeterminism) {
  const auto c = small_config();
  const auto p = jittered(c, 9);
  const std::vector<ItemIndex> seq{0, 1, 2, 3, 4, 5};
  auto n1 = NoiseSource<double>::sampling(17, 0.0), n2 = NoiseSource<double>::sampling(17, 0.0);
  const auto a = forward_twin(seq, p, c, n1), b = forward_twin(seq, p, c, n2);
  EXPECT_EQ(a.views.z, b.views.z);
  EXPECT_EQ(a.views.z_prime, b.views.z_prime);
  EXPECT_NE(a.views.eps, a.views.eps_prime);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto n = NoiseSource<double>::sampling(seed, 0.0);
    const auto o = forward_twin(seq, p, c, n);
    EXPECT_NE(o.scores, o.scores_prime);
  }
}

TEST(LatentViews, SwappingVarianceHeadsSwapsViews) {
  const auto c = small_config();
  const auto p = jittered(c, 10);
  auto q = p;
  std::swap(q.heads.logvar_weight, q.heads.logvar_prime_weight);
  std::swap(q.heads.logvar_bias, q.heads.logvar_prime_bias);
  const Matrix<double> states = Matrix<double>::Random(6, 4);
  // Swap the draws too: record one pass, then replay with the two draws exchanged.
  NoiseTape<double> tape;
  auto rec = NoiseSource<double>::sampling(5, 0.0, true, &tape);
  const auto a = latent_views(states, p.heads, rec);
  NoiseTape<double> swapped{{tape.draws[1], tape.draws[0]}};
  auto rep = NoiseSource<double>::replaying(swapped, 0.0);
  const auto b = latent_views(states, q.heads, rep);
  EXPECT_EQ(a.z, b.z_prime);
  EXPECT_EQ(a.z_prime, b.z);
}

TEST(LatentViews, NonFiniteHeadIsNamed) {
  const auto c = small_config();
  auto p = jittered(c, 11);
  p.heads.logvar_prime_bias(0, 0) = 1e6;
  auto off = NoiseSource<double>::off();
  const auto h = encode({0, 1, 2, 3, 4, 5}, p.encoder, 2, NormPlacement::kPre, off);
  try {
    latent_views(h.states, p.heads, off);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("logvar_prime"), std::string::npos);
  }
}

TEST(ScoreItems, HandDotProductsAndLinearity) {
  Matrix<double> items(4, 2);
  items << 0, 0, 1, 0, 0, 1, 1, 1;
  HiddenStates<double> h;
  h.states = Matrix<double>(2, 2);
  h.states << 0, 0, 2, 3;
  h.valid = {false, true};
  const auto s = score_items(h, 1, items);
  EXPECT_EQ(s, (Vector<double>(3) << 2, 3, 5).finished());
  EXPECT_THROW(score_items(h, 0, items), ContractError);

  RowVector<double> a(2), b(2);
  a << 0.5, -1;
  b << 2, 0.25;
  const RowVector<double> ab = a + b;
  EXPECT_TRUE(score_row<double>(ab, items).isApprox(score_row<double>(a, items) + score_row<double>(b, items)));
  EXPECT_EQ(score_row<double>(RowVector<double>::Zero(2), items), Vector<double>::Zero(3));
}

TEST(ScoreItems, AlignedRowWins) {
  Matrix<double> items = Matrix<double>::Zero(5, 4);
  for (int v = 1; v <= 4; ++v) items(v, v - 1) = 1.0;
  const Vector<double> s = score_row<double>(items.row(3), items);
  Eigen::Index best = 0;
  s.maxCoeff(&best);
  EXPECT_EQ(best + 1, 3);
}

TEST(Predict, EvaluationIsPureFunction) {
  auto c = small_config();
  c.dropout = 0.3;
  const auto p = jittered(c, 12);
  const std::vector<ItemIndex> seq{0, 0, 1, 2, 3, 4};
  EXPECT_EQ(predict_scores(seq, p, c), predict_scores(seq, p, c));
}

TEST(Checksum, CastRoundTripsThroughFloat) {
  const auto c = small_config();
  const auto p = jittered(c, 13);
  const auto f = p.cast<float>();
  std::size_t n = 0;
  f.for_each([&](const std::string&, const Matrix<float>& m) { n += static_cast<std::size_t>(m.size()); });
  EXPECT_EQ(n, p.num_scalars());
}
