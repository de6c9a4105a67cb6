#pragma once

// Full model: parameters, configuration, the twin forward pass, and the
// batched objective with its analytic gradient.

#include "msgcl/common.hpp"
#include "msgcl/encoder.hpp"
#include "msgcl/generator.hpp"
#include "msgcl/losses.hpp"
#include "msgcl/noise.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace msgcl {

enum class Pooling { kAnchor, kMean };
enum class ScoreFrom { kDecoder, kLatent };

struct ModelConfig {
  int num_items{0};
  int max_len{50};
  int hidden{64};
  int num_heads{2};
  int num_layers{1};
  double dropout{0.2};
  double alpha{0.03};
  double beta{0.2};
  double tau{1.0};
  Similarity similarity{Similarity::kDot};
  NormPlacement norm{NormPlacement::kPre};
  Pooling pooling{Pooling::kAnchor};
  ScoreFrom score_from{ScoreFrom::kDecoder};
  /// false = single latent view (no z', no contrastive term).
  bool twin{true};
  std::uint64_t seed{42};

  void validate() const {
    require(num_items >= 1, "config: num_items must be positive");
    require(max_len >= 3, "config: max_len must be at least 3");
    require(hidden >= 1 && num_heads >= 1 && hidden % num_heads == 0, "config: hidden must be divisible by num_heads");
    require(num_layers >= 1, "config: num_layers must be at least 1");
    require(dropout >= 0.0 && dropout < 1.0, "config: dropout must be in [0, 1)");
    require(tau > 0.0, "config: tau must be positive");
    require(alpha >= 0.0 && beta >= 0.0, "config: alpha and beta must be non-negative");
  }
};

template <typename Scalar>
struct ModelParameters {
  EncoderParameters<Scalar> encoder;
  VariationalHeads<Scalar> heads;
  StackParameters<Scalar> decoder;

  static ModelParameters zeros(const ModelConfig& c) {
    ModelParameters p;
    p.encoder.item_embedding = Matrix<Scalar>::Zero(c.num_items + 1, c.hidden);
    p.encoder.position_embedding = Matrix<Scalar>::Zero(c.max_len, c.hidden);
    p.encoder.stack = StackParameters<Scalar>::zeros(c.num_layers, c.hidden);
    p.heads = VariationalHeads<Scalar>::zeros(c.hidden);
    p.decoder = StackParameters<Scalar>::zeros(c.num_layers, c.hidden);
    return p;
  }

  /// Calls fn(name, matrix) for every tensor in a fixed order.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(std::string("embedding.items"), self.encoder.item_embedding);
    fn(std::string("embedding.positions"), self.encoder.position_embedding);
    StackParameters<Scalar>::visit(self.encoder.stack, "encoder.", fn);
    VariationalHeads<Scalar>::visit(self.heads, "heads.", fn);
    StackParameters<Scalar>::visit(self.decoder, "decoder.", fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  void set_zero() {
    for_each([](const std::string&, Matrix<Scalar>& m) { m.setZero(); });
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <typename Other>
  ModelParameters<Other> cast() const {
    ModelParameters<Other> out;
    out.encoder.item_embedding = encoder.item_embedding.template cast<Other>();
    out.encoder.position_embedding = encoder.position_embedding.template cast<Other>();
    out.encoder.stack = StackParameters<Other>::zeros(static_cast<int>(encoder.stack.layers.size()), encoder.item_embedding.cols());
    out.decoder = StackParameters<Other>::zeros(static_cast<int>(decoder.layers.size()), encoder.item_embedding.cols());
    out.heads = VariationalHeads<Other>::zeros(encoder.item_embedding.cols());
    std::vector<const Matrix<Scalar>*> src;
    for_each([&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Matrix<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
  }
};

/// The second log-variance head forms its own optimization group.
inline bool is_sigma_prime_parameter(std::string_view name) {
  return name.starts_with("heads.logvar_prime.");
}

template <typename Scalar>
ModelParameters<Scalar> init_parameters(const ModelConfig& c) {
  c.validate();
  auto p = ModelParameters<Scalar>::zeros(c);
  std::mt19937_64 engine(derive_seed(c.seed, SeedStream::kInit));
  std::normal_distribution<Scalar> normal(Scalar(0), Scalar(0.02));
  for (Eigen::Index i = 1; i < p.encoder.item_embedding.rows(); ++i)
    for (Eigen::Index j = 0; j < c.hidden; ++j) p.encoder.item_embedding(i, j) = normal(engine);
  for (Eigen::Index i = 0; i < c.max_len; ++i)
    for (Eigen::Index j = 0; j < c.hidden; ++j) p.encoder.position_embedding(i, j) = normal(engine);
  init_stack(p.encoder.stack, engine);
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(c.hidden));
  std::uniform_real_distribution<Scalar> uni(-bound, bound);
  for (auto* m : {&p.heads.mu_weight, &p.heads.logvar_weight, &p.heads.logvar_prime_weight})
    for (Eigen::Index j = 0; j < m->cols(); ++j)
      for (Eigen::Index i = 0; i < m->rows(); ++i) (*m)(i, j) = uni(engine);
  init_stack(p.decoder, engine);
  return p;
}

// ---------------------------------------------------------------------------
// Twin forward pass for a single sequence.

template <typename Scalar>
struct TwinOutput {
  HiddenStates<Scalar> encoded;
  LatentViews<Scalar> views;
  HiddenStates<Scalar> decoded, decoded_prime;
  Vector<Scalar> scores, scores_prime;     // anchor-position scores over items 1..N
  RowVector<Scalar> z_u, z_prime_u;        // pooled latents for the contrastive term
  Eigen::Index anchor{0};
};

template <typename Scalar>
RowVector<Scalar> pool_rows(const Matrix<Scalar>& m, const ValidMask& valid, Pooling pooling) {
  if (pooling == Pooling::kAnchor) return m.row(m.rows() - 1);
  RowVector<Scalar> acc = RowVector<Scalar>::Zero(m.cols());
  Scalar n = 0;
  for (Eigen::Index t = 0; t < m.rows(); ++t)
    if (valid[static_cast<std::size_t>(t)]) {
      acc += m.row(t);
      n += 1;
    }
  return n > 0 ? RowVector<Scalar>(acc / n) : acc;
}

/// One encoder pass, one latent draw, one decoder pass per view. Scores are
/// taken at the last position (the most recent item under left padding).
template <typename Scalar>
TwinOutput<Scalar> forward_twin(const std::vector<ItemIndex>& seq, const ModelParameters<Scalar>& p,
                                const ModelConfig& c, NoiseSource<Scalar>& noise) {
  require(static_cast<int>(seq.size()) == c.max_len, "forward_twin: sequence length must equal max_len");
  TwinOutput<Scalar> out;
  out.anchor = static_cast<Eigen::Index>(seq.size()) - 1;
  require(seq.back() != kPadding, "forward_twin: last position must hold an item");
  out.encoded = encode(seq, p.encoder, c.num_heads, c.norm, noise);
  out.views = latent_views(out.encoded.states, p.heads, noise, c.twin);
  const auto& pos = p.encoder.position_embedding;
  const auto& items = p.encoder.item_embedding;
  if (c.score_from == ScoreFrom::kDecoder) {
    out.decoded = decode(out.views.z, p.decoder, pos, out.encoded.valid, c.num_heads, c.norm, noise);
    out.scores = score_items(out.decoded, out.anchor, items);
  } else {
    out.scores = score_row<Scalar>(out.views.z.row(out.anchor), items);
  }
  out.z_u = pool_rows(out.views.z, out.encoded.valid, c.pooling);
  if (c.twin) {
    if (c.score_from == ScoreFrom::kDecoder) {
      out.decoded_prime = decode(out.views.z_prime, p.decoder, pos, out.encoded.valid, c.num_heads, c.norm, noise);
      out.scores_prime = score_items(out.decoded_prime, out.anchor, items);
    } else {
      out.scores_prime = score_row<Scalar>(out.views.z_prime.row(out.anchor), items);
    }
    out.z_prime_u = pool_rows(out.views.z_prime, out.encoded.valid, c.pooling);
  }
  return out;
}

/// Deterministic scores used for evaluation: epsilon = 0, dropout off.
template <typename Scalar>
Vector<Scalar> predict_scores(const std::vector<ItemIndex>& seq, const ModelParameters<Scalar>& p,
                              const ModelConfig& c) {
  auto noise = NoiseSource<Scalar>::off();
  const auto enc = encode(seq, p.encoder, c.num_heads, c.norm, noise);
  const Eigen::Index anchor = enc.states.rows() - 1;
  const Matrix<Scalar> mu = affine(enc.states, p.heads.mu_weight, p.heads.mu_bias);
  if (c.score_from == ScoreFrom::kLatent) return score_row<Scalar>(mu.row(anchor), p.encoder.item_embedding);
  const auto dec = decode(mu, p.decoder, p.encoder.position_embedding, enc.valid, c.num_heads, c.norm, noise);
  return score_items(dec, anchor, p.encoder.item_embedding);
}

// ---------------------------------------------------------------------------
// Batched objective.

/// Input row (max_len, left padded) and per-position next-item targets;
/// targets[t] == 0 means no reconstruction term at t.
struct TrainingExample {
  std::vector<ItemIndex> input;
  std::vector<ItemIndex> targets;
};

enum class Objective {
  kTotal,        // (l_rs1 + l_rs2) + beta (l_kl1 + l_kl2) + alpha l_cl
  kContrastive,  // alpha * l_cl only; gradient filled for the logvar_prime head only
};

template <typename Scalar>
struct BatchResult {
  LossBreakdown loss;
  double value{0};  // the optimized scalar for the requested objective
  ModelParameters<Scalar> grad;
};

namespace detail {

template <typename Scalar>
struct ExampleTape {
  EncodeCache<Scalar> enc;
  HiddenStates<Scalar> encoded;
  LatentViews<Scalar> views;
  DecodeCache<Scalar> dec, dec_prime;
  Matrix<Scalar> out, out_prime;  // decoder outputs (or latents when scoring from latent)
  std::vector<Eigen::Index> target_rows;
  Matrix<Scalar> d_scores, d_scores_prime;  // |target_rows| x N
  double rs1{0}, rs2{0};
};

/// Reconstruction over the target rows of `out`; fills d_scores (scaled by weight).
template <typename Scalar>
double reconstruction(const Matrix<Scalar>& out, const Matrix<Scalar>& items, const std::vector<ItemIndex>& targets,
                      const std::vector<Eigen::Index>& rows, Scalar weight, bool with_grad, Matrix<Scalar>& d_scores) {
  const Eigen::Index n_items = items.rows() - 1;
  Matrix<Scalar> picked(static_cast<Eigen::Index>(rows.size()), out.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) picked.row(static_cast<Eigen::Index>(r)) = out.row(rows[r]);
  const Matrix<Scalar> logits = picked * items.bottomRows(n_items).transpose();
  if (with_grad) d_scores.resize(logits.rows(), logits.cols());
  double sum = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Vector<Scalar> s = logits.row(r).transpose();
    const ItemIndex target = targets[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
    sum += static_cast<double>(rec_loss<Scalar>(s, target));
    if (with_grad) d_scores.row(r) = (rec_loss_grad<Scalar>(s, target) * weight).transpose();
  }
  return sum / static_cast<double>(rows.size());
}

/// Maps d_scores back onto `out` rows and the item table.
template <typename Scalar>
Matrix<Scalar> reconstruction_backward(const Matrix<Scalar>& out, const Matrix<Scalar>& items,
                                       const std::vector<Eigen::Index>& rows, const Matrix<Scalar>& d_scores,
                                       Matrix<Scalar>& d_items) {
  const Eigen::Index n_items = items.rows() - 1;
  Matrix<Scalar> picked(static_cast<Eigen::Index>(rows.size()), out.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) picked.row(static_cast<Eigen::Index>(r)) = out.row(rows[r]);
  d_items.bottomRows(n_items) += d_scores.transpose() * picked;
  const Matrix<Scalar> d_picked = d_scores * items.bottomRows(n_items);
  Matrix<Scalar> d_out = Matrix<Scalar>::Zero(out.rows(), out.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) d_out.row(rows[r]) += d_picked.row(static_cast<Eigen::Index>(r));
  return d_out;
}

template <typename Scalar>
void pool_backward(const RowVector<Scalar>& d_pooled, const ValidMask& valid, Pooling pooling, Matrix<Scalar>& d_rows) {
  if (pooling == Pooling::kAnchor) {
    d_rows.row(d_rows.rows() - 1) += d_pooled;
    return;
  }
  const auto n = static_cast<Scalar>(count_valid(valid));
  if (n == 0) return;
  for (Eigen::Index t = 0; t < d_rows.rows(); ++t)
    if (valid[static_cast<std::size_t>(t)]) d_rows.row(t) += d_pooled / n;
}

}  // namespace detail

/// Evaluates the objective over a batch. `noise[i]` drives example i. With
/// `with_grad`, `grad` holds d(value)/d(parameters); the padding row of the
/// item table always receives zero gradient.
template <typename Scalar>
BatchResult<Scalar> evaluate_batch(const ModelParameters<Scalar>& p, const ModelConfig& c,
                                   std::span<const TrainingExample> batch, std::span<NoiseSource<Scalar>> noise,
                                   Objective objective, bool with_grad) {
  require(!batch.empty(), "evaluate_batch: empty batch");
  require(noise.size() == batch.size(), "evaluate_batch: one noise source per example required");
  const bool contrastive_only = objective == Objective::kContrastive;
  require(!contrastive_only || c.twin, "evaluate_batch: contrastive objective needs the twin view");
  const bool use_cl = c.twin && (contrastive_only || c.alpha > 0.0);
  const Eigen::Index n_batch = static_cast<Eigen::Index>(batch.size());
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(n_batch);
  const Scalar beta = static_cast<Scalar>(c.beta);
  const Scalar alpha = static_cast<Scalar>(c.alpha);
  const auto& items = p.encoder.item_embedding;
  const auto& pos = p.encoder.position_embedding;

  BatchResult<Scalar> result;
  if (with_grad) {
    result.grad = ModelParameters<Scalar>::zeros(c);
  }
  std::vector<detail::ExampleTape<Scalar>> tapes(batch.size());
  Matrix<Scalar> pooled(n_batch, c.hidden), pooled_prime(n_batch, c.hidden);
  double rs1 = 0, rs2 = 0, kl1 = 0, kl2 = 0;

  for (Eigen::Index i = 0; i < n_batch; ++i) {
    const auto& ex = batch[static_cast<std::size_t>(i)];
    auto& tape = tapes[static_cast<std::size_t>(i)];
    auto& src = noise[static_cast<std::size_t>(i)];
    require(static_cast<int>(ex.input.size()) == c.max_len && ex.targets.size() == ex.input.size(),
            "evaluate_batch: example shape mismatch");
    tape.encoded = encode(ex.input, p.encoder, c.num_heads, c.norm, src, &tape.enc);
    tape.views = latent_views(tape.encoded.states, p.heads, src, c.twin);
    pooled.row(i) = pool_rows(tape.views.z, tape.encoded.valid, c.pooling);
    if (c.twin) pooled_prime.row(i) = pool_rows(tape.views.z_prime, tape.encoded.valid, c.pooling);
    if (contrastive_only) continue;

    for (std::size_t t = 0; t < ex.targets.size(); ++t)
      if (ex.targets[t] != kPadding) tape.target_rows.push_back(static_cast<Eigen::Index>(t));
    require(!tape.target_rows.empty(), "evaluate_batch: example without targets");
    const Scalar w_rec = inv_b / static_cast<Scalar>(tape.target_rows.size());

    if (c.score_from == ScoreFrom::kDecoder) {
      tape.out = decode(tape.views.z, p.decoder, pos, tape.encoded.valid, c.num_heads, c.norm, src, &tape.dec).states;
    } else {
      tape.out = tape.views.z;
    }
    rs1 += detail::reconstruction(tape.out, items, ex.targets, tape.target_rows, w_rec, with_grad, tape.d_scores);
    Matrix<Scalar> unused_mu, unused_lv;
    kl1 += static_cast<double>(kl_loss_logvar(tape.views.mu, tape.views.logvar, tape.encoded.valid, Scalar(0),
                                              unused_mu, unused_lv));
    if (c.twin) {
      if (c.score_from == ScoreFrom::kDecoder) {
        tape.out_prime = decode(tape.views.z_prime, p.decoder, pos, tape.encoded.valid, c.num_heads, c.norm, src,
                                &tape.dec_prime).states;
      } else {
        tape.out_prime = tape.views.z_prime;
      }
      rs2 += detail::reconstruction(tape.out_prime, items, ex.targets, tape.target_rows, w_rec, with_grad,
                                    tape.d_scores_prime);
      kl2 += static_cast<double>(kl_loss_logvar(tape.views.mu, tape.views.logvar_prime, tape.encoded.valid, Scalar(0),
                                                unused_mu, unused_lv));
    }
  }

  InfoNceResult<Scalar> cl;
  if (use_cl) cl = info_nce<Scalar>(pooled, pooled_prime, static_cast<Scalar>(c.tau), c.similarity, with_grad);
  const double nb = static_cast<double>(n_batch);
  result.loss = total_loss(rs1 / nb, rs2 / nb, kl1 / nb, kl2 / nb, use_cl ? static_cast<double>(cl.loss) : 0.0,
                           c.alpha, c.beta, c.tau);
  result.value = contrastive_only ? c.alpha * result.loss.l_cl : result.loss.total;
  if (!std::isfinite(result.value)) throw NumericError("evaluate_batch: non-finite objective");
  if (!with_grad) return result;

  auto& g = result.grad;
  for (Eigen::Index i = 0; i < n_batch; ++i) {
    auto& tape = tapes[static_cast<std::size_t>(i)];
    const auto& v = tape.views;
    const auto& valid = tape.encoded.valid;
    const Eigen::Index len = v.z.rows();

    if (contrastive_only) {
      // Only the logvar_prime head is differentiated here.
      Matrix<Scalar> d_z_prime = Matrix<Scalar>::Zero(len, c.hidden);
      detail::pool_backward<Scalar>(cl.d_positive.row(i) * alpha, valid, c.pooling, d_z_prime);
      const Matrix<Scalar> d_lv = (d_z_prime.array() * v.eps_prime.array() * v.sigma_prime.array() * Scalar(0.5)).matrix();
      g.heads.logvar_prime_weight += tape.encoded.states.transpose() * d_lv;
      g.heads.logvar_prime_bias.row(0) += d_lv.colwise().sum();
      continue;
    }

    Matrix<Scalar> d_mu, d_lv;
    kl_loss_logvar(v.mu, v.logvar, valid, beta * inv_b, d_mu, d_lv);
    Matrix<Scalar> d_z = detail::reconstruction_backward(tape.out, items, tape.target_rows, tape.d_scores,
                                                         g.encoder.item_embedding);
    if (c.score_from == ScoreFrom::kDecoder)
      d_z = decode_backward(d_z, p.decoder, tape.dec, g.decoder, g.encoder.position_embedding);
    if (use_cl) detail::pool_backward<Scalar>(cl.d_anchor.row(i) * alpha, valid, c.pooling, d_z);
    d_mu += d_z;
    d_lv += (d_z.array() * v.eps.array() * v.sigma.array() * Scalar(0.5)).matrix();
    Matrix<Scalar> d_states = d_mu * p.heads.mu_weight.transpose() + d_lv * p.heads.logvar_weight.transpose();

    if (c.twin) {
      Matrix<Scalar> d_mu2, d_lv2;
      kl_loss_logvar(v.mu, v.logvar_prime, valid, beta * inv_b, d_mu2, d_lv2);
      Matrix<Scalar> d_z2 = detail::reconstruction_backward(tape.out_prime, items, tape.target_rows,
                                                            tape.d_scores_prime, g.encoder.item_embedding);
      if (c.score_from == ScoreFrom::kDecoder)
        d_z2 = decode_backward(d_z2, p.decoder, tape.dec_prime, g.decoder, g.encoder.position_embedding);
      if (use_cl) detail::pool_backward<Scalar>(cl.d_positive.row(i) * alpha, valid, c.pooling, d_z2);
      d_mu2 += d_z2;
      d_lv2 += (d_z2.array() * v.eps_prime.array() * v.sigma_prime.array() * Scalar(0.5)).matrix();
      d_mu += d_mu2;
      d_states += d_mu2 * p.heads.mu_weight.transpose() + d_lv2 * p.heads.logvar_prime_weight.transpose();
      g.heads.logvar_prime_weight += tape.encoded.states.transpose() * d_lv2;
      g.heads.logvar_prime_bias.row(0) += d_lv2.colwise().sum();
    }
    g.heads.mu_weight += tape.encoded.states.transpose() * d_mu;
    g.heads.mu_bias.row(0) += d_mu.colwise().sum();
    g.heads.logvar_weight += tape.encoded.states.transpose() * d_lv;
    g.heads.logvar_bias.row(0) += d_lv.colwise().sum();

    const Matrix<Scalar> d_embedded = run_stack_backward(d_states, p.encoder.stack, tape.enc.stack, g.encoder.stack);
    embed_backward(d_embedded, tape.enc.embed, g.encoder.item_embedding, g.encoder.position_embedding);
  }
  g.encoder.item_embedding.row(0).setZero();
  return result;
}

}  // namespace msgcl
