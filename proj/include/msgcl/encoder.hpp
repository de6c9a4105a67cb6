#pragma once

// Item + position embedding and the stacked causal self-attention network
// (multi-head attention, ReLU feed-forward, residuals, layer norm, dropout).
// The decoder reuses the same stack over latent states.

#include "msgcl/common.hpp"
#include "msgcl/layers.hpp"
#include "msgcl/noise.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace msgcl {

enum class NormPlacement { kPre, kPost };

/// One self-attention block. Head i owns columns [i*d/h, (i+1)*d/h) of the
/// query/key/value projections. Biases and norm parameters are 1 x d.
template <typename Scalar>
struct SanLayerParameters {
  Matrix<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> w_query, w_key, w_value;
  Matrix<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> w_ffn1, b_ffn1, w_ffn2, b_ffn2;

  static SanLayerParameters zeros(Eigen::Index d) {
    SanLayerParameters p;
    for (auto* m : {&p.ln1_gain, &p.ln1_bias, &p.ln2_gain, &p.ln2_bias, &p.b_ffn1, &p.b_ffn2})
      *m = Matrix<Scalar>::Zero(1, d);
    for (auto* m : {&p.w_query, &p.w_key, &p.w_value, &p.w_ffn1, &p.w_ffn2}) *m = Matrix<Scalar>::Zero(d, d);
    return p;
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "ln1.gain", self.ln1_gain);
    fn(prefix + "ln1.bias", self.ln1_bias);
    fn(prefix + "attn.w_query", self.w_query);
    fn(prefix + "attn.w_key", self.w_key);
    fn(prefix + "attn.w_value", self.w_value);
    fn(prefix + "ln2.gain", self.ln2_gain);
    fn(prefix + "ln2.bias", self.ln2_bias);
    fn(prefix + "ffn.w1", self.w_ffn1);
    fn(prefix + "ffn.b1", self.b_ffn1);
    fn(prefix + "ffn.w2", self.w_ffn2);
    fn(prefix + "ffn.b2", self.b_ffn2);
  }
};

/// L blocks plus the closing layer norm used by the pre-norm placement.
template <typename Scalar>
struct StackParameters {
  std::vector<SanLayerParameters<Scalar>> layers;
  Matrix<Scalar> final_gain, final_bias;

  static StackParameters zeros(int num_layers, Eigen::Index d) {
    StackParameters s;
    for (int l = 0; l < num_layers; ++l) s.layers.push_back(SanLayerParameters<Scalar>::zeros(d));
    s.final_gain = Matrix<Scalar>::Zero(1, d);
    s.final_bias = Matrix<Scalar>::Zero(1, d);
    return s;
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    for (std::size_t l = 0; l < self.layers.size(); ++l)
      SanLayerParameters<Scalar>::visit(self.layers[l], prefix + "layer" + std::to_string(l) + ".", fn);
    fn(prefix + "final_norm.gain", self.final_gain);
    fn(prefix + "final_norm.bias", self.final_bias);
  }
};

/// Uniform(+-1/sqrt(d)) projections, unit norm gains, zero biases.
template <typename Scalar, typename Engine>
void init_stack(StackParameters<Scalar>& s, Engine& engine) {
  for (auto& layer : s.layers) {
    const auto d = layer.w_query.rows();
    const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
    std::uniform_real_distribution<Scalar> uni(-bound, bound);
    for (auto* m : {&layer.w_query, &layer.w_key, &layer.w_value, &layer.w_ffn1, &layer.w_ffn2})
      for (Eigen::Index j = 0; j < m->cols(); ++j)
        for (Eigen::Index i = 0; i < m->rows(); ++i) (*m)(i, j) = uni(engine);
    layer.ln1_gain.setOnes();
    layer.ln2_gain.setOnes();
  }
  s.final_gain.setOnes();
}

template <typename Scalar>
struct EncoderParameters {
  Matrix<Scalar> item_embedding;      // (N+1) x d, row 0 is padding and stays zero
  Matrix<Scalar> position_embedding;  // max_len x d
  StackParameters<Scalar> stack;
};

/// Output of a stack: max_len x d states plus the padding mask they were computed under.
template <typename Scalar>
struct HiddenStates {
  Matrix<Scalar> states;
  ValidMask valid;
};

// ---------------------------------------------------------------------------
// embed

template <typename Scalar>
struct EmbedCache {
  std::vector<ItemIndex> seq;
  Matrix<Scalar> drop_mask;
};

/// Row t = item_embedding[seq[t]] + position_embedding[t], then dropout.
template <typename Scalar>
Matrix<Scalar> embed(const std::vector<ItemIndex>& seq, const Matrix<Scalar>& item_embedding,
                     const Matrix<Scalar>& position_embedding, NoiseSource<Scalar>& noise,
                     EmbedCache<Scalar>* cache = nullptr) {
  const auto len = static_cast<Eigen::Index>(seq.size());
  require(len == position_embedding.rows(), "embed: sequence length must equal max_len");
  Matrix<Scalar> e(len, item_embedding.cols());
  for (Eigen::Index t = 0; t < len; ++t) {
    const auto v = seq[t];
    if (v < 0 || v >= item_embedding.rows())
      throw std::out_of_range("embed: item index " + std::to_string(v) + " out of range");
    e.row(t) = item_embedding.row(v) + position_embedding.row(t);
  }
  Matrix<Scalar> mask;
  Matrix<Scalar> out = apply_dropout(e, noise, &mask);
  if (cache) {
    cache->seq = seq;
    cache->drop_mask = std::move(mask);
  }
  return out;
}

/// Accumulates into the embedding gradients; the padding row receives none.
template <typename Scalar>
void embed_backward(const Matrix<Scalar>& d_out, const EmbedCache<Scalar>& cache, Matrix<Scalar>& d_item,
                    Matrix<Scalar>& d_position) {
  const Matrix<Scalar> d = dropout_backward(d_out, cache.drop_mask);
  d_position += d;
  for (std::size_t t = 0; t < cache.seq.size(); ++t)
    if (cache.seq[t] != kPadding) d_item.row(cache.seq[t]) += d.row(static_cast<Eigen::Index>(t));
}

// ---------------------------------------------------------------------------
// attention_head: one head with its own d x d/h projections.

template <typename Scalar>
Matrix<Scalar> attention_head(const Matrix<Scalar>& x, const Matrix<Scalar>& w_query, const Matrix<Scalar>& w_key,
                              const Matrix<Scalar>& w_value, const ValidMask& valid, NoiseSource<Scalar>& noise,
                              AttendCache<Scalar>* cache = nullptr) {
  return attend<Scalar>(x * w_query, x * w_key, x * w_value, valid, noise, cache);
}

// ---------------------------------------------------------------------------
// san_block

template <typename Scalar>
struct SanBlockCache {
  NormPlacement placement{NormPlacement::kPre};
  Matrix<Scalar> attn_input;  // input to the q/k/v projections
  LayerNormCache<Scalar> ln1, ln2;
  std::vector<AttendCache<Scalar>> heads;
  Matrix<Scalar> ffn_input;  // input to the feed-forward sublayer
  Matrix<Scalar> ffn_hidden;  // pre-activation
  Matrix<Scalar> ffn_drop_mask;
};

template <typename Scalar>
Matrix<Scalar> san_block(const Matrix<Scalar>& x, const SanLayerParameters<Scalar>& p, int num_heads,
                         const ValidMask& valid, NormPlacement placement, NoiseSource<Scalar>& noise,
                         SanBlockCache<Scalar>* cache = nullptr) {
  const Eigen::Index d = x.cols();
  require(num_heads >= 1 && d % num_heads == 0, "san_block: width must be divisible by head count");
  const Eigen::Index head_width = d / num_heads;

  SanBlockCache<Scalar> local;
  SanBlockCache<Scalar>& c = cache ? *cache : local;
  c.placement = placement;
  c.heads.assign(static_cast<std::size_t>(num_heads), {});

  const bool pre = placement == NormPlacement::kPre;
  c.attn_input = pre ? layer_norm(x, p.ln1_gain, p.ln1_bias, &c.ln1) : x;
  const Matrix<Scalar> q = c.attn_input * p.w_query;
  const Matrix<Scalar> k = c.attn_input * p.w_key;
  const Matrix<Scalar> v = c.attn_input * p.w_value;
  Matrix<Scalar> concat(x.rows(), d);
  for (int i = 0; i < num_heads; ++i) {
    const Eigen::Index off = i * head_width;
    concat.middleCols(off, head_width) =
        attend<Scalar>(q.middleCols(off, head_width), k.middleCols(off, head_width),
                       v.middleCols(off, head_width), valid, noise, &c.heads[static_cast<std::size_t>(i)]);
  }
  Matrix<Scalar> o = x + concat;
  if (!pre) o = layer_norm(o, p.ln1_gain, p.ln1_bias, &c.ln1);

  c.ffn_input = pre ? layer_norm(o, p.ln2_gain, p.ln2_bias, &c.ln2) : o;
  c.ffn_hidden = c.ffn_input * p.w_ffn1;
  c.ffn_hidden.rowwise() += p.b_ffn1.row(0);
  Matrix<Scalar> ffn = c.ffn_hidden.cwiseMax(Scalar(0)) * p.w_ffn2;
  ffn.rowwise() += p.b_ffn2.row(0);
  Matrix<Scalar> f = o + apply_dropout(ffn, noise, &c.ffn_drop_mask);
  if (!pre) f = layer_norm(f, p.ln2_gain, p.ln2_bias, &c.ln2);
  return f;
}

/// Returns d(x); accumulates parameter gradients into `grad`.
template <typename Scalar>
Matrix<Scalar> san_block_backward(const Matrix<Scalar>& d_out, const SanLayerParameters<Scalar>& p,
                                  const SanBlockCache<Scalar>& c, SanLayerParameters<Scalar>& grad) {
  const bool pre = c.placement == NormPlacement::kPre;
  Matrix<Scalar> d_f = pre ? d_out : layer_norm_backward(d_out, p.ln2_gain, c.ln2, grad.ln2_gain, grad.ln2_bias);

  // f = o + dropout(relu(ffn_input W1 + b1) W2 + b2)
  const Matrix<Scalar> d_ffn = dropout_backward(d_f, c.ffn_drop_mask);
  const Matrix<Scalar> act = c.ffn_hidden.cwiseMax(Scalar(0));
  grad.w_ffn2 += act.transpose() * d_ffn;
  grad.b_ffn2.row(0) += d_ffn.colwise().sum();
  Matrix<Scalar> d_hidden = d_ffn * p.w_ffn2.transpose();
  d_hidden = (c.ffn_hidden.array() > Scalar(0)).select(d_hidden, Scalar(0));
  grad.w_ffn1 += c.ffn_input.transpose() * d_hidden;
  grad.b_ffn1.row(0) += d_hidden.colwise().sum();
  const Matrix<Scalar> d_ffn_input = d_hidden * p.w_ffn1.transpose();

  Matrix<Scalar> d_o = d_f;
  if (pre)
    d_o += layer_norm_backward(d_ffn_input, p.ln2_gain, c.ln2, grad.ln2_gain, grad.ln2_bias);
  else
    d_o += d_ffn_input;

  // o = x + concat(heads)   (post-norm: o = LN1(x + concat))
  Matrix<Scalar> d_sum = pre ? d_o : layer_norm_backward(d_o, p.ln1_gain, c.ln1, grad.ln1_gain, grad.ln1_bias);
  const Eigen::Index d = d_sum.cols();
  const auto num_heads = static_cast<Eigen::Index>(c.heads.size());
  const Eigen::Index head_width = d / num_heads;
  Matrix<Scalar> d_q(d_sum.rows(), d), d_k(d_sum.rows(), d), d_v(d_sum.rows(), d);
  for (Eigen::Index i = 0; i < num_heads; ++i) {
    const Eigen::Index off = i * head_width;
    auto g = attend_backward<Scalar>(d_sum.middleCols(off, head_width), c.heads[static_cast<std::size_t>(i)]);
    d_q.middleCols(off, head_width) = g.d_query;
    d_k.middleCols(off, head_width) = g.d_key;
    d_v.middleCols(off, head_width) = g.d_value;
  }
  grad.w_query += c.attn_input.transpose() * d_q;
  grad.w_key += c.attn_input.transpose() * d_k;
  grad.w_value += c.attn_input.transpose() * d_v;
  Matrix<Scalar> d_attn_input = d_q * p.w_query.transpose() + d_k * p.w_key.transpose() + d_v * p.w_value.transpose();

  Matrix<Scalar> d_x = d_sum;
  if (pre)
    d_x += layer_norm_backward(d_attn_input, p.ln1_gain, c.ln1, grad.ln1_gain, grad.ln1_bias);
  else
    d_x += d_attn_input;
  return d_x;
}

// ---------------------------------------------------------------------------
// Stack of blocks (shared by encoder and decoder).

template <typename Scalar>
struct StackCache {
  std::vector<SanBlockCache<Scalar>> blocks;
  LayerNormCache<Scalar> final_norm;
  NormPlacement placement{NormPlacement::kPre};
};

template <typename Scalar>
Matrix<Scalar> run_stack(const Matrix<Scalar>& x, const StackParameters<Scalar>& s, int num_heads,
                         const ValidMask& valid, NormPlacement placement, NoiseSource<Scalar>& noise,
                         StackCache<Scalar>* cache = nullptr) {
  require(!s.layers.empty(), "stack: at least one layer required");
  if (cache) {
    cache->blocks.assign(s.layers.size(), {});
    cache->placement = placement;
  }
  Matrix<Scalar> h = x;
  for (std::size_t l = 0; l < s.layers.size(); ++l)
    h = san_block(h, s.layers[l], num_heads, valid, placement, noise, cache ? &cache->blocks[l] : nullptr);
  if (placement == NormPlacement::kPre)
    h = layer_norm(h, s.final_gain, s.final_bias, cache ? &cache->final_norm : nullptr);
  return h;
}

template <typename Scalar>
Matrix<Scalar> run_stack_backward(const Matrix<Scalar>& d_out, const StackParameters<Scalar>& s,
                                  const StackCache<Scalar>& c, StackParameters<Scalar>& grad) {
  Matrix<Scalar> d = d_out;
  if (c.placement == NormPlacement::kPre)
    d = layer_norm_backward(d, s.final_gain, c.final_norm, grad.final_gain, grad.final_bias);
  for (std::size_t l = s.layers.size(); l-- > 0;) d = san_block_backward(d, s.layers[l], c.blocks[l], grad.layers[l]);
  return d;
}

// ---------------------------------------------------------------------------
// encode

template <typename Scalar>
struct EncodeCache {
  EmbedCache<Scalar> embed;
  StackCache<Scalar> stack;
};

template <typename Scalar>
HiddenStates<Scalar> encode(const std::vector<ItemIndex>& seq, const EncoderParameters<Scalar>& p, int num_heads,
                            NormPlacement placement, NoiseSource<Scalar>& noise, EncodeCache<Scalar>* cache = nullptr) {
  HiddenStates<Scalar> out;
  out.valid = valid_mask_of(seq);
  const Matrix<Scalar> e =
      embed(seq, p.item_embedding, p.position_embedding, noise, cache ? &cache->embed : nullptr);
  out.states = run_stack(e, p.stack, num_heads, out.valid, placement, noise, cache ? &cache->stack : nullptr);
  return out;
}

}  // namespace msgcl
