#pragma once

// Variational sequence-to-sequence generator: mean and two log-variance heads
// over encoder states, twin reparameterized latents, a causal transformer
// decoder, and full-catalog dot-product scoring against the item table.

#include "msgcl/common.hpp"
#include "msgcl/encoder.hpp"
#include "msgcl/layers.hpp"
#include "msgcl/noise.hpp"

#include <string>
#include <vector>

namespace msgcl {

/// Three row-wise affine maps d -> d. The two log-variance heads share nothing.
template <typename Scalar>
struct VariationalHeads {
  Matrix<Scalar> mu_weight, mu_bias;
  Matrix<Scalar> logvar_weight, logvar_bias;
  Matrix<Scalar> logvar_prime_weight, logvar_prime_bias;

  static VariationalHeads zeros(Eigen::Index d) {
    VariationalHeads h;
    for (auto* m : {&h.mu_weight, &h.logvar_weight, &h.logvar_prime_weight}) *m = Matrix<Scalar>::Zero(d, d);
    for (auto* m : {&h.mu_bias, &h.logvar_bias, &h.logvar_prime_bias}) *m = Matrix<Scalar>::Zero(1, d);
    return h;
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "mu.weight", self.mu_weight);
    fn(prefix + "mu.bias", self.mu_bias);
    fn(prefix + "logvar.weight", self.logvar_weight);
    fn(prefix + "logvar.bias", self.logvar_bias);
    fn(prefix + "logvar_prime.weight", self.logvar_prime_weight);
    fn(prefix + "logvar_prime.bias", self.logvar_prime_bias);
  }
};

template <typename Scalar>
Matrix<Scalar> affine(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Matrix<Scalar>& b) {
  Matrix<Scalar> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

/// z = mu + sigma * eps, z' = mu + sigma' * eps'; sigma = exp(logvar / 2).
template <typename Scalar>
struct LatentViews {
  Matrix<Scalar> mu, logvar, logvar_prime;
  Matrix<Scalar> sigma, sigma_prime;
  Matrix<Scalar> eps, eps_prime;
  Matrix<Scalar> z, z_prime;
};

namespace detail {
template <typename Scalar>
void check_finite(const Matrix<Scalar>& m, const char* head) {
  if (!m.allFinite()) throw NumericError(std::string("latent_views: non-finite output from head ") + head);
}
}  // namespace detail

/// With `twin` false only the first view is drawn (z_prime stays empty).
template <typename Scalar>
LatentViews<Scalar> latent_views(const Matrix<Scalar>& states, const VariationalHeads<Scalar>& heads,
                                 NoiseSource<Scalar>& noise, bool twin = true) {
  if (!states.allFinite()) throw NumericError("latent_views: non-finite encoder states");
  LatentViews<Scalar> v;
  v.mu = affine(states, heads.mu_weight, heads.mu_bias);
  detail::check_finite(v.mu, "mu");
  v.logvar = affine(states, heads.logvar_weight, heads.logvar_bias);
  v.sigma = (v.logvar.array() * Scalar(0.5)).exp().matrix();
  detail::check_finite(v.sigma, "logvar");
  v.eps = noise.standard_normal(states.rows(), states.cols());
  v.z = v.mu + v.sigma.cwiseProduct(v.eps);
  if (twin) {
    v.logvar_prime = affine(states, heads.logvar_prime_weight, heads.logvar_prime_bias);
    v.sigma_prime = (v.logvar_prime.array() * Scalar(0.5)).exp().matrix();
    detail::check_finite(v.sigma_prime, "logvar_prime");
    v.eps_prime = noise.standard_normal(states.rows(), states.cols());
    v.z_prime = v.mu + v.sigma_prime.cwiseProduct(v.eps_prime);
  }
  return v;
}

// ---------------------------------------------------------------------------
// decode: positional embedding is added to the latent rows, then dropout and
// the decoder stack.

template <typename Scalar>
struct DecodeCache {
  Matrix<Scalar> drop_mask;
  StackCache<Scalar> stack;
};

template <typename Scalar>
HiddenStates<Scalar> decode(const Matrix<Scalar>& z, const StackParameters<Scalar>& decoder,
                            const Matrix<Scalar>& position_embedding, const ValidMask& valid, int num_heads,
                            NormPlacement placement, NoiseSource<Scalar>& noise, DecodeCache<Scalar>* cache = nullptr) {
  require(z.rows() == position_embedding.rows() && z.cols() == position_embedding.cols(), "decode: shape mismatch");
  HiddenStates<Scalar> out;
  out.valid = valid;
  Matrix<Scalar> mask;
  const Matrix<Scalar> in = apply_dropout(Matrix<Scalar>(z + position_embedding), noise, &mask);
  out.states = run_stack(in, decoder, num_heads, valid, placement, noise, cache ? &cache->stack : nullptr);
  if (cache) cache->drop_mask = std::move(mask);
  return out;
}

/// Returns d(z); accumulates into decoder and position gradients.
template <typename Scalar>
Matrix<Scalar> decode_backward(const Matrix<Scalar>& d_out, const StackParameters<Scalar>& decoder,
                               const DecodeCache<Scalar>& cache, StackParameters<Scalar>& d_decoder,
                               Matrix<Scalar>& d_position) {
  Matrix<Scalar> d_in = run_stack_backward(d_out, decoder, cache.stack, d_decoder);
  d_in = dropout_backward(d_in, cache.drop_mask);
  d_position += d_in;
  return d_in;
}

// ---------------------------------------------------------------------------

/// scores[v-1] = <row, item_embedding[v]> for v = 1..N.
template <typename Scalar>
Vector<Scalar> score_row(const Eigen::Ref<const RowVector<Scalar>>& row, const Matrix<Scalar>& item_embedding) {
  const Eigen::Index n = item_embedding.rows() - 1;
  return item_embedding.bottomRows(n) * row.transpose();
}

template <typename Scalar>
Vector<Scalar> score_items(const HiddenStates<Scalar>& dec_out, Eigen::Index anchor_position,
                           const Matrix<Scalar>& item_embedding) {
  require(anchor_position >= 0 && anchor_position < dec_out.states.rows(), "score_items: anchor out of range");
  require(dec_out.valid[static_cast<std::size_t>(anchor_position)],
          "score_items: anchor position " + std::to_string(anchor_position) + " is padding");
  return score_row<Scalar>(dec_out.states.row(anchor_position), item_embedding);
}

}  // namespace msgcl
