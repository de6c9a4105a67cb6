#pragma once

// Differentiable building blocks with explicit forward caches and backward
// passes: layer normalization, dropout, masked scaled dot-product attention.

#include "msgcl/common.hpp"
#include "msgcl/noise.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace msgcl {

/// valid[t] is false at padded positions.
using ValidMask = std::vector<bool>;

inline ValidMask valid_mask_of(const std::vector<ItemIndex>& seq) {
  ValidMask m(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) m[t] = seq[t] != kPadding;
  return m;
}

// ---------------------------------------------------------------------------
// Layer normalization over the feature axis (rows are positions).

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;
  Vector<Scalar> inv_std;
};

template <typename Scalar>
inline constexpr Scalar kLayerNormEps = Scalar(1e-8);

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& gain, const Matrix<Scalar>& bias,
                          LayerNormCache<Scalar>* cache) {
  const Vector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> centered = x.colwise() - mean;
  const Vector<Scalar> var = centered.array().square().rowwise().mean().matrix();
  const Vector<Scalar> inv_std = (var.array() + kLayerNormEps<Scalar>).rsqrt().matrix();
  Matrix<Scalar> normalized = (centered.array().colwise() * inv_std.array()).matrix();
  Matrix<Scalar> out = (normalized.array().rowwise() * gain.row(0).array()).matrix();
  out.rowwise() += bias.row(0);
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return out;
}

/// Returns d(input); accumulates d(gain), d(bias).
template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& d_out, const Matrix<Scalar>& gain,
                                   const LayerNormCache<Scalar>& cache, Matrix<Scalar>& d_gain,
                                   Matrix<Scalar>& d_bias) {
  const auto& xhat = cache.normalized;
  d_gain.row(0) += (d_out.array() * xhat.array()).colwise().sum().matrix();
  d_bias.row(0) += d_out.colwise().sum();
  const Matrix<Scalar> d_xhat = (d_out.array().rowwise() * gain.row(0).array()).matrix();
  const Scalar width = static_cast<Scalar>(d_out.cols());
  const Vector<Scalar> sum_d = d_xhat.rowwise().sum();
  const Vector<Scalar> sum_dx = (d_xhat.array() * xhat.array()).rowwise().sum().matrix();
  Matrix<Scalar> d_in = width * d_xhat;
  d_in.colwise() -= sum_d;
  d_in -= (xhat.array().colwise() * sum_dx.array()).matrix();
  d_in = (d_in.array().colwise() * (cache.inv_std.array() / width)).matrix();
  return d_in;
}

// ---------------------------------------------------------------------------
// Dropout. An empty mask means the identity.

template <typename Scalar>
Matrix<Scalar> apply_dropout(const Matrix<Scalar>& x, NoiseSource<Scalar>& noise, Matrix<Scalar>* mask_out) {
  if (!noise.dropout_active()) {
    if (mask_out) mask_out->resize(0, 0);
    return x;
  }
  Matrix<Scalar> mask = noise.dropout_mask(x.rows(), x.cols());
  Matrix<Scalar> y = x.cwiseProduct(mask);
  if (mask_out) *mask_out = std::move(mask);
  return y;
}

template <typename Scalar>
Matrix<Scalar> dropout_backward(const Matrix<Scalar>& d_out, const Matrix<Scalar>& mask) {
  if (mask.size() == 0) return d_out;
  return d_out.cwiseProduct(mask);
}

// ---------------------------------------------------------------------------
// Single attention head over precomputed query/key/value rows.
// Position t sees keys j <= t that are not padding; a row with no visible key
// (a padded query under left padding) yields zeros.

template <typename Scalar>
struct AttendCache {
  Matrix<Scalar> query, key, value;
  Matrix<Scalar> probs;
  Matrix<Scalar> drop_mask;
  Scalar scale{1};
};

template <typename Scalar>
Matrix<Scalar> attend(const Matrix<Scalar>& query, const Matrix<Scalar>& key, const Matrix<Scalar>& value,
                      const ValidMask& valid, NoiseSource<Scalar>& noise, AttendCache<Scalar>* cache) {
  const Eigen::Index len = query.rows();
  require(key.rows() == len && value.rows() == len && static_cast<Eigen::Index>(valid.size()) == len,
          "attention: sequence length mismatch");
  require(query.cols() == key.cols(), "attention: query/key width mismatch");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(query.cols()));
  const Matrix<Scalar> logits = (query * key.transpose()) * scale;
  Matrix<Scalar> probs = Matrix<Scalar>::Zero(len, len);
  for (Eigen::Index t = 0; t < len; ++t) {
    Scalar peak = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j <= t; ++j)
      if (valid[j] && logits(t, j) > peak) peak = logits(t, j);
    if (peak == -std::numeric_limits<Scalar>::infinity()) continue;
    Scalar total = 0;
    for (Eigen::Index j = 0; j <= t; ++j) {
      if (!valid[j]) continue;
      probs(t, j) = std::exp(logits(t, j) - peak);
      total += probs(t, j);
    }
    for (Eigen::Index j = 0; j <= t; ++j) probs(t, j) /= total;
  }
  Matrix<Scalar> drop_mask;
  const Matrix<Scalar> used = apply_dropout(probs, noise, &drop_mask);
  Matrix<Scalar> out = used * value;
  if (cache) {
    cache->query = query;
    cache->key = key;
    cache->value = value;
    cache->probs = std::move(probs);
    cache->drop_mask = std::move(drop_mask);
    cache->scale = scale;
  }
  return out;
}

template <typename Scalar>
struct AttendGrad {
  Matrix<Scalar> d_query, d_key, d_value;
};

template <typename Scalar>
AttendGrad<Scalar> attend_backward(const Matrix<Scalar>& d_out, const AttendCache<Scalar>& c) {
  const Matrix<Scalar> used = c.drop_mask.size() ? c.probs.cwiseProduct(c.drop_mask) : c.probs;
  AttendGrad<Scalar> g;
  g.d_value = used.transpose() * d_out;
  const Matrix<Scalar> d_probs = dropout_backward<Scalar>(d_out * c.value.transpose(), c.drop_mask);
  const Vector<Scalar> row_dot = (d_probs.array() * c.probs.array()).rowwise().sum().matrix();
  Matrix<Scalar> d_logits = (c.probs.array() * (d_probs.colwise() - row_dot).array()).matrix();
  d_logits *= c.scale;
  g.d_query = d_logits * c.key;
  g.d_key = d_logits.transpose() * c.query;
  return g;
}

}  // namespace msgcl
