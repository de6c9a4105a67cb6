#pragma once

// Training objective terms: softmax cross-entropy over the item catalog,
// closed-form Gaussian KL to the standard-normal prior, and InfoNCE with
// in-batch negatives. Each term has a value and an analytic gradient.

#include "msgcl/common.hpp"
#include "msgcl/layers.hpp"

#include <cmath>
#include <string>

namespace msgcl {

enum class Similarity { kDot, kCosine };

/// The five objective terms and their weighted sum:
/// total = (l_rs1 + l_rs2) + beta * (l_kl1 + l_kl2) + alpha * l_cl.
struct LossBreakdown {
  double l_rs1{0}, l_rs2{0}, l_kl1{0}, l_kl2{0}, l_cl{0};
  double total{0};
  double alpha{0}, beta{0}, tau{1};
};

// ---------------------------------------------------------------------------
// Reconstruction: -log softmax(scores)[target]. `scores` holds items 1..N at
// offsets 0..N-1.

template <typename Scalar>
Scalar log_sum_exp(const Eigen::Ref<const Vector<Scalar>>& x) {
  const Scalar peak = x.maxCoeff();
  if (!std::isfinite(peak)) return peak;
  return peak + std::log((x.array() - peak).exp().sum());
}

template <typename Scalar>
Scalar rec_loss(const Vector<Scalar>& scores, ItemIndex target) {
  require(target != kPadding, "rec_loss: target is the padding index");
  require(target >= 1 && target <= scores.size(), "rec_loss: target out of range");
  return log_sum_exp<Scalar>(scores) - scores(target - 1);
}

/// d rec_loss / d scores = softmax(scores) - onehot(target).
template <typename Scalar>
Vector<Scalar> rec_loss_grad(const Vector<Scalar>& scores, ItemIndex target) {
  require(target >= 1 && target <= scores.size(), "rec_loss: target out of range");
  const Scalar peak = scores.maxCoeff();
  Vector<Scalar> p = (scores.array() - peak).exp().matrix();
  p /= p.sum();
  p(target - 1) -= Scalar(1);
  return p;
}

// ---------------------------------------------------------------------------
// KL( N(mu, sigma^2) || N(0, 1) ) summed over features, averaged over the
// valid positions of one sequence.

template <typename Scalar>
Scalar gaussian_kl(Scalar mu, Scalar sigma) {
  if (!(sigma > Scalar(0))) throw NumericError("kl_loss: sigma must be positive");
  const Scalar s2 = sigma * sigma;
  return Scalar(0.5) * (s2 + mu * mu - Scalar(1) - std::log(s2));
}

inline std::size_t count_valid(const ValidMask& valid) {
  std::size_t n = 0;
  for (bool v : valid) n += v;
  return n;
}

template <typename Scalar>
Scalar kl_loss(const Matrix<Scalar>& mu, const Matrix<Scalar>& sigma, const ValidMask& valid) {
  require(mu.rows() == sigma.rows() && mu.cols() == sigma.cols(), "kl_loss: shape mismatch");
  require(static_cast<Eigen::Index>(valid.size()) == mu.rows(), "kl_loss: mask length mismatch");
  Scalar sum = 0;
  std::size_t n = 0;
  for (Eigen::Index t = 0; t < mu.rows(); ++t) {
    if (!valid[t]) continue;
    ++n;
    for (Eigen::Index j = 0; j < mu.cols(); ++j) sum += gaussian_kl(mu(t, j), sigma(t, j));
  }
  return n ? sum / static_cast<Scalar>(n) : Scalar(0);
}

/// Same quantity parameterized by log-variance; fills d/dmu and d/dlogvar
/// scaled by `weight`.
template <typename Scalar>
Scalar kl_loss_logvar(const Matrix<Scalar>& mu, const Matrix<Scalar>& logvar, const ValidMask& valid, Scalar weight,
                      Matrix<Scalar>& d_mu, Matrix<Scalar>& d_logvar) {
  d_mu.setZero(mu.rows(), mu.cols());
  d_logvar.setZero(mu.rows(), mu.cols());
  const std::size_t n = count_valid(valid);
  if (n == 0) return 0;
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  Scalar sum = 0;
  for (Eigen::Index t = 0; t < mu.rows(); ++t) {
    if (!valid[t]) continue;
    for (Eigen::Index j = 0; j < mu.cols(); ++j) {
      const Scalar m = mu(t, j), lv = logvar(t, j), var = std::exp(lv);
      sum += Scalar(0.5) * (var + m * m - Scalar(1) - lv);
      d_mu(t, j) = weight * inv_n * m;
      d_logvar(t, j) = weight * inv_n * Scalar(0.5) * (var - Scalar(1));
    }
  }
  return sum * inv_n;
}

// ---------------------------------------------------------------------------
// InfoNCE. Row u: positive sim(z_u, z'_u), negatives sim(z_u, z_v) for v != u.

template <typename Scalar>
struct InfoNceResult {
  Scalar loss{0};
  Matrix<Scalar> d_anchor, d_positive;  // B x d, filled when requested
};

template <typename Scalar>
InfoNceResult<Scalar> info_nce(const Matrix<Scalar>& anchor, const Matrix<Scalar>& positive, Scalar tau,
                               Similarity similarity, bool with_grad = false) {
  const Eigen::Index batch = anchor.rows();
  require(batch >= 2, "info_nce: batch size must be at least 2");
  require(positive.rows() == batch && positive.cols() == anchor.cols(), "info_nce: shape mismatch");
  require(tau > Scalar(0), "info_nce: temperature must be positive");

  // Cosine works on row-normalized copies; gradients are mapped back below.
  Matrix<Scalar> a = anchor, p = positive;
  Vector<Scalar> a_norm, p_norm;
  if (similarity == Similarity::kCosine) {
    a_norm = anchor.rowwise().norm().cwiseMax(Scalar(1e-12));
    p_norm = positive.rowwise().norm().cwiseMax(Scalar(1e-12));
    a = (anchor.array().colwise() / a_norm.array()).matrix();
    p = (positive.array().colwise() / p_norm.array()).matrix();
  }
  const Vector<Scalar> pos = (a.array() * p.array()).rowwise().sum().matrix() / tau;
  Matrix<Scalar> neg = (a * a.transpose()) / tau;

  InfoNceResult<Scalar> r;
  Matrix<Scalar> w_pos, w_neg;  // softmax weights over {positive, negatives}
  if (with_grad) {
    w_pos.setZero(batch, 1);
    w_neg.setZero(batch, batch);
  }
  Scalar total = 0;
  for (Eigen::Index u = 0; u < batch; ++u) {
    Scalar peak = pos(u);
    for (Eigen::Index v = 0; v < batch; ++v)
      if (v != u) peak = std::max(peak, neg(u, v));
    Scalar z = std::exp(pos(u) - peak);
    for (Eigen::Index v = 0; v < batch; ++v)
      if (v != u) z += std::exp(neg(u, v) - peak);
    total += peak + std::log(z) - pos(u);
    if (with_grad) {
      w_pos(u, 0) = std::exp(pos(u) - peak) / z;
      for (Eigen::Index v = 0; v < batch; ++v)
        if (v != u) w_neg(u, v) = std::exp(neg(u, v) - peak) / z;
    }
  }
  r.loss = total / static_cast<Scalar>(batch);
  if (!std::isfinite(static_cast<double>(r.loss))) throw NumericError("info_nce: non-finite loss");
  if (!with_grad) return r;

  // dL/dpos_u = (w_pos_u - 1)/B ; dL/dneg_uv = w_neg_uv / B ; logits carry 1/tau.
  const Scalar coef = Scalar(1) / (static_cast<Scalar>(batch) * tau);
  const Vector<Scalar> g_pos = (w_pos.col(0).array() - Scalar(1)).matrix() * coef;
  const Matrix<Scalar> g_neg = w_neg * coef;
  Matrix<Scalar> d_a = (p.array().colwise() * g_pos.array()).matrix() + g_neg * a + g_neg.transpose() * a;
  Matrix<Scalar> d_p = (a.array().colwise() * g_pos.array()).matrix();
  if (similarity == Similarity::kCosine) {
    // d(x/|x|) = (I - xhat xhat^T)/|x| applied rowwise.
    auto unnormalize = [](const Matrix<Scalar>& g, const Matrix<Scalar>& unit, const Vector<Scalar>& norm) {
      const Vector<Scalar> proj = (g.array() * unit.array()).rowwise().sum().matrix();
      Matrix<Scalar> out = g - (unit.array().colwise() * proj.array()).matrix();
      return Matrix<Scalar>((out.array().colwise() / norm.array()).matrix());
    };
    d_a = unnormalize(d_a, a, a_norm);
    d_p = unnormalize(d_p, p, p_norm);
  }
  r.d_anchor = std::move(d_a);
  r.d_positive = std::move(d_p);
  return r;
}

// ---------------------------------------------------------------------------

/// Combines the parts; throws NumericError naming the first non-finite term.
inline LossBreakdown total_loss(double l_rs1, double l_rs2, double l_kl1, double l_kl2, double l_cl, double alpha,
                                double beta, double tau = 1.0) {
  const std::pair<const char*, double> parts[] = {
      {"l_rs1", l_rs1}, {"l_rs2", l_rs2}, {"l_kl1", l_kl1}, {"l_kl2", l_kl2}, {"l_cl", l_cl}};
  for (const auto& [name, value] : parts)
    if (!std::isfinite(value)) throw NumericError(std::string("total_loss: non-finite term ") + name);
  LossBreakdown b;
  b.l_rs1 = l_rs1;
  b.l_rs2 = l_rs2;
  b.l_kl1 = l_kl1;
  b.l_kl2 = l_kl2;
  b.l_cl = l_cl;
  b.alpha = alpha;
  b.beta = beta;
  b.tau = tau;
  b.total = (l_rs1 + l_rs2) + beta * (l_kl1 + l_kl2) + alpha * l_cl;
  return b;
}

}  // namespace msgcl
