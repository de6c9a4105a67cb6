#pragma once

#include "msgcl/common.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace msgcl {

/// Ordered record of every random draw made during one forward pass.
template <typename Scalar>
struct NoiseTape {
  std::vector<Matrix<Scalar>> draws;
};

/// Source of all stochasticity in a forward pass: dropout masks and the
/// reparameterization noise. Can sample fresh, record, or replay a tape so a
/// pass can be recomputed with identical noise.
template <typename Scalar>
class NoiseSource {
 public:
  /// Deterministic: no dropout, epsilon = 0.
  static NoiseSource off() { return NoiseSource(); }

  static NoiseSource sampling(std::uint64_t seed, Scalar dropout, bool latent_noise = true,
                              NoiseTape<Scalar>* record = nullptr) {
    NoiseSource s;
    s.engine_.seed(seed);
    s.dropout_ = dropout;
    s.latent_noise_ = latent_noise;
    s.record_ = record;
    return s;
  }

  static NoiseSource replaying(const NoiseTape<Scalar>& tape, Scalar dropout, bool latent_noise = true) {
    NoiseSource s;
    s.dropout_ = dropout;
    s.latent_noise_ = latent_noise;
    s.replay_ = &tape;
    return s;
  }

  Scalar dropout() const { return dropout_; }
  bool dropout_active() const { return dropout_ > Scalar(0); }
  bool latent_noise() const { return latent_noise_; }

  /// Inverted-dropout mask: entries are 0 or 1/(1-p).
  Matrix<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols) {
    if (replay_) return next_replayed(rows, cols);
    Matrix<Scalar> m(rows, cols);
    std::bernoulli_distribution keep(1.0 - static_cast<double>(dropout_));
    const Scalar scale = Scalar(1) / (Scalar(1) - dropout_);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = keep(engine_) ? scale : Scalar(0);
    if (record_) record_->draws.push_back(m);
    return m;
  }

  /// Standard-normal draws, or zeros when latent noise is disabled.
  Matrix<Scalar> standard_normal(Eigen::Index rows, Eigen::Index cols) {
    if (!latent_noise_) return Matrix<Scalar>::Zero(rows, cols);
    if (replay_) return next_replayed(rows, cols);
    Matrix<Scalar> m(rows, cols);
    std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(engine_);
    if (record_) record_->draws.push_back(m);
    return m;
  }

 private:
  NoiseSource() = default;

  Matrix<Scalar> next_replayed(Eigen::Index rows, Eigen::Index cols) {
    require(cursor_ < replay_->draws.size(), "noise tape exhausted");
    const auto& m = replay_->draws[cursor_++];
    require(m.rows() == rows && m.cols() == cols, "noise tape shape mismatch");
    return m;
  }

  std::mt19937_64 engine_{0};
  Scalar dropout_{0};
  bool latent_noise_{false};
  NoiseTape<Scalar>* record_{nullptr};
  const NoiseTape<Scalar>* replay_{nullptr};
  std::size_t cursor_{0};
};

}  // namespace msgcl
