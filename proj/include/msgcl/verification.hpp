#pragma once

// Independent numerical oracles: Monte-Carlo and quadrature estimates of the
// Gaussian KL, the double-ELBO decomposition on tractable Gaussians, the
// InfoNCE mutual-information bound, finite-difference gradient checks, and
// the effect of the KL weight on trained posteriors.

#include "msgcl/common.hpp"
#include "msgcl/config.hpp"
#include "msgcl/data.hpp"
#include "msgcl/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace msgcl::verify {

/// Sample mean with its standard error.
struct Estimate {
  double mean{0};
  double se{0};
};

Estimate mean_and_se(const std::vector<double>& xs);

// ---------------------------------------------------------------------------
// KL oracles for KL(N(mu, sigma^2) || N(0, 1)).

/// E_q[log q - log p] from `n` draws.
Estimate kl_monte_carlo(double mu, double sigma, std::size_t n, std::mt19937_64& engine);

/// Composite Simpson quadrature of q (log q - log p) over mu +- 12 sigma.
double kl_numerical_integration(double mu, double sigma, int intervals = 20000);

// ---------------------------------------------------------------------------
// Double-ELBO decomposition on Gaussians.

/// Joint prior p(z, z') = N(prior_mean, prior_cov) over 2*dim coordinates;
/// posteriors q(z|s) = N(q_mean, diag(q_std^2)), q(z'|s) likewise; Gaussian
/// likelihood p(s|z) = N(s; z, noise^2 I).
struct GaussianToyModel {
  int dim{1};
  Vector<double> prior_mean;
  Matrix<double> prior_cov;
  Vector<double> q_mean, q_std;
  Vector<double> q_mean_prime, q_std_prime;
  Vector<double> observation;
  double noise_scale{1.0};

  void validate() const;
};

/// Unit-variance marginals, cross-covariance rho * I, posteriors equal to the
/// prior marginals when `q_equals_p`, zero observation.
GaussianToyModel correlated_toy(int dim, double rho, bool q_equals_p);

GaussianToyModel random_toy(int dim, std::mt19937_64& engine);

struct ElboReport {
  Estimate lhs;        // E_q log[p(z,z') / (q(z) q(z'))]
  Estimate rhs;        // E_q log[p(z,z') / (p(z) p(z'))] - KL(q(z)||p(z)) - KL(q(z')||p(z'))
  Estimate mi_term;    // E_q log[p(z,z') / (p(z) p(z'))]
  double kl{0}, kl_prime{0};
  Estimate elbo_joint;     // full bound, single-expectation form
  Estimate elbo_separated; // full bound, two ELBOs plus the MI term
  double difference{0};
  double tolerance{0};  // 3 * combined SE
  bool passed{false};
};

ElboReport check_elbo_decomposition(const GaussianToyModel& toy, std::size_t num_samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// InfoNCE bound on bivariate Gaussians with correlation rho.

struct MiBoundReport {
  double rho{0};
  int batch{0};
  double tau{1};
  double true_mi{0};
  Estimate bound;  // ln B - InfoNCE over repeated batches
  bool passed{false};
};

inline double gaussian_mi(double rho) { return -0.5 * std::log(1.0 - rho * rho); }

MiBoundReport check_mi_bound(double rho, int batch, double tau, int num_batches, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Finite-difference gradient check of the full objective.

struct GradcheckReport {
  double max_relative_error{0};
  std::string worst_parameter;
  std::size_t num_checked{0};
  std::vector<std::string> families;  // tensors sampled
  bool passed{false};                 // max_relative_error < threshold
};

ModelConfig tiny_config();

/// Dropout off, latent noise recorded once and replayed for every evaluation.
/// Samples `per_tensor` scalars from every tensor (at least 50 in total).
GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, Objective objective = Objective::kTotal,
                                int per_tensor = 2, double step = 1e-5, double threshold = 1e-4);

// ---------------------------------------------------------------------------

struct PosteriorSummary {
  double mean_kl{0};     // (l_kl1 + l_kl2) / 2 over training examples
  double mean_sigma{0};  // over valid positions and features, both views
};

template <typename Scalar>
PosteriorSummary posterior_summary(const ModelParameters<Scalar>& params, const ModelConfig& config,
                                   const SequenceDataset& ds);

struct AnnealingRow {
  double beta{0};
  Estimate kl;
  Estimate sigma;
  Estimate ndcg10;
};

struct AnnealingReport {
  std::vector<AnnealingRow> rows;
  bool passed{false};
};

/// Trains per (beta, seed) on `ds`; passes when the mean KL is non-increasing
/// in beta up to 2 standard errors of each consecutive difference.
AnnealingReport check_kl_annealing_effect(const std::vector<double>& betas, const SequenceDataset& ds,
                                          const ModelConfig& base, const TrainConfig& train,
                                          const std::vector<std::uint64_t>& seeds);

nlohmann::json to_json(const Estimate& e);

}  // namespace msgcl::verify
