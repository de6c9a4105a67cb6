#include "msgcl/verification.hpp"

#include "msgcl/losses.hpp"
#include "msgcl/trainer.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace msgcl::verify {

Estimate mean_and_se(const std::vector<double>& xs) {
  require(!xs.empty(), "mean_and_se: no samples");
  const double n = static_cast<double>(xs.size());
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double log_normal_1d(double x, double mu, double sigma) {
  const double r = (x - mu) / sigma;
  return -0.5 * (kLog2Pi + r * r) - std::log(sigma);
}

/// Multivariate normal log density via a Cholesky factor.
class Mvn {
 public:
  Mvn(Vector<double> mean, const Matrix<double>& cov) : mean_(std::move(mean)), llt_(cov) {
    if (llt_.info() != Eigen::Success) throw ContractError("gaussian toy: covariance is not positive definite");
    const Matrix<double> l = llt_.matrixL();
    log_det_ = 2.0 * l.diagonal().array().log().sum();
  }

  double log_pdf(const Vector<double>& x) const {
    const Vector<double> r = x - mean_;
    const Vector<double> w = llt_.matrixL().solve(r);
    return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + log_det_ + w.squaredNorm());
  }

  /// KL(N(m, diag(s^2)) || this).
  double kl_from_diag(const Vector<double>& m, const Vector<double>& s) const {
    const Matrix<double> cov_q = s.cwiseAbs2().asDiagonal();
    const Matrix<double> a = llt_.solve(cov_q);
    const Vector<double> d = mean_ - m;
    const double quad = d.dot(llt_.solve(d));
    const double log_det_q = 2.0 * s.array().log().sum();
    return 0.5 * (a.trace() + quad - static_cast<double>(m.size()) + log_det_ - log_det_q);
  }

 private:
  Vector<double> mean_;
  Eigen::LLT<Matrix<double>> llt_;
  double log_det_{0};
};

double log_diag(const Vector<double>& x, const Vector<double>& m, const Vector<double>& s) {
  double acc = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) acc += log_normal_1d(x(i), m(i), s(i));
  return acc;
}

Vector<double> draw_diag(const Vector<double>& m, const Vector<double>& s, std::mt19937_64& engine) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector<double> x(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) x(i) = m(i) + s(i) * normal(engine);
  return x;
}

}  // namespace

Estimate kl_monte_carlo(double mu, double sigma, std::size_t n, std::mt19937_64& engine) {
  require(sigma > 0.0, "kl_monte_carlo: sigma must be positive");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> xs(n);
  for (auto& v : xs) {
    const double z = mu + sigma * normal(engine);
    v = log_normal_1d(z, mu, sigma) - log_normal_1d(z, 0.0, 1.0);
  }
  return mean_and_se(xs);
}

double kl_numerical_integration(double mu, double sigma, int intervals) {
  require(sigma > 0.0, "kl_numerical_integration: sigma must be positive");
  if (intervals % 2) ++intervals;
  const double lo = mu - 12.0 * sigma, hi = mu + 12.0 * sigma;
  const double h = (hi - lo) / intervals;
  auto f = [&](double z) {
    const double lq = log_normal_1d(z, mu, sigma);
    return std::exp(lq) * (lq - log_normal_1d(z, 0.0, 1.0));
  };
  double acc = f(lo) + f(hi);
  for (int i = 1; i < intervals; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
  return acc * h / 3.0;
}

// ---------------------------------------------------------------------------

void GaussianToyModel::validate() const {
  const Eigen::Index k = dim;
  require(dim >= 1, "gaussian toy: dim must be positive");
  require(prior_mean.size() == 2 * k && prior_cov.rows() == 2 * k && prior_cov.cols() == 2 * k,
          "gaussian toy: prior shape mismatch");
  require(q_mean.size() == k && q_std.size() == k && q_mean_prime.size() == k && q_std_prime.size() == k,
          "gaussian toy: posterior shape mismatch");
  require(observation.size() == k, "gaussian toy: observation shape mismatch");
  require((q_std.array() > 0).all() && (q_std_prime.array() > 0).all() && noise_scale > 0,
          "gaussian toy: scales must be positive");
}

GaussianToyModel correlated_toy(int dim, double rho, bool q_equals_p) {
  require(std::abs(rho) < 1.0, "correlated_toy: |rho| must be below 1");
  GaussianToyModel t;
  t.dim = dim;
  t.prior_mean = Vector<double>::Zero(2 * dim);
  t.prior_cov = Matrix<double>::Identity(2 * dim, 2 * dim);
  for (int i = 0; i < dim; ++i) t.prior_cov(i, dim + i) = t.prior_cov(dim + i, i) = rho;
  t.q_mean = t.q_mean_prime = Vector<double>::Zero(dim);
  t.q_std = t.q_std_prime = Vector<double>::Ones(dim);
  if (!q_equals_p) {
    t.q_mean = Vector<double>::Constant(dim, 0.5);
    t.q_mean_prime = Vector<double>::Constant(dim, -0.3);
    t.q_std = Vector<double>::Constant(dim, 0.7);
    t.q_std_prime = Vector<double>::Constant(dim, 1.3);
  }
  t.observation = Vector<double>::Zero(dim);
  return t;
}

GaussianToyModel random_toy(int dim, std::mt19937_64& engine) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.4, 1.6), corr(-0.8, 0.8);
  GaussianToyModel t;
  t.dim = dim;
  const int k2 = 2 * dim;
  t.prior_mean = Vector<double>(k2);
  for (int i = 0; i < k2; ++i) t.prior_mean(i) = u(engine);
  // Unit-diagonal correlation with rho on the (z_i, z'_i) pairs, then scaled.
  Vector<double> scale(k2);
  for (int i = 0; i < k2; ++i) scale(i) = pos(engine);
  Matrix<double> c = Matrix<double>::Identity(k2, k2);
  for (int i = 0; i < dim; ++i) c(i, dim + i) = c(dim + i, i) = corr(engine);
  t.prior_cov = scale.asDiagonal() * c * scale.asDiagonal();
  auto vec = [&](auto& dist) {
    Vector<double> v(dim);
    for (int i = 0; i < dim; ++i) v(i) = dist(engine);
    return v;
  };
  t.q_mean = vec(u);
  t.q_mean_prime = vec(u);
  t.q_std = vec(pos);
  t.q_std_prime = vec(pos);
  t.observation = vec(u);
  t.noise_scale = pos(engine);
  return t;
}

ElboReport check_elbo_decomposition(const GaussianToyModel& toy, std::size_t num_samples, std::uint64_t seed) {
  toy.validate();
  require(num_samples >= 2, "check_elbo_decomposition: need at least 2 samples");
  const int k = toy.dim;
  const Mvn joint(toy.prior_mean, toy.prior_cov);
  const Mvn marg(toy.prior_mean.head(k), toy.prior_cov.topLeftCorner(k, k));
  const Mvn marg_prime(toy.prior_mean.tail(k), toy.prior_cov.bottomRightCorner(k, k));
  const Vector<double> noise = Vector<double>::Constant(k, toy.noise_scale);

  ElboReport r;
  r.kl = marg.kl_from_diag(toy.q_mean, toy.q_std);
  r.kl_prime = marg_prime.kl_from_diag(toy.q_mean_prime, toy.q_std_prime);

  auto log_joint = [&](const Vector<double>& z, const Vector<double>& zp) {
    Vector<double> zz(2 * k);
    zz << z, zp;
    return joint.log_pdf(zz);
  };
  auto log_lik = [&](const Vector<double>& z) { return log_diag(toy.observation, z, noise); };

  // Each side uses its own independent draws.
  std::mt19937_64 e_lhs(derive_seed(seed, 1)), e_rhs(derive_seed(seed, 2));
  std::vector<double> lhs(num_samples), mi(num_samples), full_lhs(num_samples), full_rhs(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) {
    const auto z = draw_diag(toy.q_mean, toy.q_std, e_lhs);
    const auto zp = draw_diag(toy.q_mean_prime, toy.q_std_prime, e_lhs);
    lhs[i] = log_joint(z, zp) - log_diag(z, toy.q_mean, toy.q_std) - log_diag(zp, toy.q_mean_prime, toy.q_std_prime);
    full_lhs[i] = log_lik(z) + log_lik(zp) + lhs[i];
  }
  for (std::size_t i = 0; i < num_samples; ++i) {
    const auto z = draw_diag(toy.q_mean, toy.q_std, e_rhs);
    const auto zp = draw_diag(toy.q_mean_prime, toy.q_std_prime, e_rhs);
    mi[i] = log_joint(z, zp) - marg.log_pdf(z) - marg_prime.log_pdf(zp);
    full_rhs[i] = log_lik(z) + log_lik(zp) + mi[i];
  }
  r.lhs = mean_and_se(lhs);
  r.mi_term = mean_and_se(mi);
  r.rhs = {r.mi_term.mean - r.kl - r.kl_prime, r.mi_term.se};
  r.elbo_joint = mean_and_se(full_lhs);
  const auto sep = mean_and_se(full_rhs);
  r.elbo_separated = {sep.mean - r.kl - r.kl_prime, sep.se};
  r.difference = r.lhs.mean - r.rhs.mean;
  r.tolerance = 3.0 * std::hypot(r.lhs.se, r.rhs.se);
  r.passed = std::abs(r.difference) <= r.tolerance + 1e-12;
  return r;
}

// ---------------------------------------------------------------------------

MiBoundReport check_mi_bound(double rho, int batch, double tau, int num_batches, std::uint64_t seed) {
  require(std::abs(rho) < 1.0, "check_mi_bound: |rho| must be below 1");
  require(batch >= 2 && num_batches >= 2, "check_mi_bound: need batch >= 2 and at least 2 batches");
  MiBoundReport r;
  r.rho = rho;
  r.batch = batch;
  r.tau = tau;
  r.true_mi = gaussian_mi(rho);
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double c = std::sqrt(1.0 - rho * rho);
  std::vector<double> bounds;
  for (int b = 0; b < num_batches; ++b) {
    Matrix<double> x(batch, 1), y(batch, 1);
    for (int i = 0; i < batch; ++i) {
      x(i, 0) = normal(engine);
      y(i, 0) = rho * x(i, 0) + c * normal(engine);
    }
    const auto res = info_nce<double>(x, y, tau, Similarity::kDot);
    bounds.push_back(std::log(static_cast<double>(batch)) - res.loss);
  }
  r.bound = mean_and_se(bounds);
  r.passed = r.bound.mean <= r.true_mi + 3.0 * r.bound.se;
  return r;
}

// ---------------------------------------------------------------------------

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_items = 10;
  c.max_len = 5;
  c.hidden = 4;
  c.num_heads = 2;
  c.num_layers = 1;
  c.dropout = 0.0;
  c.alpha = 0.3;
  c.beta = 0.2;
  c.tau = 0.7;
  return c;
}

GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, Objective objective, int per_tensor,
                                double step, double threshold) {
  ModelConfig c = config;
  c.dropout = 0.0;
  c.seed = seed;
  c.validate();
  require(per_tensor >= 1 && step > 0.0, "gradcheck_model: bad sampling arguments");

  auto params = init_parameters<double>(c);
  std::mt19937_64 engine(derive_seed(seed, SeedStream::kData));
  std::normal_distribution<double> jitter(0.0, 0.3);
  // Move gains and biases away from their initial constants so every path is exercised.
  params.for_each([&](const std::string& name, Matrix<double>& m) {
    const Eigen::Index start = name == "embedding.items" ? m.cols() : 0;
    for (Eigen::Index i = start; i < m.size(); ++i) m.data()[i] += jitter(engine);
  });
  params.encoder.item_embedding.row(0).setZero();

  // A small batch of random sequences with varying amounts of padding.
  std::uniform_int_distribution<int> item(1, c.num_items);
  std::vector<TrainingExample> batch;
  for (int b = 0; b < 3; ++b) {
    const int len = std::max(2, c.max_len - b);
    std::vector<ItemIndex> seq(static_cast<std::size_t>(len + 1));
    for (auto& v : seq) v = item(engine);
    TrainingExample ex;
    ex.input = left_pad(std::vector<ItemIndex>(seq.begin(), seq.end() - 1), c.max_len);
    ex.targets = left_pad(std::vector<ItemIndex>(seq.begin() + 1, seq.end()), c.max_len);
    batch.push_back(std::move(ex));
  }

  std::vector<NoiseTape<double>> tapes;
  auto noise = batch_noise<double>(seed, SeedStream::kNoise, 0, batch.size(), 0.0, &tapes);
  const auto analytic = evaluate_batch<double>(params, c, batch, noise, objective, true);
  auto value = [&] {
    auto replay = replay_noise<double>(tapes, 0.0);
    return evaluate_batch<double>(params, c, batch, replay, objective, false).value;
  };

  std::vector<std::pair<std::string, Matrix<double>*>> tensors;
  params.for_each([&](const std::string& name, Matrix<double>& m) { tensors.emplace_back(name, &m); });
  std::vector<const Matrix<double>*> grads;
  analytic.grad.for_each([&](const std::string&, const Matrix<double>& m) { grads.push_back(&m); });

  GradcheckReport r;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto& [name, m] = tensors[k];
    // The contrastive objective only defines gradients for the logvar_prime head.
    if (objective == Objective::kContrastive && !is_sigma_prime_parameter(name)) continue;
    const Eigen::Index start = name == "embedding.items" ? m->cols() : 0;
    std::uniform_int_distribution<Eigen::Index> pick(start, m->size() - 1);
    std::set<Eigen::Index> chosen;
    while (static_cast<int>(chosen.size()) < std::min<Eigen::Index>(per_tensor, m->size() - start))
      chosen.insert(pick(engine));
    for (auto i : chosen) {
      double& x = m->data()[i];
      const double orig = x;
      x = orig + step;
      const double fp = value();
      x = orig - step;
      const double fm = value();
      x = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double exact = grads[k]->data()[i];
      const double denom = std::max({std::abs(numeric), std::abs(exact), 1e-7});
      const double err = std::abs(numeric - exact) / denom;
      if (err >= r.max_relative_error) {
        r.max_relative_error = err;
        r.worst_parameter = name + "[" + std::to_string(i) + "]";
      }
      ++r.num_checked;
    }
    r.families.push_back(name);
  }
  r.passed = r.max_relative_error < threshold;
  return r;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
PosteriorSummary posterior_summary(const ModelParameters<Scalar>& params, const ModelConfig& config,
                                   const SequenceDataset& ds) {
  const auto examples = make_training_examples(ds);
  require(!examples.empty(), "posterior_summary: no training examples");
  double kl = 0, sigma = 0;
  std::size_t sigma_n = 0;
  for (const auto& ex : examples) {
    auto noise = NoiseSource<Scalar>::off();
    const auto enc = encode(ex.input, params.encoder, config.num_heads, config.norm, noise);
    const auto v = latent_views(enc.states, params.heads, noise, config.twin);
    double k1 = static_cast<double>(kl_loss<Scalar>(v.mu, v.sigma, enc.valid));
    double k2 = config.twin ? static_cast<double>(kl_loss<Scalar>(v.mu, v.sigma_prime, enc.valid)) : k1;
    kl += 0.5 * (k1 + k2);
    for (Eigen::Index t = 0; t < v.sigma.rows(); ++t) {
      if (!enc.valid[static_cast<std::size_t>(t)]) continue;
      sigma += static_cast<double>(v.sigma.row(t).sum());
      sigma_n += static_cast<std::size_t>(v.sigma.cols());
      if (config.twin) {
        sigma += static_cast<double>(v.sigma_prime.row(t).sum());
        sigma_n += static_cast<std::size_t>(v.sigma.cols());
      }
    }
  }
  return {kl / static_cast<double>(examples.size()), sigma_n ? sigma / static_cast<double>(sigma_n) : 0.0};
}

template PosteriorSummary posterior_summary<float>(const ModelParameters<float>&, const ModelConfig&,
                                                   const SequenceDataset&);
template PosteriorSummary posterior_summary<double>(const ModelParameters<double>&, const ModelConfig&,
                                                    const SequenceDataset&);

AnnealingReport check_kl_annealing_effect(const std::vector<double>& betas, const SequenceDataset& ds,
                                          const ModelConfig& base, const TrainConfig& train,
                                          const std::vector<std::uint64_t>& seeds) {
  require(betas.size() >= 2 && std::is_sorted(betas.begin(), betas.end()), "kl annealing: betas must be ascending");
  require(seeds.size() >= 2, "kl annealing: need at least 2 seeds");
  AnnealingReport report;
  std::vector<std::vector<double>> kls;
  for (double beta : betas) {
    std::vector<double> kl, sigma, ndcg;
    for (auto seed : seeds) {
      ModelConfig mc = base;
      mc.beta = beta;
      mc.seed = seed;
      TrainConfig tc = train;
      tc.seed = seed;
      tc.log_steps = false;
      const auto state = fit<double>(ds, mc, tc);
      const auto s = posterior_summary<double>(state.best_params, mc, ds);
      kl.push_back(s.mean_kl);
      sigma.push_back(s.mean_sigma);
      ndcg.push_back(state.best_ndcg);
    }
    report.rows.push_back({beta, mean_and_se(kl), mean_and_se(sigma), mean_and_se(ndcg)});
    kls.push_back(kl);
  }
  report.passed = true;
  for (std::size_t i = 1; i < kls.size(); ++i) {
    std::vector<double> diff(seeds.size());
    for (std::size_t s = 0; s < seeds.size(); ++s) diff[s] = kls[i][s] - kls[i - 1][s];
    const auto d = mean_and_se(diff);
    if (d.mean > 2.0 * d.se) report.passed = false;
  }
  return report;
}

nlohmann::json to_json(const Estimate& e) { return {{"mean", e.mean}, {"se", e.se}}; }

}  // namespace msgcl::verify
