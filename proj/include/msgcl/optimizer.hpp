#pragma once

#include "msgcl/model.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace msgcl {

enum class ParamGroup { kMain, kSigmaPrime };

inline ParamGroup group_of(const std::string& name) {
  return is_sigma_prime_parameter(name) ? ParamGroup::kSigmaPrime : ParamGroup::kMain;
}

/// Adam moments for every tensor plus a step counter per parameter group.
template <typename Scalar>
struct AdamState {
  ModelParameters<Scalar> m, v;
  std::int64_t step_main{0};
  std::int64_t step_sigma_prime{0};

  static AdamState zeros(const ModelConfig& c) {
    AdamState s;
    s.m = ModelParameters<Scalar>::zeros(c);
    s.v = ModelParameters<Scalar>::zeros(c);
    return s;
  }
};

struct AdamHyper {
  double lr{0.001};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

/// Applies one Adam update to the tensors of `group` only; other tensors and
/// their moments are left untouched.
template <typename Scalar>
void adam_step(ModelParameters<Scalar>& params, const ModelParameters<Scalar>& grad, AdamState<Scalar>& state,
               const AdamHyper& h, ParamGroup group) {
  std::int64_t& step = group == ParamGroup::kMain ? state.step_main : state.step_sigma_prime;
  ++step;
  const Scalar b1 = static_cast<Scalar>(h.beta1), b2 = static_cast<Scalar>(h.beta2);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(h.beta1, static_cast<double>(step)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(h.beta2, static_cast<double>(step)));
  const Scalar lr = static_cast<Scalar>(h.lr), eps = static_cast<Scalar>(h.eps);

  std::vector<Matrix<Scalar>*> ps, ms, vs;
  std::vector<const Matrix<Scalar>*> gs;
  std::vector<ParamGroup> groups;
  std::vector<std::string> names;
  params.for_each([&](const std::string& name, Matrix<Scalar>& x) {
    ps.push_back(&x);
    groups.push_back(group_of(name));
    names.push_back(name);
  });
  grad.for_each([&](const std::string&, const Matrix<Scalar>& x) { gs.push_back(&x); });
  state.m.for_each([&](const std::string&, Matrix<Scalar>& x) { ms.push_back(&x); });
  state.v.for_each([&](const std::string&, Matrix<Scalar>& x) { vs.push_back(&x); });
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (groups[i] != group) continue;
    const auto& g = *gs[i];
    if (!g.allFinite()) throw NumericError("non-finite gradient in " + names[i]);
    *ms[i] = b1 * *ms[i] + (Scalar(1) - b1) * g;
    *vs[i] = b2 * *vs[i] + (Scalar(1) - b2) * g.cwiseAbs2();
    const auto m_hat = ms[i]->array() / c1;
    const auto v_hat = vs[i]->array() / c2;
    ps[i]->array() -= lr * m_hat / (v_hat.sqrt() + eps);
  }
  params.encoder.item_embedding.row(0).setZero();
}

}  // namespace msgcl
