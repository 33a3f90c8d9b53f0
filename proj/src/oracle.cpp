#include "fwl/oracle.hpp"

#include <algorithm>
#include <cmath>

namespace fwl {

namespace {

struct Activations {
  Vector z, v, pre, xhat, u, logits, probs;
  Real inv_std = 0;
  Real loss = 0;
};

Activations run(const HeadParams& p, std::span<const Real> h, TokenId target) {
  const std::size_t d = p.d_model(), dh = p.d_hidden(), nv = p.vocab();
  Activations a;
  a.z.assign(dh, 0);
  a.v.assign(dh, 0);
  for (std::size_t j = 0; j < dh; ++j) {
    Real s = p.a[j];
    for (std::size_t i = 0; i < d; ++i) s += h[i] * p.U(i, j);
    a.z[j] = s;
    a.v[j] = s > 0 ? s * s : 0;
  }
  a.pre.assign(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    Real s = p.b[j];
    for (std::size_t i = 0; i < dh; ++i) s += a.v[i] * p.W(i, j);
    a.pre[j] = s;
  }
  Real mean = 0;
  for (Real x : a.pre) mean += x;
  mean /= static_cast<Real>(d);
  Real var = 0;
  for (Real x : a.pre) var += (x - mean) * (x - mean);
  var /= static_cast<Real>(d);
  a.inv_std = 1 / std::sqrt(var + kLayerNormEps);
  a.xhat.assign(d, 0);
  a.u.assign(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    a.xhat[j] = (a.pre[j] - mean) * a.inv_std;
    a.u[j] = a.xhat[j] * p.ln_gain[j] + p.ln_bias[j];
  }
  a.logits.assign(nv, 0);
  for (std::size_t k = 0; k < nv; ++k) {
    Real s = p.c[k];
    for (std::size_t j = 0; j < d; ++j) s += a.u[j] * p.E(j, k);
    a.logits[k] = s;
  }
  const Real mx = *std::max_element(a.logits.begin(), a.logits.end());
  Real total = 0;
  a.probs.assign(nv, 0);
  for (std::size_t k = 0; k < nv; ++k) total += a.probs[k] = std::exp(a.logits[k] - mx);
  for (Real& x : a.probs) x /= total;
  a.loss = std::log(total) + mx - a.logits.at(target);
  return a;
}

}  // namespace

Real oracle_head_loss(const HeadParams& params, std::span<const Real> h, TokenId target) {
  if (target >= params.vocab()) throw IndexError("oracle: target out of range");
  return run(params, h, target).loss;
}

HeadParams oracle_head_gradient(const HeadParams& p, std::span<const Real> h, TokenId target) {
  if (target >= p.vocab()) throw IndexError("oracle: target out of range");
  const std::size_t d = p.d_model(), dh = p.d_hidden(), nv = p.vocab();
  const Activations a = run(p, h, target);
  HeadParams g = zero_head(d, dh, nv);

  Vector dlogits = a.probs;
  dlogits[target] -= 1;
  Vector du(d, 0);
  for (std::size_t k = 0; k < nv; ++k) {
    g.c[k] = dlogits[k];
    for (std::size_t j = 0; j < d; ++j) {
      g.E(j, k) = a.u[j] * dlogits[k];
      du[j] += p.E(j, k) * dlogits[k];
    }
  }
  Vector dxhat(d);
  for (std::size_t j = 0; j < d; ++j) {
    g.ln_gain[j] = du[j] * a.xhat[j];
    g.ln_bias[j] = du[j];
    dxhat[j] = du[j] * p.ln_gain[j];
  }
  // Dense Jacobian of the normalization: dxhat_j/dpre_i.
  const auto nd = static_cast<Real>(d);
  Vector dpre(d, 0);
  for (std::size_t i = 0; i < d; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const Real jac =
          a.inv_std * ((i == j ? Real(1) : Real(0)) - 1 / nd - a.xhat[i] * a.xhat[j] / nd);
      s += dxhat[j] * jac;
    }
    dpre[i] = s;
  }
  Vector dv(dh, 0);
  for (std::size_t j = 0; j < d; ++j) {
    g.b[j] = dpre[j];
    for (std::size_t i = 0; i < dh; ++i) {
      g.W(i, j) = a.v[i] * dpre[j];
      dv[i] += p.W(i, j) * dpre[j];
    }
  }
  for (std::size_t j = 0; j < dh; ++j) {
    const Real dz = a.z[j] > 0 ? dv[j] * 2 * a.z[j] : 0;
    g.a[j] = dz;
    for (std::size_t i = 0; i < d; ++i) g.U(i, j) = h[i] * dz;
  }
  return g;
}

HeadParams oracle_fast_weights(const HeadParams& params, const StepSizes& steps, const Matrix& h,
                               std::span<const TokenId> targets, std::size_t t,
                               const StreamState* state, const Decays* decays) {
  if (t > h.rows() || targets.size() < t) throw IndexError("oracle: position out of range");
  HeadParams sum = zero_head(params.d_model(), params.d_hidden(), params.vocab());
  for (std::size_t i = 0; i < t; ++i) {
    const HeadParams g = oracle_head_gradient(params, h.row(i), targets[i]);
    for (std::size_t k = 0; k < kHeadTensorCount; ++k) {
      const auto tk = static_cast<HeadTensor>(k);
      auto dst = sum.tensor(tk);
      auto src = g.tensor(tk);
      for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
    }
  }
  HeadParams out = params;
  for (std::size_t k = 0; k < kHeadTensorCount; ++k) {
    const auto tk = static_cast<HeadTensor>(k);
    if (!steps.mask.has(tk)) continue;
    auto dst = out.tensor(tk);
    auto acc = sum.tensor(tk);
    const Real alpha = steps.alpha[k];
    for (std::size_t e = 0; e < dst.size(); ++e) {
      Real offset = 0;
      if (state) {
        const Real gamma = 1 / (1 + std::exp(-decays->raw[k]));
        offset = gamma * state->history[k].flat()[e] + state->recent[k].flat()[e];
      }
      dst[e] -= alpha * (offset + acc[e]);
    }
  }
  return out;
}

Vector sequential_fast_forward(const HeadParams& params, const StepSizes& steps, const Matrix& h,
                               std::span<const TokenId> targets, const StreamState* state,
                               const Decays* decays) {
  if (targets.size() != h.rows()) throw ShapeError("oracle: targets do not match positions");
  if (state && !decays) throw StateError("oracle: stream state requires decays");
  Vector losses(h.rows());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    const HeadParams fast = oracle_fast_weights(params, steps, h, targets, t, state, decays);
    losses[t] = oracle_head_loss(fast, h.row(t), targets[t]);
  }
  return losses;
}

}  // namespace fwl
