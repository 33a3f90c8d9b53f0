// Reverse-mode derivatives of the head objectives, written out by hand.
//
// The fast pass consumes the per-position gradients G = {g_logits, g_u,
// g_lngain, g_o, g_z} of the slow pass as attention values and prefix sums.
// Differentiating through G (second order) means running the adjoint of the
// slow backward pass, which in turn feeds the adjoint of the slow forward
// pass. Everything below is expressed with the same row-wise primitives as
// the forward code.

#include <cmath>

#include "fwl/head.hpp"

namespace fwl {

namespace {

// Adjoints of slow-pass activations, accumulated from several consumers.
struct SlowAdjoint {
  Matrix dlogits, du, dxhat, dv, dz;
  Vector dinv_std;

  SlowAdjoint(std::size_t t, std::size_t d, std::size_t dh, std::size_t nv)
      : dlogits(t, nv), du(t, d), dxhat(t, d), dv(t, dh), dz(t, dh), dinv_std(t, 0) {}
};

void add_colsum(std::span<Real> acc, const Matrix& m) {
  for (std::size_t t = 0; t < m.rows(); ++t) axpy(1, m.row(t), acc);
}

Real frobenius(const Matrix& a, const Matrix& b) { return dot(a.flat(), b.flat()); }

Matrix scaled(const Matrix& m, Real s) {
  Matrix out = m;
  scale_inplace(out, s);
  return out;
}

// Reverse of z -> v -> o -> LayerNorm -> u -> logits for the slow pass.
void slow_forward_reverse(const HeadParams& p, const PositionTape& tape, SlowAdjoint& adj,
                          HeadGradients& out) {
  const std::size_t t_len = tape.h.rows(), d = p.d_model();
  add_matmul_tn(out.params.E, tape.u, adj.dlogits);
  add_colsum(out.params.c, adj.dlogits);
  add_matmul(adj.du, adj.dlogits, p.E.transposed());

  Matrix dpre(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto du = adj.du.row(t);
    auto xr = tape.xhat.row(t);
    auto dx = adj.dxhat.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      dx[j] += du[j] * p.ln_gain[j];
      out.params.ln_gain[j] += du[j] * xr[j];
      out.params.ln_bias[j] += du[j];
    }
    auto dp = dpre.row(t);
    const Real s = tape.inv_std[t];
    layernorm_row_bwd(xr, s, dx, dp);
    // Explicit dependence on 1/std: d(inv_std)/d(pre_j) = -inv_std^2 xhat_j / d
    const Real ds = adj.dinv_std[t];
    if (ds != 0) axpy(-ds * s * s / static_cast<Real>(d), xr, dp);
  }
  add_colsum(out.params.b, dpre);
  add_matmul_tn(out.params.W, tape.v, dpre);
  add_matmul(adj.dv, dpre, p.W.transposed());

  auto dz = adj.dz.flat();
  auto dv = adj.dv.flat();
  auto z = tape.z.flat();
  for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += dv[i] * (z[i] > 0 ? 2 * z[i] : Real(0));

  add_matmul_tn(out.params.U, tape.h, adj.dz);
  add_colsum(out.params.a, adj.dz);
  add_matmul(out.h, adj.dz, p.U.transposed());
}

// Adjoints flowing into the per-position gradients.
struct GradAdjoint {
  Matrix dg_logits, dg_u, dg_lngain, dg_o, dg_z;

  GradAdjoint(std::size_t t, std::size_t d, std::size_t dh, std::size_t nv)
      : dg_logits(t, nv), dg_u(t, d), dg_lngain(t, d), dg_o(t, d), dg_z(t, dh) {}
};

// Reverse of per_position_grads: pushes adjoints of G into slow activations
// and parameters.
void position_grads_reverse(const HeadParams& p, const PositionTape& tape,
                            const PositionGrads& g, GradAdjoint& ga, SlowAdjoint& adj,
                            HeadGradients& out) {
  const std::size_t t_len = tape.h.rows(), d = p.d_model();
  const auto nd = static_cast<Real>(d);

  // g_z = g_v * 2 relu(z)
  Matrix dg_v = ga.dg_z;
  {
    auto dgv = dg_v.flat();
    auto dgz = ga.dg_z.flat();
    auto gv = g.g_v.flat();
    auto z = tape.z.flat();
    auto dz = adj.dz.flat();
    for (std::size_t i = 0; i < dgv.size(); ++i) {
      const bool on = z[i] > 0;
      dgv[i] = on ? dgz[i] * 2 * z[i] : Real(0);
      if (on) dz[i] += dgz[i] * gv[i] * 2;
    }
  }
  // g_v = g_o W^T
  add_matmul(ga.dg_o, dg_v, p.W);
  add_matmul_tn(out.params.W, dg_v, g.g_o);

  // g_o = LayerNorm-backward(xhat, inv_std, g_u * gain)
  Vector gx(d), dgx(d), abar(d);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto A = ga.dg_o.row(t);
    auto xr = tape.xhat.row(t);
    auto gu = g.g_u.row(t);
    const Real s = tape.inv_std[t];
    Real m2 = 0, k = 0;
    for (std::size_t j = 0; j < d; ++j) {
      gx[j] = gu[j] * p.ln_gain[j];
      m2 += gx[j] * xr[j];
      abar[j] = s * A[j];
      k += abar[j] * xr[j];
    }
    m2 /= nd;
    k /= nd;
    layernorm_row_bwd(xr, s, A, dgx);
    auto dx = adj.dxhat.row(t);
    for (std::size_t j = 0; j < d; ++j) dx[j] += -m2 * abar[j] - k * gx[j];
    adj.dinv_std[t] += dot(A, g.g_o.row(t)) / s;

    auto dgu = ga.dg_u.row(t);
    auto dgg = ga.dg_lngain.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      // gx = g_u * gain
      dgu[j] += dgx[j] * p.ln_gain[j];
      out.params.ln_gain[j] += dgx[j] * gu[j];
      // g_lngain = g_u * xhat
      dgu[j] += dgg[j] * xr[j];
      dx[j] += dgg[j] * gu[j];
    }
  }

  // g_u = g_logits E^T
  add_matmul(ga.dg_logits, ga.dg_u, p.E);
  add_matmul_tn(out.params.E, ga.dg_u, g.g_logits);

  // g_logits = softmax(logits) - onehot
  for (std::size_t t = 0; t < t_len; ++t) {
    auto pr = tape.probs.row(t);
    auto dg = ga.dg_logits.row(t);
    const Real inner = dot(pr, dg);
    auto dl = adj.dlogits.row(t);
    for (std::size_t j = 0; j < pr.size(); ++j) dl[j] += pr[j] * (dg[j] - inner);
  }
}

void check_weights(std::span<const TokenId> targets, std::span<const Real> weights,
                   std::size_t t_len) {
  if (targets.size() != t_len || weights.size() != t_len)
    throw ShapeError("head backward: targets/weights do not cover all positions");
}

}  // namespace

HeadGradients zero_head_gradients(const HeadParams& params, std::size_t t) {
  HeadGradients g;
  g.params = zero_head(params.d_model(), params.d_hidden(), params.vocab());
  g.h = Matrix(t, params.d_model());
  return g;
}

void slow_backward(const HeadParams& p, const PositionTape& tape, std::span<const TokenId> targets,
                   std::span<const Real> weights, HeadGradients& out) {
  const std::size_t t_len = tape.h.rows();
  check_weights(targets, weights, t_len);
  SlowAdjoint adj(t_len, p.d_model(), p.d_hidden(), p.vocab());
  for (std::size_t t = 0; t < t_len; ++t) {
    auto dl = adj.dlogits.row(t);
    auto pr = tape.probs.row(t);
    for (std::size_t j = 0; j < dl.size(); ++j) dl[j] = weights[t] * pr[j];
    dl[targets[t]] -= weights[t];
  }
  slow_forward_reverse(p, tape, adj, out);
}

void fast_backward(const HeadParams& p, const StepSizes& steps, const Decays* decays,
                   const StreamState* state, const PositionTape& tape, const PositionGrads& g,
                   const FastPass& fast, std::span<const TokenId> targets,
                   std::span<const Real> weights, const FastBackwardOptions& options,
                   HeadGradients& out) {
  const std::size_t t_len = tape.h.rows(), d = p.d_model(), dh = p.d_hidden(), nv = p.vocab();
  check_weights(targets, weights, t_len);
  const FastTape& ft = fast.tape;
  const FastMask mask = steps.mask;
  const bool second = options.second_order;

  SlowAdjoint adj(t_len, d, dh, nv);
  GradAdjoint ga(t_len, d, dh, nv);
  std::array<Matrix, kHeadTensorCount> dstate;

  // Vector tensors: fast value_t = base - alpha * term_t, term = state + exclusive cumsum(G).
  auto vector_reverse = [&](HeadTensor t, const Matrix& dfast, Matrix& dgrad) {
    const std::size_t i = index_of(t);
    if (!mask.has(t)) return;
    const Real alpha = steps[t];
    out.alpha[i] -= frobenius(dfast, ft.update_terms[i]);
    const Matrix dterm = scaled(dfast, -alpha);
    if (second) add_inplace(dgrad, reverse_exclusive_cumsum_rows(dterm));
    if (state) {
      Vector s = column_sums(dterm);
      const std::size_t n = s.size();
      dstate[i] = Matrix(1, n, std::move(s));
    }
  };
  // Matrix tensors: fast output -= alpha * LinAttn(query, key, value; state).
  auto matrix_reverse = [&](HeadTensor t, const Matrix& dout, const Matrix& query,
                            const Matrix& key, const Matrix& value, Matrix& dquery,
                            Matrix& dkey, Matrix& dvalue) {
    const std::size_t i = index_of(t);
    if (!mask.has(t)) return;
    const Real alpha = steps[t];
    out.alpha[i] -= frobenius(dout, ft.update_terms[i]);
    std::optional<KVState> init;
    if (state) init = KVState{ft.state_offsets[i]};
    const auto r = causal_linear_attention_backward(query, key, value, init, scaled(dout, -alpha),
                                                    options.chunk_size);
    add_inplace(dquery, r.dq);
    if (second) {
      add_inplace(dkey, r.dk);
      add_inplace(dvalue, r.dv);
    }
    if (state) dstate[i] = r.dinit;
  };

  // logits' = u' E - alpha_E A_E + c - alpha_c term_c
  Matrix dlogits(t_len, nv);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto dl = dlogits.row(t);
    auto pr = ft.probs.row(t);
    for (std::size_t j = 0; j < nv; ++j) dl[j] = weights[t] * pr[j];
    dl[targets[t]] -= weights[t];
  }
  add_matmul_tn(out.params.E, ft.u, dlogits);
  add_colsum(out.params.c, dlogits);
  Matrix du_fast = matmul_nt(dlogits, p.E);
  vector_reverse(HeadTensor::c, dlogits, ga.dg_logits);
  matrix_reverse(HeadTensor::E, dlogits, ft.u, tape.u, g.g_logits, du_fast, adj.du, ga.dg_logits);

  // u' = xhat' * gain' + bias'
  Matrix dgain(t_len, d), dbias = du_fast, dpre(t_len, d);
  Vector dxhat(d);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto du = du_fast.row(t);
    auto xr = ft.xhat.row(t);
    auto gr = ft.gain.row(t);
    auto dg = dgain.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = du[j] * gr[j];
      dg[j] = du[j] * xr[j];
    }
    layernorm_row_bwd(xr, ft.inv_std[t], dxhat, dpre.row(t));
  }
  add_colsum(out.params.ln_gain, dgain);
  add_colsum(out.params.ln_bias, dbias);
  vector_reverse(HeadTensor::ln_gain, dgain, ga.dg_lngain);
  vector_reverse(HeadTensor::ln_bias, dbias, ga.dg_u);

  // pre' = v' W - alpha_W A_W + b - alpha_b term_b
  add_colsum(out.params.b, dpre);
  vector_reverse(HeadTensor::b, dpre, ga.dg_o);
  add_matmul_tn(out.params.W, ft.v, dpre);
  Matrix dv_fast = matmul_nt(dpre, p.W);
  matrix_reverse(HeadTensor::W, dpre, ft.v, tape.v, g.g_o, dv_fast, adj.dv, ga.dg_o);

  Matrix dz_fast = dv_fast;
  {
    auto dz = dz_fast.flat();
    auto z = ft.z.flat();
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= z[i] > 0 ? 2 * z[i] : Real(0);
  }

  // z' = h U - alpha_U A_U + a - alpha_a term_a
  add_matmul_tn(out.params.U, tape.h, dz_fast);
  add_colsum(out.params.a, dz_fast);
  add_matmul(out.h, dz_fast, p.U.transposed());
  vector_reverse(HeadTensor::a, dz_fast, ga.dg_z);
  matrix_reverse(HeadTensor::U, dz_fast, tape.h, tape.h, g.g_z, out.h, out.h, ga.dg_z);

  // Decay enters only through the effective state gamma * history + recent.
  if (state && decays) {
    for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
      const auto t = static_cast<HeadTensor>(i);
      if (!mask.has(t) || dstate[i].empty()) continue;
      const Real gamma = decays->value(t);
      out.decay_raw[i] += frobenius(dstate[i], state->history[i]) * gamma * (1 - gamma);
    }
  }

  if (second) position_grads_reverse(p, tape, g, ga, adj, out);
  slow_forward_reverse(p, tape, adj, out);
}

}  // namespace fwl
