#include "fwl/head.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fwl {

HeadTensor head_tensor_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kHeadTensorCount; ++i)
    if (kHeadTensorNames[i] == name) return static_cast<HeadTensor>(i);
  throw ConfigError("unknown head tensor '" + std::string(name) + "'");
}

FastMask FastMask::parse(std::string_view spec) {
  if (spec == "all") return all();
  if (spec == "none" || spec.empty()) return none();
  if (spec == "bias-only") return bias_only();
  if (spec == "vectors") return vectors_only();
  if (spec == "matrices") return matrices_only();
  FastMask m;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = std::min(spec.find(',', pos), spec.size());
    m.set(head_tensor_from_name(spec.substr(pos, comma - pos)), true);
    pos = comma + 1;
  }
  return m;
}

void FastMask::set(HeadTensor t, bool on) {
  const auto bit = static_cast<std::uint8_t>(1u << index_of(t));
  bits_ = on ? static_cast<std::uint8_t>(bits_ | bit) : static_cast<std::uint8_t>(bits_ & ~bit);
}

std::string FastMask::to_string() const {
  if (*this == all()) return "all";
  if (empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
    if (!has(static_cast<HeadTensor>(i))) continue;
    if (!out.empty()) out += ',';
    out += kHeadTensorNames[i];
  }
  return out;
}

void HeadParams::validate() const {
  const std::size_t d = d_model(), dh = d_hidden(), nv = vocab();
  const bool ok = a.size() == dh && W.rows() == dh && W.cols() == d && b.size() == d &&
                  ln_gain.size() == d && ln_bias.size() == d && E.rows() == d && c.size() == nv;
  if (!ok) throw ShapeError("head parameters have inconsistent shapes");
}

std::span<Real> HeadParams::tensor(HeadTensor t) {
  switch (t) {
    case HeadTensor::U: return U.flat();
    case HeadTensor::a: return a;
    case HeadTensor::W: return W.flat();
    case HeadTensor::b: return b;
    case HeadTensor::ln_gain: return ln_gain;
    case HeadTensor::ln_bias: return ln_bias;
    case HeadTensor::E: return E.flat();
    case HeadTensor::c: return c;
  }
  return {};
}

std::span<const Real> HeadParams::tensor(HeadTensor t) const {
  return const_cast<HeadParams*>(this)->tensor(t);
}

std::pair<std::size_t, std::size_t> HeadParams::tensor_shape(HeadTensor t) const {
  switch (t) {
    case HeadTensor::U: return {U.rows(), U.cols()};
    case HeadTensor::W: return {W.rows(), W.cols()};
    case HeadTensor::E: return {E.rows(), E.cols()};
    default: return {1, tensor(t).size()};
  }
}

HeadParams init_head(std::size_t d_model, std::size_t d_hidden, std::size_t vocab, Rng& rng) {
  HeadParams p;
  p.U = random_matrix(d_model, d_hidden, rng, Real(1) / std::sqrt(static_cast<Real>(d_model)));
  p.a.assign(d_hidden, 0);
  p.W = random_matrix(d_hidden, d_model, rng, Real(1) / std::sqrt(static_cast<Real>(d_hidden)));
  p.b.assign(d_model, 0);
  p.ln_gain.assign(d_model, 1);
  p.ln_bias.assign(d_model, 0);
  p.E = random_matrix(d_model, vocab, rng, Real(1) / std::sqrt(static_cast<Real>(d_model)));
  p.c.assign(vocab, 0);
  return p;
}

HeadParams zero_head(std::size_t d_model, std::size_t d_hidden, std::size_t vocab) {
  HeadParams p;
  p.U = Matrix(d_model, d_hidden);
  p.a.assign(d_hidden, 0);
  p.W = Matrix(d_hidden, d_model);
  p.b.assign(d_model, 0);
  p.ln_gain.assign(d_model, 0);
  p.ln_bias.assign(d_model, 0);
  p.E = Matrix(d_model, vocab);
  p.c.assign(vocab, 0);
  return p;
}

StepSizes StepSizes::uniform(Real value, FastMask mask) {
  StepSizes s;
  s.alpha.fill(value);
  s.mask = mask;
  return s;
}

Decays Decays::uniform(Real decay) {
  Decays d;
  d.raw.fill(std::log(decay / (Real(1) - decay)));
  return d;
}

Real Decays::value(HeadTensor t) const {
  return Real(1) / (Real(1) + std::exp(-raw[index_of(t)]));
}

StreamState StreamState::zeros(const HeadParams& params, FastMask mask) {
  StreamState s;
  for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
    const auto t = static_cast<HeadTensor>(i);
    if (!mask.has(t)) continue;
    const auto [r, c] = params.tensor_shape(t);
    s.history[i] = Matrix(r, c);
    s.recent[i] = Matrix(r, c);
  }
  return s;
}

bool StreamState::covers(FastMask mask, const HeadParams& params) const {
  for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
    const auto t = static_cast<HeadTensor>(i);
    if (!mask.has(t)) continue;
    const auto [r, c] = params.tensor_shape(t);
    for (const Matrix* m : {&history[i], &recent[i]})
      if (m->rows() != r || m->cols() != c) return false;
  }
  return true;
}

Matrix StreamState::effective(HeadTensor t, const Decays& decays) const {
  const std::size_t i = index_of(t);
  Matrix out = recent[i];
  axpy(decays.value(t), history[i].flat(), out.flat());
  return out;
}

namespace {

void check_head_input(const HeadParams& p, const Matrix& h, std::span<const TokenId> targets) {
  if (h.cols() != p.d_model())
    throw ShapeError("head input " + h.shape_string() + " does not match d_model " +
                     std::to_string(p.d_model()));
  if (!targets.empty() && targets.size() != h.rows())
    throw ShapeError("head: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(h.rows()) + " positions");
  for (TokenId y : targets)
    if (y >= p.vocab())
      throw IndexError("head: target " + std::to_string(y) + " out of range for vocab " +
                       std::to_string(p.vocab()));
}

// Rows of `m` offset by -alpha * (state + exclusive prefix sum of `g`).
Matrix vector_update_term(const Matrix& g, const Matrix* state) {
  Matrix term = exclusive_cumsum_rows(g);
  if (state)
    for (std::size_t t = 0; t < term.rows(); ++t) axpy(1, state->flat(), term.row(t));
  return term;
}

// Adds (base - alpha * term_t) to row t.
void add_fast_vector(Matrix& y, std::span<const Real> base, Real alpha, const Matrix* term) {
  for (std::size_t t = 0; t < y.rows(); ++t) {
    auto yr = y.row(t);
    if (term) {
      auto tr = term->row(t);
      for (std::size_t j = 0; j < yr.size(); ++j) yr[j] += base[j] - alpha * tr[j];
    } else {
      for (std::size_t j = 0; j < yr.size(); ++j) yr[j] += base[j];
    }
  }
}

void subtract_scaled(Matrix& y, Real alpha, const Matrix& x) {
  auto yd = y.flat();
  auto xd = x.flat();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] -= alpha * xd[i];
}

void softmax_losses(const Matrix& logits, std::span<const TokenId> targets, Matrix& probs,
                    Vector& losses) {
  probs = Matrix(logits.rows(), logits.cols());
  losses.clear();
  if (!targets.empty()) losses.resize(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const Real lse = softmax_row(logits.row(t), probs.row(t));
    if (!targets.empty()) losses[t] = lse - logits(t, targets[t]);
  }
}

}  // namespace

PositionTape slow_forward(const HeadParams& p, const Matrix& h, std::span<const TokenId> targets) {
  check_head_input(p, h, targets);
  PositionTape tape;
  tape.h = h;
  tape.z = matmul(h, p.U);
  add_row_broadcast(tape.z, p.a);
  tape.v = tape.z;
  for (auto& x : tape.v.flat()) x = x > 0 ? x * x : Real(0);
  tape.o = matmul(tape.v, p.W);

  const std::size_t t_len = h.rows(), d = p.d_model();
  Matrix pre = tape.o;
  add_row_broadcast(pre, p.b);
  tape.xhat = Matrix(t_len, d);
  tape.inv_std.assign(t_len, 0);
  tape.u = Matrix(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    tape.inv_std[t] = layernorm_row(pre.row(t), tape.xhat.row(t));
    auto xr = tape.xhat.row(t);
    auto ur = tape.u.row(t);
    for (std::size_t j = 0; j < d; ++j) ur[j] = xr[j] * p.ln_gain[j] + p.ln_bias[j];
  }
  tape.logits = matmul(tape.u, p.E);
  add_row_broadcast(tape.logits, p.c);
  softmax_losses(tape.logits, targets, tape.probs, tape.losses);
  return tape;
}

PositionGrads per_position_grads(const HeadParams& p, const PositionTape& tape,
                                 std::span<const TokenId> targets) {
  const std::size_t t_len = tape.h.rows(), d = p.d_model();
  if (targets.size() != t_len)
    throw ShapeError("per_position_grads: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(t_len) + " positions");
  PositionGrads g;
  g.g_logits = tape.probs;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (targets[t] >= p.vocab()) throw IndexError("per_position_grads: target out of range");
    g.g_logits(t, targets[t]) -= 1;
  }
  g.g_u = matmul_nt(g.g_logits, p.E);
  g.g_lngain = Matrix(t_len, d);
  g.g_o = Matrix(t_len, d);
  Vector gx(d);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto gu = g.g_u.row(t);
    auto xr = tape.xhat.row(t);
    auto gg = g.g_lngain.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      gg[j] = gu[j] * xr[j];
      gx[j] = gu[j] * p.ln_gain[j];
    }
    layernorm_row_bwd(xr, tape.inv_std[t], gx, g.g_o.row(t));
  }
  g.g_v = matmul_nt(g.g_o, p.W);
  g.g_z = g.g_v;
  auto gz = g.g_z.flat();
  auto z = tape.z.flat();
  for (std::size_t i = 0; i < gz.size(); ++i) gz[i] *= z[i] > 0 ? 2 * z[i] : Real(0);
  return g;
}

PositionGrads zero_position_grads(const HeadParams& p, std::size_t t) {
  const std::size_t d = p.d_model(), dh = p.d_hidden(), nv = p.vocab();
  return PositionGrads{Matrix(t, nv), Matrix(t, d), Matrix(t, d),
                       Matrix(t, d),  Matrix(t, dh), Matrix(t, dh)};
}

FastPass fast_forward(const HeadParams& p, const StepSizes& steps, const PositionTape& tape,
                      const PositionGrads& grads, std::span<const TokenId> targets,
                      const StreamState* state, const Decays* decays,
                      const FastOptions& options) {
  const Matrix& h = tape.h;
  check_head_input(p, h, targets);
  const FastMask mask = steps.mask;
  if (state && !state->covers(mask, p))
    throw StateError("fast_forward: stream state does not match the masked head tensors");
  if (state && !decays) throw StateError("fast_forward: stream state requires decays");
  if (grads.g_z.rows() != h.rows())
    throw ShapeError("fast_forward: gradients cover " + std::to_string(grads.g_z.rows()) +
                     " positions, tape has " + std::to_string(h.rows()));

  const std::size_t t_len = h.rows(), d = p.d_model();
  FastPass out;
  FastTape& ft = out.tape;
  auto offset = [&](HeadTensor t) -> const Matrix* {
    const std::size_t i = index_of(t);
    if (!state) return nullptr;
    ft.state_offsets[i] = state->effective(t, *decays);
    return &ft.state_offsets[i];
  };
  auto kv_init = [&](HeadTensor t) -> std::optional<KVState> {
    const Matrix* off = offset(t);
    if (!off) return std::nullopt;
    return KVState{*off};
  };
  auto vector_term = [&](HeadTensor t, const Matrix& g) -> const Matrix* {
    if (!mask.has(t)) return nullptr;
    ft.update_terms[index_of(t)] = vector_update_term(g, offset(t));
    return &ft.update_terms[index_of(t)];
  };

  // z' = h U' + a'
  ft.z = matmul(h, p.U);
  if (mask.has(HeadTensor::U)) {
    auto r = chunked_causal_linear_attention(h, h, grads.g_z, options.chunk_size,
                                             kv_init(HeadTensor::U));
    subtract_scaled(ft.z, steps[HeadTensor::U], r.output);
    ft.update_terms[index_of(HeadTensor::U)] = std::move(r.output);
  }
  add_fast_vector(ft.z, p.a, steps[HeadTensor::a], vector_term(HeadTensor::a, grads.g_z));

  ft.v = ft.z;
  for (auto& x : ft.v.flat()) x = x > 0 ? x * x : Real(0);

  // o' = v' W' + b'
  Matrix pre = matmul(ft.v, p.W);
  if (mask.has(HeadTensor::W)) {
    auto r = chunked_causal_linear_attention(ft.v, tape.v, grads.g_o, options.chunk_size,
                                             kv_init(HeadTensor::W));
    subtract_scaled(pre, steps[HeadTensor::W], r.output);
    ft.update_terms[index_of(HeadTensor::W)] = std::move(r.output);
  }
  add_fast_vector(pre, p.b, steps[HeadTensor::b], vector_term(HeadTensor::b, grads.g_o));

  // LayerNorm statistics from the fast activations, fast gain and bias.
  const Matrix* gain_term = vector_term(HeadTensor::ln_gain, grads.g_lngain);
  const Matrix* bias_term = vector_term(HeadTensor::ln_bias, grads.g_u);
  ft.xhat = Matrix(t_len, d);
  ft.inv_std.assign(t_len, 0);
  ft.gain = Matrix(t_len, d);
  ft.u = Matrix(t_len, d);
  const Real a_gain = steps[HeadTensor::ln_gain], a_bias = steps[HeadTensor::ln_bias];
  for (std::size_t t = 0; t < t_len; ++t) {
    ft.inv_std[t] = layernorm_row(pre.row(t), ft.xhat.row(t));
    auto xr = ft.xhat.row(t);
    auto gr = ft.gain.row(t);
    auto ur = ft.u.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      gr[j] = gain_term ? p.ln_gain[j] - a_gain * (*gain_term)(t, j) : p.ln_gain[j];
      const Real bias = bias_term ? p.ln_bias[j] - a_bias * (*bias_term)(t, j) : p.ln_bias[j];
      ur[j] = xr[j] * gr[j] + bias;
    }
  }

  // logits' = u' E' + c'
  out.logits = matmul(ft.u, p.E);
  if (mask.has(HeadTensor::E)) {
    auto r = chunked_causal_linear_attention(ft.u, tape.u, grads.g_logits, options.chunk_size,
                                             kv_init(HeadTensor::E));
    subtract_scaled(out.logits, steps[HeadTensor::E], r.output);
    ft.update_terms[index_of(HeadTensor::E)] = std::move(r.output);
  }
  add_fast_vector(out.logits, p.c, steps[HeadTensor::c], vector_term(HeadTensor::c, grads.g_logits));

  softmax_losses(out.logits, targets, ft.probs, out.losses);
  return out;
}

std::array<Matrix, kHeadTensorCount> segment_gradient_sums(const PositionTape& tape,
                                                           const PositionGrads& grads,
                                                           FastMask mask) {
  std::array<Matrix, kHeadTensorCount> sums;
  auto vec = [](const Matrix& g) {
    Vector s = column_sums(g);
    const std::size_t n = s.size();
    return Matrix(1, n, std::move(s));
  };
  for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
    const auto t = static_cast<HeadTensor>(i);
    if (!mask.has(t)) continue;
    switch (t) {
      case HeadTensor::U: sums[i] = matmul_tn(tape.h, grads.g_z); break;
      case HeadTensor::a: sums[i] = vec(grads.g_z); break;
      case HeadTensor::W: sums[i] = matmul_tn(tape.v, grads.g_o); break;
      case HeadTensor::b: sums[i] = vec(grads.g_o); break;
      case HeadTensor::ln_gain: sums[i] = vec(grads.g_lngain); break;
      case HeadTensor::ln_bias: sums[i] = vec(grads.g_u); break;
      case HeadTensor::E: sums[i] = matmul_tn(tape.u, grads.g_logits); break;
      case HeadTensor::c: sums[i] = vec(grads.g_logits); break;
    }
  }
  return sums;
}

StreamState update_stream_state(const StreamState& state, const PositionGrads& grads,
                                const PositionTape& tape, const Decays& decays, FastMask mask) {
  auto sums = segment_gradient_sums(tape, grads, mask);
  StreamState next;
  for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
    const auto t = static_cast<HeadTensor>(i);
    if (!mask.has(t)) continue;
    if (state.recent[i].size() != sums[i].size())
      throw StateError("update_stream_state: state does not cover tensor " +
                       std::string(kHeadTensorNames[i]));
    next.history[i] = state.effective(t, decays);
    next.recent[i] = std::move(sums[i]);
  }
  return next;
}

TokenId sample_token(std::span<const Real> logits, Real temperature, Rng& rng) {
  if (temperature <= 0) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  Vector scaled(logits.size()), probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
  softmax_row(scaled, probs);
  const Real u = static_cast<Real>(rng.uniform());
  Real acc = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(probs.size() - 1);
}

StreamState absorb_token(const HeadParams& params, FastMask mask, const StreamState& offsets,
                         std::span<const Real> h, TokenId target) {
  Matrix hm(1, h.size(), Vector(h.begin(), h.end()));
  const TokenId targets[1] = {target};
  const PositionTape tape = slow_forward(params, hm, targets);
  const PositionGrads grads = per_position_grads(params, tape, targets);
  auto sums = segment_gradient_sums(tape, grads, mask);
  StreamState next = offsets;
  for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
    if (!mask.has(static_cast<HeadTensor>(i))) continue;
    add_inplace(next.recent[i], sums[i]);
  }
  return next;
}

GenerateResult generate_step(const HeadParams& params, const StepSizes& steps,
                             const StreamState& offsets, std::span<const Real> h,
                             Real temperature, Rng& rng) {
  Matrix hm(1, h.size(), Vector(h.begin(), h.end()));
  const PositionTape tape = slow_forward(params, hm, {});
  // A position's own gradient never enters its fast pass, so zero rows suffice.
  const PositionGrads none = zero_position_grads(params, 1);
  const Decays decays = Decays::uniform(kDefaultDecay);
  const FastPass fast = fast_forward(params, steps, tape, none, {}, &offsets, &decays);

  GenerateResult r;
  r.logits.assign(fast.logits.row(0).begin(), fast.logits.row(0).end());
  r.token = sample_token(r.logits, temperature, rng);
  r.loss = softmax_xent(r.logits, r.token).loss;
  r.offsets = absorb_token(params, steps.mask, offsets, h, r.token);
  return r;
}

HeadFlops head_flops_per_token(std::size_t d, std::size_t dh, std::size_t nv, std::size_t t,
                               std::size_t chunk, FastMask mask) {
  HeadFlops f;
  f.slow_forward = 2ull * d * dh * 2 + 8ull * d;
  f.softmax = 2ull * d * nv + 3ull * nv;
  // g_u = g_logits E^T, g_v = g_o W^T, LayerNorm and ReLU^2 backward
  f.position_backward = 2ull * nv * d + 2ull * d * dh + 8ull * d + 2ull * dh;
  std::uint64_t fast = f.slow_forward + f.softmax;
  auto attention = [&](std::size_t dk, std::size_t dv) {
    return chunked_attention_flops(t, chunk, dk, dv, false) / std::max<std::size_t>(t, 1);
  };
  if (mask.has(HeadTensor::U)) fast += attention(d, dh) + dh;
  if (mask.has(HeadTensor::W)) fast += attention(dh, d) + d;
  if (mask.has(HeadTensor::E)) fast += attention(d, nv) + nv;
  for (HeadTensor v : {HeadTensor::a, HeadTensor::b, HeadTensor::ln_gain, HeadTensor::ln_bias,
                       HeadTensor::c}) {
    if (!mask.has(v)) continue;
    const std::size_t n = v == HeadTensor::a ? dh : v == HeadTensor::c ? nv : d;
    fast += 3ull * n;
  }
  // The fast pass's own softmax is reported under `softmax`.
  f.fast_pass = fast - f.softmax;
  return f;
}

}  // namespace fwl
