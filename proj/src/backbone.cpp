#include "fwl/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace fwl {

void BackboneConfig::validate() const {
  auto need = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw ConfigError(std::string("backbone config: ") + field + " " + why);
  };
  need(vocab_size > 0, "vocab_size", "must be positive");
  need(d_model > 0, "d_model", "must be positive");
  need(n_layers > 0, "n_layers", "must be positive");
  need(n_heads > 0, "n_heads", "must be positive");
  need(d_ff > 0, "d_ff", "must be positive");
  need(max_seq_len > 0, "max_seq_len", "must be positive");
  need(d_model % n_heads == 0, "n_heads",
       "must divide d_model (" + std::to_string(d_model) + " % " + std::to_string(n_heads) +
           " != 0)");
}

bool SegmentMemory::empty() const { return length() == 0; }

std::size_t SegmentMemory::length() const { return layers.empty() ? 0 : layers.front().rows(); }

namespace {

Matrix init_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return random_matrix(fan_in, fan_out, rng, Real(1) / std::sqrt(static_cast<Real>(fan_in)));
}

BackboneParams make_params(const BackboneConfig& c, Rng* rng) {
  const std::size_t d = c.d_model;
  auto weight = [&](std::size_t in, std::size_t out) {
    return rng ? init_weight(in, out, *rng) : Matrix(in, out);
  };
  const Real one = rng ? Real(1) : Real(0);
  BackboneParams p;
  p.tok_emb = rng ? random_matrix(c.vocab_size, d, *rng, Real(0.02)) : Matrix(c.vocab_size, d);
  p.pos_emb = rng ? random_matrix(c.max_seq_len, d, *rng, Real(0.02)) : Matrix(c.max_seq_len, d);
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.ln1_gain.assign(d, one);
    l.ln1_bias.assign(d, 0);
    l.wq = weight(d, d);
    l.wk = weight(d, d);
    l.wv = weight(d, d);
    l.wo = weight(d, d);
    l.bq.assign(d, 0);
    l.bk.assign(d, 0);
    l.bv.assign(d, 0);
    l.bo.assign(d, 0);
    l.ln2_gain.assign(d, one);
    l.ln2_bias.assign(d, 0);
    l.w1 = weight(d, c.d_ff);
    l.b1.assign(c.d_ff, 0);
    l.w2 = weight(c.d_ff, d);
    l.b2.assign(d, 0);
  }
  p.lnf_gain.assign(d, one);
  p.lnf_bias.assign(d, 0);
  return p;
}

// y = LN(x) rowwise with per-feature gain/bias; stores xhat and 1/std.
void layernorm_rows(const Matrix& x, std::span<const Real> gain, std::span<const Real> bias,
                    Matrix& xhat, Vector& inv_std, Matrix& y) {
  xhat = Matrix(x.rows(), x.cols());
  y = Matrix(x.rows(), x.cols());
  inv_std.assign(x.rows(), 0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    inv_std[i] = layernorm_row(x.row(i), xhat.row(i));
    auto xr = xhat.row(i);
    auto yr = y.row(i);
    for (std::size_t j = 0; j < xr.size(); ++j) yr[j] = gain[j] * xr[j] + bias[j];
  }
}

// Backward of the rowwise LayerNorm; accumulates gain/bias grads and writes dx.
void layernorm_rows_bwd(const Matrix& xhat, const Vector& inv_std, std::span<const Real> gain,
                        const Matrix& dy, std::span<Real> dgain, std::span<Real> dbias, Matrix& dx) {
  dx = Matrix(xhat.rows(), xhat.cols());
  Vector dxhat(xhat.cols());
  for (std::size_t i = 0; i < xhat.rows(); ++i) {
    auto xr = xhat.row(i);
    auto dr = dy.row(i);
    for (std::size_t j = 0; j < xr.size(); ++j) {
      dgain[j] += dr[j] * xr[j];
      dbias[j] += dr[j];
      dxhat[j] = dr[j] * gain[j];
    }
    layernorm_row_bwd(xr, inv_std[i], dxhat, dx.row(i));
  }
}

void add_column_sums(std::span<Real> acc, const Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc[j] += r[j];
  }
}

Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  if (top.rows() == 0) return bottom;
  Matrix out(top.rows() + bottom.rows(), bottom.cols());
  std::copy(top.flat().begin(), top.flat().end(), out.flat().begin());
  std::copy(bottom.flat().begin(), bottom.flat().end(),
            out.flat().begin() + static_cast<std::ptrdiff_t>(top.size()));
  return out;
}

void check_tokens(const BackboneConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("encode: empty token sequence");
  if (tokens.size() > c.max_seq_len)
    throw InputError("encode: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  for (TokenId t : tokens)
    if (t >= c.vocab_size)
      throw InputError("encode: token id " + std::to_string(t) + " >= vocab_size " +
                       std::to_string(c.vocab_size));
}

void check_memory(const BackboneConfig& c, const SegmentMemory& memory) {
  if (memory.layers.empty()) return;
  if (memory.layers.size() != c.n_layers)
    throw ShapeError("segment memory has " + std::to_string(memory.layers.size()) +
                     " layers, model has " + std::to_string(c.n_layers));
  for (const auto& m : memory.layers)
    if (m.cols() != c.d_model || m.rows() != memory.layers.front().rows())
      throw ShapeError("segment memory layer shape " + m.shape_string() + " is inconsistent");
}

}  // namespace

BackboneParams init_backbone(const BackboneConfig& config) {
  config.validate();
  Rng rng(config.seed);
  return make_params(config, &rng);
}

BackboneParams zero_backbone(const BackboneConfig& config) { return make_params(config, nullptr); }

std::size_t backbone_parameter_count(const BackboneConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 2 * d + 4 * d * d + 4 * d + 2 * d + d * c.d_ff + c.d_ff +
                                c.d_ff * d + d;
  return c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d;
}

TapedSegment encode_segment_taped(const BackboneConfig& c, const BackboneParams& p,
                                  std::span<const TokenId> tokens, const SegmentMemory& memory) {
  check_tokens(c, tokens);
  check_memory(c, memory);
  const std::size_t t_len = tokens.size(), d = c.d_model, nh = c.n_heads, hd = c.head_dim();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));

  TapedSegment out;
  out.tape.tokens.assign(tokens.begin(), tokens.end());
  out.tape.layers.resize(c.n_layers);

  Matrix x(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto xr = x.row(t);
    auto te = p.tok_emb.row(tokens[t]);
    auto pe = p.pos_emb.row(t);
    for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
  }

  if (c.memory_len > 0) out.memory.layers.resize(c.n_layers);

  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const LayerParams& l = p.layers[li];
    auto& tl = out.tape.layers[li];
    const Matrix mem = memory.layers.empty() ? Matrix(0, d) : memory.layers[li];
    const std::size_t m_len = mem.rows();
    const std::size_t total = m_len + t_len;
    tl.mem_rows = m_len;

    const Matrix full = stack_rows(mem, x);
    if (c.memory_len > 0) {
      const std::size_t keep = std::min(c.memory_len, total);
      out.memory.layers[li] = full.slice_rows(total - keep, total);
    }

    layernorm_rows(full, l.ln1_gain, l.ln1_bias, tl.ln1_xhat, tl.ln1_inv_std, tl.attn_in);
    tl.q = matmul(tl.attn_in.slice_rows(m_len, total), l.wq);
    add_row_broadcast(tl.q, l.bq);
    tl.k = matmul(tl.attn_in, l.wk);
    add_row_broadcast(tl.k, l.bk);
    tl.v = matmul(tl.attn_in, l.wv);
    add_row_broadcast(tl.v, l.bv);

    tl.context = Matrix(t_len, d);
    tl.probs.assign(nh, Matrix(t_len, total));
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t off = h * hd;
      Matrix& pr = tl.probs[h];
      Vector scores(total);
      for (std::size_t t = 0; t < t_len; ++t) {
        const std::size_t visible = m_len + t + 1;
        auto qt = tl.q.row(t).subspan(off, hd);
        for (std::size_t j = 0; j < visible; ++j)
          scores[j] = scale * dot(qt, tl.k.row(j).subspan(off, hd));
        auto prow = pr.row(t);
        softmax_row(std::span<const Real>(scores).first(visible), prow.first(visible));
        auto ctx = tl.context.row(t).subspan(off, hd);
        for (std::size_t j = 0; j < visible; ++j) axpy(prow[j], tl.v.row(j).subspan(off, hd), ctx);
      }
    }

    Matrix attn_out = matmul(tl.context, l.wo);
    add_row_broadcast(attn_out, l.bo);
    add_inplace(x, attn_out);

    layernorm_rows(x, l.ln2_gain, l.ln2_bias, tl.ln2_xhat, tl.ln2_inv_std, tl.ff_in);
    tl.ff_pre = matmul(tl.ff_in, l.w1);
    add_row_broadcast(tl.ff_pre, l.b1);
    tl.ff_act = tl.ff_pre;
    for (auto& v : tl.ff_act.flat()) v = gelu(v);
    Matrix ff_out = matmul(tl.ff_act, l.w2);
    add_row_broadcast(ff_out, l.b2);
    add_inplace(x, ff_out);
  }

  layernorm_rows(x, p.lnf_gain, p.lnf_bias, out.tape.lnf_xhat, out.tape.lnf_inv_std, out.hidden);
  return out;
}

SegmentOutput encode_segment(const BackboneConfig& config, const BackboneParams& params,
                             std::span<const TokenId> tokens, const SegmentMemory& memory) {
  auto taped = encode_segment_taped(config, params, tokens, memory);
  return {std::move(taped.hidden), std::move(taped.memory)};
}

Matrix encode(const BackboneConfig& config, const BackboneParams& params,
              std::span<const TokenId> tokens) {
  return encode_segment(config, params, tokens, SegmentMemory{}).hidden;
}

void backbone_backward(const BackboneConfig& c, const BackboneParams& p, const BackboneTape& tape,
                       const Matrix& dhidden, BackboneParams& g) {
  const std::size_t t_len = tape.tokens.size(), d = c.d_model, nh = c.n_heads, hd = c.head_dim();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  if (dhidden.rows() != t_len || dhidden.cols() != d)
    throw ShapeError("backbone_backward: upstream gradient " + dhidden.shape_string());

  Matrix dx;
  layernorm_rows_bwd(tape.lnf_xhat, tape.lnf_inv_std, p.lnf_gain, dhidden, g.lnf_gain, g.lnf_bias,
                     dx);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const LayerParams& l = p.layers[li];
    LayerParams& gl = g.layers[li];
    const auto& tl = tape.layers[li];
    const std::size_t m_len = tl.mem_rows, total = m_len + t_len;

    // Feed-forward block: x2 = x1 + gelu(LN2(x1) W1 + b1) W2 + b2
    add_matmul_tn(gl.w2, tl.ff_act, dx);
    add_column_sums(gl.b2, dx);
    Matrix dact = matmul_nt(dx, l.w2);
    for (std::size_t i = 0; i < dact.size(); ++i) dact.flat()[i] *= gelu_grad(tl.ff_pre.flat()[i]);
    add_matmul_tn(gl.w1, tl.ff_in, dact);
    add_column_sums(gl.b1, dact);
    Matrix dff_in = matmul_nt(dact, l.w1);
    Matrix dln2;
    layernorm_rows_bwd(tl.ln2_xhat, tl.ln2_inv_std, l.ln2_gain, dff_in, gl.ln2_gain, gl.ln2_bias,
                       dln2);
    add_inplace(dx, dln2);

    // Attention block: x1 = x + softmax(q k^T) v Wo + bo
    add_matmul_tn(gl.wo, tl.context, dx);
    add_column_sums(gl.bo, dx);
    const Matrix dctx = matmul_nt(dx, l.wo);
    Matrix dq(t_len, d), dk(total, d), dv(total, d);
    Vector dprob(total);
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t off = h * hd;
      const Matrix& pr = tl.probs[h];
      for (std::size_t t = 0; t < t_len; ++t) {
        const std::size_t visible = m_len + t + 1;
        auto dct = dctx.row(t).subspan(off, hd);
        auto prow = pr.row(t);
        Real weighted = 0;
        for (std::size_t j = 0; j < visible; ++j) {
          dprob[j] = dot(dct, tl.v.row(j).subspan(off, hd));
          weighted += prow[j] * dprob[j];
          axpy(prow[j], dct, dv.row(j).subspan(off, hd));
        }
        auto dqt = dq.row(t).subspan(off, hd);
        auto qt = tl.q.row(t).subspan(off, hd);
        for (std::size_t j = 0; j < visible; ++j) {
          const Real ds = prow[j] * (dprob[j] - weighted) * scale;
          axpy(ds, tl.k.row(j).subspan(off, hd), dqt);
          axpy(ds, qt, dk.row(j).subspan(off, hd));
        }
      }
    }

    const Matrix attn_in_cur = tl.attn_in.slice_rows(m_len, total);
    add_matmul_tn(gl.wq, attn_in_cur, dq);
    add_column_sums(gl.bq, dq);
    add_matmul_tn(gl.wk, tl.attn_in, dk);
    add_column_sums(gl.bk, dk);
    add_matmul_tn(gl.wv, tl.attn_in, dv);
    add_column_sums(gl.bv, dv);

    Matrix dattn_in = matmul_nt(dk, l.wk);
    add_inplace(dattn_in, matmul_nt(dv, l.wv));
    const Matrix dq_in = matmul_nt(dq, l.wq);
    for (std::size_t t = 0; t < t_len; ++t) axpy(1, dq_in.row(t), dattn_in.row(m_len + t));

    Matrix dfull;
    layernorm_rows_bwd(tl.ln1_xhat, tl.ln1_inv_std, l.ln1_gain, dattn_in, gl.ln1_gain,
                       gl.ln1_bias, dfull);
    // Memory rows receive no gradient.
    for (std::size_t t = 0; t < t_len; ++t) axpy(1, dfull.row(m_len + t), dx.row(t));
  }

  for (std::size_t t = 0; t < t_len; ++t) {
    axpy(1, dx.row(t), g.tok_emb.row(tape.tokens[t]));
    axpy(1, dx.row(t), g.pos_emb.row(t));
  }
}

std::uint64_t backbone_forward_flops(const BackboneConfig& c, std::size_t t, std::size_t m) {
  const std::uint64_t d = c.d_model, ff = c.d_ff, total = m + t;
  std::uint64_t f = 0;
  // q for current rows, k/v for memory + current rows, output projection
  f += 2 * t * d * d + 2 * 2 * total * d * d + 2 * t * d * d;
  // scores and weighted values over visible keys, all heads
  std::uint64_t visible = 0;
  for (std::uint64_t i = 0; i < t; ++i) visible += m + i + 1;
  f += 2 * 2 * visible * d;
  f += 2 * 2 * t * d * ff;
  return f * c.n_layers;
}

}  // namespace fwl
