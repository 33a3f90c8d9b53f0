#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fwl/numerics.hpp"

namespace fwl {

using TokenId = std::uint32_t;

struct BackboneConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;
  std::size_t memory_len = 0;  // 0 disables segment recurrence
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
};

struct LayerParams {
  Vector ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;
  Vector bq, bk, bv, bo;
  Vector ln2_gain, ln2_bias;
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
};

struct BackboneParams {
  Matrix tok_emb;  // vocab x d_model
  Matrix pos_emb;  // max_seq_len x d_model
  std::vector<LayerParams> layers;
  Vector lnf_gain, lnf_bias;

  // Visits every tensor as (name, flat span) in a fixed order.
  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("backbone.tok_emb", self.tok_emb.flat());
    f("backbone.pos_emb", self.pos_emb.flat());
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "backbone.layer" + std::to_string(i) + ".";
      f(p + "ln1_gain", std::span(l.ln1_gain));
      f(p + "ln1_bias", std::span(l.ln1_bias));
      f(p + "wq", l.wq.flat());
      f(p + "bq", std::span(l.bq));
      f(p + "wk", l.wk.flat());
      f(p + "bk", std::span(l.bk));
      f(p + "wv", l.wv.flat());
      f(p + "bv", std::span(l.bv));
      f(p + "wo", l.wo.flat());
      f(p + "bo", std::span(l.bo));
      f(p + "ln2_gain", std::span(l.ln2_gain));
      f(p + "ln2_bias", std::span(l.ln2_bias));
      f(p + "w1", l.w1.flat());
      f(p + "b1", std::span(l.b1));
      f(p + "w2", l.w2.flat());
      f(p + "b2", std::span(l.b2));
    }
    f("backbone.lnf_gain", std::span(self.lnf_gain));
    f("backbone.lnf_bias", std::span(self.lnf_bias));
  }
};

// Per-layer hidden states cached from the previous segment. Treated as a
// constant: no gradient flows into it.
struct SegmentMemory {
  std::vector<Matrix> layers;

  bool empty() const;
  std::size_t length() const;
};

BackboneParams init_backbone(const BackboneConfig& config);
// All-zero tensors with the shapes implied by `config`.
BackboneParams zero_backbone(const BackboneConfig& config);
std::size_t backbone_parameter_count(const BackboneConfig& config);

// Context vectors h_1..h_T (after the final LayerNorm).
Matrix encode(const BackboneConfig& config, const BackboneParams& params,
              std::span<const TokenId> tokens);

struct SegmentOutput {
  Matrix hidden;
  SegmentMemory memory;
};

SegmentOutput encode_segment(const BackboneConfig& config, const BackboneParams& params,
                             std::span<const TokenId> tokens, const SegmentMemory& memory);

// Activations needed for the backward pass of one segment.
struct BackboneTape {
  struct Layer {
    std::size_t mem_rows = 0;
    Matrix ln1_xhat;  // (M+T) x d
    Vector ln1_inv_std;
    Matrix attn_in;  // LayerNorm output, (M+T) x d
    Matrix q, k, v;  // q: T x d; k, v: (M+T) x d
    std::vector<Matrix> probs;  // per head, T x (M+T)
    Matrix context;             // T x d
    Matrix ln2_xhat;
    Vector ln2_inv_std;
    Matrix ff_in;   // LayerNorm output, T x d
    Matrix ff_pre;  // T x d_ff
    Matrix ff_act;  // T x d_ff
  };
  std::vector<TokenId> tokens;
  std::vector<Layer> layers;
  Matrix lnf_xhat;
  Vector lnf_inv_std;
};

struct TapedSegment {
  Matrix hidden;
  SegmentMemory memory;
  BackboneTape tape;
};

TapedSegment encode_segment_taped(const BackboneConfig& config, const BackboneParams& params,
                                  std::span<const TokenId> tokens, const SegmentMemory& memory);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(hidden).
void backbone_backward(const BackboneConfig& config, const BackboneParams& params,
                       const BackboneTape& tape, const Matrix& dhidden, BackboneParams& grads);

// Analytic multiply-add count (x2) for encoding one segment of length t with
// m memory rows.
std::uint64_t backbone_forward_flops(const BackboneConfig& config, std::size_t t, std::size_t m);

}  // namespace fwl
