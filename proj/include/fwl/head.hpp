#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "fwl/backbone.hpp"
#include "fwl/linear_attention.hpp"
#include "fwl/numerics.hpp"

namespace fwl {

// The eight tensors of the head, in canonical order.
enum class HeadTensor : std::uint8_t { U = 0, a, W, b, ln_gain, ln_bias, E, c };
inline constexpr std::size_t kHeadTensorCount = 8;
inline constexpr std::array<std::string_view, kHeadTensorCount> kHeadTensorNames = {
    "U", "a", "W", "b", "ln_gain", "ln_bias", "E", "c"};

constexpr std::size_t index_of(HeadTensor t) { return static_cast<std::size_t>(t); }
constexpr bool is_matrix(HeadTensor t) {
  return t == HeadTensor::U || t == HeadTensor::W || t == HeadTensor::E;
}
HeadTensor head_tensor_from_name(std::string_view name);

// Subset of head tensors that receive fast-weight updates.
class FastMask {
 public:
  constexpr FastMask() = default;
  constexpr explicit FastMask(std::uint8_t bits) : bits_(bits) {}

  static constexpr FastMask all() { return FastMask(0xFF); }
  static constexpr FastMask none() { return FastMask(0); }
  static constexpr FastMask bias_only() { return FastMask(1u << index_of(HeadTensor::c)); }
  static constexpr FastMask matrices_only() {
    return FastMask((1u << index_of(HeadTensor::U)) | (1u << index_of(HeadTensor::W)) |
                    (1u << index_of(HeadTensor::E)));
  }
  static constexpr FastMask vectors_only() {
    return FastMask(static_cast<std::uint8_t>(~matrices_only().bits_));
  }
  // "all", "none", "bias-only", "vectors", "matrices" or a comma list of tensor names.
  static FastMask parse(std::string_view spec);

  constexpr bool has(HeadTensor t) const { return (bits_ >> index_of(t)) & 1u; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }
  void set(HeadTensor t, bool on);
  std::string to_string() const;

  constexpr bool operator==(const FastMask&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

struct HeadParams {
  Matrix U;        // d_model x d_hidden
  Vector a;        // d_hidden
  Matrix W;        // d_hidden x d_model
  Vector b;        // d_model
  Vector ln_gain;  // d_model
  Vector ln_bias;  // d_model
  Matrix E;        // d_model x vocab
  Vector c;        // vocab

  std::size_t d_model() const { return U.rows(); }
  std::size_t d_hidden() const { return U.cols(); }
  std::size_t vocab() const { return E.cols(); }

  void validate() const;

  std::span<Real> tensor(HeadTensor t);
  std::span<const Real> tensor(HeadTensor t) const;
  // (rows, cols) of a tensor; vectors are 1 x n.
  std::pair<std::size_t, std::size_t> tensor_shape(HeadTensor t) const;

  template <class F>
  void for_each_tensor(F&& f) {
    for (std::size_t i = 0; i < kHeadTensorCount; ++i)
      f("head." + std::string(kHeadTensorNames[i]), tensor(static_cast<HeadTensor>(i)));
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    for (std::size_t i = 0; i < kHeadTensorCount; ++i)
      f("head." + std::string(kHeadTensorNames[i]), tensor(static_cast<HeadTensor>(i)));
  }
};

HeadParams init_head(std::size_t d_model, std::size_t d_hidden, std::size_t vocab, Rng& rng);
HeadParams zero_head(std::size_t d_model, std::size_t d_hidden, std::size_t vocab);

inline constexpr Real kDefaultStepSize = Real(0.01);
inline constexpr Real kDefaultDecay = Real(0.9);

// One learned step size per head tensor plus the fast-weight mask.
struct StepSizes {
  std::array<Real, kHeadTensorCount> alpha{};
  FastMask mask = FastMask::all();

  static StepSizes uniform(Real value, FastMask mask);
  Real operator[](HeadTensor t) const { return alpha[index_of(t)]; }
};

// Per-tensor decays stored as logits; the decay is sigmoid(raw).
struct Decays {
  std::array<Real, kHeadTensorCount> raw{};

  static Decays uniform(Real decay);
  Real value(HeadTensor t) const;
};

// Slow-pass activations per position (rows are positions).
struct PositionTape {
  Matrix h;         // T x d_model
  Matrix z;         // h U + a
  Matrix v;         // ReLU^2(z)
  Matrix o;         // v W
  Matrix xhat;      // normalized (o + b)
  Vector inv_std;   // per position
  Matrix u;         // LayerNorm output
  Matrix logits;    // u E + c
  Matrix probs;     // softmax(logits)
  Vector losses;    // empty when no targets were given
};

// Per-position upstream gradients of L_t alone. Full matrix gradients are the
// rank-one products h_t^T g_z_t, v_t^T g_o_t and u_t^T g_logits_t.
struct PositionGrads {
  Matrix g_logits;   // = grad of c
  Matrix g_u;        // = grad of ln_bias
  Matrix g_lngain;   // g_u * xhat
  Matrix g_o;        // = grad of b
  Matrix g_v;        // g_o W^T
  Matrix g_z;        // = grad of a
};

// Decayed accumulators of fast-weight gradients carried between segments.
// The effective accumulator of tensor k is decay_k * history_k + recent_k.
// Both parts are constants for differentiation.
struct StreamState {
  std::array<Matrix, kHeadTensorCount> history;
  std::array<Matrix, kHeadTensorCount> recent;

  static StreamState zeros(const HeadParams& params, FastMask mask);
  bool covers(FastMask mask, const HeadParams& params) const;
  Matrix effective(HeadTensor t, const Decays& decays) const;
};

// Everything from the fast pass needed to differentiate it.
struct FastTape {
  Matrix z, v, xhat, gain, u, probs;
  Vector inv_std;
  // Attention terms for U, W, E and prefix sums for a, b, ln_gain, ln_bias, c
  // (state offsets included), indexed by HeadTensor.
  std::array<Matrix, kHeadTensorCount> update_terms;
  std::array<Matrix, kHeadTensorCount> state_offsets;  // effective stream accumulators
};

struct FastPass {
  Vector losses;  // empty when no targets were given
  Matrix logits;
  FastTape tape;
};

struct FastOptions {
  std::size_t chunk_size = kDefaultChunkSize;
};

PositionTape slow_forward(const HeadParams& params, const Matrix& h,
                          std::span<const TokenId> targets);

PositionGrads per_position_grads(const HeadParams& params, const PositionTape& tape,
                                 std::span<const TokenId> targets);

// Zero-valued gradients shaped for a tape of `t` rows.
PositionGrads zero_position_grads(const HeadParams& params, std::size_t t);

FastPass fast_forward(const HeadParams& params, const StepSizes& steps, const PositionTape& tape,
                      const PositionGrads& grads, std::span<const TokenId> targets,
                      const StreamState* state = nullptr, const Decays* decays = nullptr,
                      const FastOptions& options = {});

// Sum over the segment of each masked tensor's per-position gradient.
std::array<Matrix, kHeadTensorCount> segment_gradient_sums(const PositionTape& tape,
                                                           const PositionGrads& grads,
                                                           FastMask mask);

StreamState update_stream_state(const StreamState& state, const PositionGrads& grads,
                                const PositionTape& tape, const Decays& decays, FastMask mask);

struct GenerateResult {
  TokenId token = 0;
  Real loss = 0;  // fast-weight loss of the sampled token
  Vector logits;
  StreamState offsets;
};

// temperature 0 selects the argmax (lowest id on ties).
TokenId sample_token(std::span<const Real> logits, Real temperature, Rng& rng);

GenerateResult generate_step(const HeadParams& params, const StepSizes& steps,
                             const StreamState& offsets, std::span<const Real> h,
                             Real temperature, Rng& rng);

// Fold the slow-weight gradient of predicting `target` from `h` into offsets.
StreamState absorb_token(const HeadParams& params, FastMask mask, const StreamState& offsets,
                         std::span<const Real> h, TokenId target);

// ---------------------------------------------------------------------------
// Differentiation of the head objectives.

struct HeadGradients {
  HeadParams params;
  std::array<Real, kHeadTensorCount> alpha{};
  std::array<Real, kHeadTensorCount> decay_raw{};
  Matrix h;  // d objective / d h
};

HeadGradients zero_head_gradients(const HeadParams& params, std::size_t t);

// Objective sum_t weight_t * L_t on the slow pass.
void slow_backward(const HeadParams& params, const PositionTape& tape,
                   std::span<const TokenId> targets, std::span<const Real> weights,
                   HeadGradients& out);

struct FastBackwardOptions {
  bool second_order = true;
  std::size_t chunk_size = kDefaultChunkSize;
};

// Objective sum_t weight_t * L'_t. With second_order the per-position
// gradients are differentiated as functions of the parameters and of h;
// otherwise they are treated as constants.
void fast_backward(const HeadParams& params, const StepSizes& steps, const Decays* decays,
                   const StreamState* state, const PositionTape& tape, const PositionGrads& grads,
                   const FastPass& fast, std::span<const TokenId> targets,
                   std::span<const Real> weights, const FastBackwardOptions& options,
                   HeadGradients& out);

// Multiply-add counts (x2) per position for the FLOP report.
struct HeadFlops {
  std::uint64_t slow_forward = 0;   // excluding the output softmax
  std::uint64_t softmax = 0;        // u E + c and normalization
  std::uint64_t position_backward = 0;
  std::uint64_t fast_pass = 0;      // excluding its output softmax
};
HeadFlops head_flops_per_token(std::size_t d_model, std::size_t d_hidden, std::size_t vocab,
                               std::size_t t, std::size_t chunk, FastMask mask);

}  // namespace fwl
