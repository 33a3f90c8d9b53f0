#pragma once

#include <span>

#include "fwl/head.hpp"

namespace fwl {

// Straightforward reference implementations used only for testing. They share
// no code with the fast path beyond the parameter containers.

// Cross-entropy of one position under explicit head parameters.
Real oracle_head_loss(const HeadParams& params, std::span<const Real> h, TokenId target);

// Full gradient of oracle_head_loss with respect to every head tensor,
// computed with dense loops (no rank-one shortcut).
HeadParams oracle_head_gradient(const HeadParams& params, std::span<const Real> h,
                                TokenId target);

// theta' for position t: theta - alpha * (offset + sum_{i<t} grad L_i),
// restricted to the masked tensors.
HeadParams oracle_fast_weights(const HeadParams& params, const StepSizes& steps,
                               const Matrix& h, std::span<const TokenId> targets, std::size_t t,
                               const StreamState* state = nullptr,
                               const Decays* decays = nullptr);

// Per-position fast-weight losses obtained by materializing theta'_t for every t.
Vector sequential_fast_forward(const HeadParams& params, const StepSizes& steps, const Matrix& h,
                               std::span<const TokenId> targets,
                               const StreamState* state = nullptr,
                               const Decays* decays = nullptr);

}  // namespace fwl
