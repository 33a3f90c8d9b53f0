#pragma once

#include <span>
#include <string>
#include <vector>

#include "fwl/backbone.hpp"
#include "fwl/head.hpp"

namespace fwl {

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t d_hidden = 128;
  FastMask mask = FastMask::all();
  Real alpha_init = kDefaultStepSize;
  Real decay_init = kDefaultDecay;

  void validate() const;
};

// Backbone, head, and the learned step sizes and decays of the masked tensors.
struct Model {
  ModelConfig config;
  BackboneParams backbone;
  HeadParams head;
  StepSizes steps;
  Decays decays;

  // Visits every trainable tensor as (name, flat span). Step sizes and decays
  // appear as "fwl.alpha.<tensor>" / "fwl.decay.<tensor>" for masked tensors only.
  template <class F>
  void for_each_parameter(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    visit(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    self.backbone.for_each_tensor(f);
    self.head.for_each_tensor(f);
    for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
      if (!self.steps.mask.has(static_cast<HeadTensor>(i))) continue;
      f("fwl.alpha." + std::string(kHeadTensorNames[i]), std::span(&self.steps.alpha[i], 1));
    }
    for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
      if (!self.steps.mask.has(static_cast<HeadTensor>(i))) continue;
      f("fwl.decay." + std::string(kHeadTensorNames[i]), std::span(&self.decays.raw[i], 1));
    }
  }
};

Model init_model(const ModelConfig& config);
// Same structure with every parameter zero (used for gradients and moments).
Model zero_model(const ModelConfig& config);
std::size_t parameter_count(const Model& model);

// Flattened copy of all parameters in for_each_parameter order.
Vector flatten_parameters(const Model& model);
void unflatten_parameters(Model& model, std::span<const Real> values);

// Carried across the segments of one document.
struct StreamCarry {
  SegmentMemory memory;
  StreamState state;
};

StreamCarry fresh_carry(const Model& model, FastMask mask);

enum class HeadMode { slow, fast };

struct SegmentScoreOptions {
  HeadMode mode = HeadMode::fast;
  const StepSizes* steps = nullptr;  // defaults to the model's
  const Decays* decays = nullptr;    // defaults to the model's
  std::size_t chunk_size = kDefaultChunkSize;
};

// Per-token NLL of `targets` given `inputs` (same length), advancing `carry`.
Vector score_segment(const Model& model, std::span<const TokenId> inputs,
                     std::span<const TokenId> targets, StreamCarry& carry,
                     const SegmentScoreOptions& options);

// Splits a document (starting with <bos>) into consecutive (inputs, targets)
// windows of at most `length` predicted tokens.
struct Window {
  std::size_t begin = 0;  // index of the first input token
  std::size_t length = 0;
};
std::vector<Window> document_windows(std::size_t document_size, std::size_t length);

}  // namespace fwl
