#include "fwl/model.hpp"

namespace fwl {

void ModelConfig::validate() const {
  backbone.validate();
  if (d_hidden == 0) throw ConfigError("model config: d_hidden must be positive");
  if (!(decay_init > 0 && decay_init < 1))
    throw ConfigError("model config: decay_init must lie in (0, 1)");
}

namespace {

Model assemble(const ModelConfig& c, BackboneParams backbone, HeadParams head) {
  Model m;
  m.config = c;
  m.backbone = std::move(backbone);
  m.head = std::move(head);
  m.steps = StepSizes::uniform(c.alpha_init, c.mask);
  m.decays = Decays::uniform(c.decay_init);
  return m;
}

}  // namespace

Model init_model(const ModelConfig& c) {
  c.validate();
  // The head draws from a stream derived from, but distinct from, the backbone seed.
  Rng rng(c.backbone.seed ^ 0x9e3779b97f4a7c15ull);
  return assemble(c, init_backbone(c.backbone),
                  init_head(c.backbone.d_model, c.d_hidden, c.backbone.vocab_size, rng));
}

Model zero_model(const ModelConfig& c) {
  Model m = assemble(c, zero_backbone(c.backbone),
                     zero_head(c.backbone.d_model, c.d_hidden, c.backbone.vocab_size));
  m.steps.alpha.fill(0);
  m.decays.raw.fill(0);
  return m;
}

std::size_t parameter_count(const Model& model) {
  std::size_t n = 0;
  model.for_each_parameter([&](const std::string&, std::span<const Real> s) { n += s.size(); });
  return n;
}

Vector flatten_parameters(const Model& model) {
  Vector out;
  model.for_each_parameter(
      [&](const std::string&, std::span<const Real> s) { out.insert(out.end(), s.begin(), s.end()); });
  return out;
}

void unflatten_parameters(Model& model, std::span<const Real> values) {
  std::size_t off = 0;
  model.for_each_parameter([&](const std::string& name, std::span<Real> s) {
    if (off + s.size() > values.size())
      throw ShapeError("unflatten_parameters: too few values at " + name);
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
              values.begin() + static_cast<std::ptrdiff_t>(off + s.size()), s.begin());
    off += s.size();
  });
  if (off != values.size()) throw ShapeError("unflatten_parameters: too many values");
}

StreamCarry fresh_carry(const Model& model, FastMask mask) {
  StreamCarry c;
  c.state = StreamState::zeros(model.head, mask);
  return c;
}

Vector score_segment(const Model& model, std::span<const TokenId> inputs,
                     std::span<const TokenId> targets, StreamCarry& carry,
                     const SegmentScoreOptions& options) {
  SegmentOutput enc = encode_segment(model.config.backbone, model.backbone, inputs, carry.memory);
  carry.memory = std::move(enc.memory);
  const PositionTape tape = slow_forward(model.head, enc.hidden, targets);
  if (options.mode == HeadMode::slow) return tape.losses;

  const StepSizes& steps = options.steps ? *options.steps : model.steps;
  const Decays& decays = options.decays ? *options.decays : model.decays;
  if (steps.mask.empty()) return tape.losses;
  const PositionGrads grads = per_position_grads(model.head, tape, targets);
  FastOptions fo;
  fo.chunk_size = options.chunk_size;
  FastPass fast = fast_forward(model.head, steps, tape, grads, targets, &carry.state, &decays, fo);
  carry.state = update_stream_state(carry.state, grads, tape, decays, steps.mask);
  return std::move(fast.losses);
}

std::vector<Window> document_windows(std::size_t document_size, std::size_t length) {
  if (length == 0) throw ConfigError("segment length must be positive");
  std::vector<Window> out;
  if (document_size < 2) return out;
  const std::size_t predicted = document_size - 1;
  for (std::size_t b = 0; b < predicted; b += length)
    out.push_back({b, std::min(length, predicted - b)});
  return out;
}

}  // namespace fwl
