#include "fwl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>

namespace fwl {

using nlohmann::json;

TrainMode parse_train_mode(std::string_view name) {
  if (name == "full") return TrainMode::full;
  if (name == "slow-only") return TrainMode::slow_only;
  if (name == "fwl-finetune") return TrainMode::fwl_finetune;
  throw ConfigError("mode must be full, slow-only or fwl-finetune, got '" + std::string(name) + "'");
}

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::full: return "full";
    case TrainMode::slow_only: return "slow-only";
    case TrainMode::fwl_finetune: return "fwl-finetune";
  }
  return "full";
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* why) {
    if (!ok) throw ConfigError(std::string("train config: ") + field + " " + why);
  };
  require(learning_rate > 0, "learning_rate", "must be positive");
  require(fast_learning_rate >= 0, "fast_learning_rate", "must be non-negative");
  require(beta1 >= 0 && beta1 < 1, "beta1", "must lie in [0, 1)");
  require(beta2 >= 0 && beta2 < 1, "beta2", "must lie in [0, 1)");
  require(adam_eps > 0, "adam_eps", "must be positive");
  require(weight_decay >= 0, "weight_decay", "must be non-negative");
  require(batch_size > 0, "batch_size", "must be positive");
  require(seq_len > 0, "seq_len", "must be positive");
  require(steps > 0, "steps", "must be positive");
  require(clip_norm >= 0, "clip_norm", "must be non-negative");
  require(chunk_size > 0, "chunk_size", "must be positive");
}

json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"fast_learning_rate", c.fast_learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"seq_len", c.seq_len},
              {"steps", c.steps},
              {"warmup_steps", c.warmup_steps},
              {"clip_norm", c.clip_norm},
              {"mode", std::string(to_string(c.mode))},
              {"mask", c.mask.to_string()},
              {"chunk_size", c.chunk_size},
              {"seed", c.seed},
              {"second_order", c.second_order},
              {"streaming", c.streaming},
              {"full_batch", c.full_batch},
              {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
              {"eval_every", c.eval_every},
              {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  try {
    auto num = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j.at(k).get<std::remove_reference_t<decltype(field)>>();
    };
    num("learning_rate", c.learning_rate);
    num("fast_learning_rate", c.fast_learning_rate);
    num("beta1", c.beta1);
    num("beta2", c.beta2);
    num("adam_eps", c.adam_eps);
    num("weight_decay", c.weight_decay);
    num("batch_size", c.batch_size);
    num("seq_len", c.seq_len);
    num("steps", c.steps);
    num("warmup_steps", c.warmup_steps);
    num("clip_norm", c.clip_norm);
    num("chunk_size", c.chunk_size);
    num("seed", c.seed);
    num("second_order", c.second_order);
    num("streaming", c.streaming);
    num("full_batch", c.full_batch);
    num("eval_every", c.eval_every);
    num("checkpoint_every", c.checkpoint_every);
    if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
    if (j.contains("mask")) c.mask = FastMask::parse(j.at("mask").get<std::string>());
    if (j.contains("optimizer")) {
      const auto o = j.at("optimizer").get<std::string>();
      if (o == "adam") c.optimizer = OptimizerKind::adam;
      else if (o == "sgd") c.optimizer = OptimizerKind::sgd;
      else throw ConfigError("optimizer must be adam or sgd, got '" + o + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

json to_json(const StepMetrics& m, FastMask mask) {
  json alphas = json::object(), decays = json::object();
  for (std::size_t i = 0; i < kHeadTensorCount; ++i) {
    if (!mask.has(static_cast<HeadTensor>(i))) continue;
    alphas[std::string(kHeadTensorNames[i])] = m.alpha[i];
    decays[std::string(kHeadTensorNames[i])] = m.decay[i];
  }
  json j{{"step", m.step},
         {"loss", m.loss},
         {"ppl", std::exp(m.loss)},
         {"tokens", m.tokens},
         {"grad_norm", m.grad_norm},
         {"alphas", alphas},
         {"decays", decays},
         {"wall_ms", m.wall_ms}};
  if (m.dev_perplexity) j["dev_ppl"] = *m.dev_perplexity;
  return j;
}

OptimizerState make_optimizer_state(const Model& model) {
  return {zero_model(model.config), zero_model(model.config), 0};
}

Real warmup_factor(std::size_t step, std::size_t warmup_steps) {
  if (warmup_steps == 0) return 1;
  return std::min(Real(1), static_cast<Real>(step + 1) / static_cast<Real>(warmup_steps));
}

Real gradient_norm(const Model& grads) {
  Real s = 0;
  grads.for_each_parameter([&](const std::string&, std::span<const Real> g) { s += dot(g, g); });
  return std::sqrt(s);
}

namespace {

bool is_backbone(const std::string& name) { return name.rfind("backbone.", 0) == 0; }
bool is_fast_param(const std::string& name) { return name.rfind("fwl.", 0) == 0; }

bool is_decayed(const std::string& name) {
  const std::string leaf = name.substr(name.rfind('.') + 1);
  for (const char* w : {"tok_emb", "pos_emb", "wq", "wk", "wv", "wo", "w1", "w2", "U", "W", "E"})
    if (leaf == w) return true;
  return false;
}

std::vector<std::span<Real>> spans_of(Model& m) {
  std::vector<std::span<Real>> out;
  m.for_each_parameter([&](const std::string&, std::span<Real> s) { out.push_back(s); });
  return out;
}

}  // namespace

Real apply_update(Model& model, Model& grads, OptimizerState& state, const TrainConfig& c,
                  std::size_t step) {
  const bool freeze_backbone = c.mode == TrainMode::fwl_finetune;
  if (freeze_backbone)
    grads.backbone.for_each_tensor([](const std::string&, std::span<Real> s) {
      std::fill(s.begin(), s.end(), Real(0));
    });
  const Real norm = gradient_norm(grads);
  if (!std::isfinite(norm))
    throw NumericalError("non-finite gradient norm at step " + std::to_string(step));
  const Real clip = (c.clip_norm > 0 && norm > c.clip_norm) ? c.clip_norm / norm : Real(1);

  const Real warm = warmup_factor(step, c.warmup_steps);
  const Real fast_lr = c.fast_learning_rate > 0 ? c.fast_learning_rate : c.learning_rate;
  ++state.t;
  const Real bc1 = 1 - std::pow(c.beta1, static_cast<Real>(state.t));
  const Real bc2 = 1 - std::pow(c.beta2, static_cast<Real>(state.t));

  auto g_spans = spans_of(grads);
  auto m_spans = spans_of(state.m);
  auto v_spans = spans_of(state.v);
  std::size_t k = 0;
  model.for_each_parameter([&](const std::string& name, std::span<Real> p) {
    const std::size_t idx = k++;
    if (freeze_backbone && is_backbone(name)) return;
    const bool fast = is_fast_param(name);
    const Real lr = (fast ? fast_lr : c.learning_rate) * warm;
    const Real wd = is_decayed(name) ? c.weight_decay : Real(0);
    auto g = g_spans[idx];
    auto m = m_spans[idx];
    auto v = v_spans[idx];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const Real gi = g[i] * clip;
      if (c.optimizer == OptimizerKind::sgd) {
        p[i] -= lr * (gi + wd * p[i]);
        continue;
      }
      m[i] = c.beta1 * m[i] + (1 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1 - c.beta2) * gi * gi;
      const Real mhat = m[i] / bc1, vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + c.adam_eps) + wd * p[i]);
    }
  });
  return norm;
}

Real accumulate_segment(const Model& model, const SegmentRef& seg, StreamCarry& carry,
                        const TrainConfig& c, Real weight, Model& grads) {
  const std::size_t t_len = seg.targets.size();
  TapedSegment enc =
      encode_segment_taped(model.config.backbone, model.backbone, seg.inputs, carry.memory);
  const PositionTape tape = slow_forward(model.head, enc.hidden, seg.targets);
  const Vector weights(t_len, weight);
  HeadGradients hg = zero_head_gradients(model.head, t_len);
  const FastMask mask = model.steps.mask;
  Real loss = 0;
  if (c.mode == TrainMode::slow_only || mask.empty()) {
    slow_backward(model.head, tape, seg.targets, weights, hg);
    for (Real l : tape.losses) loss += l;
  } else {
    const PositionGrads g = per_position_grads(model.head, tape, seg.targets);
    FastOptions fo;
    fo.chunk_size = c.chunk_size;
    const FastPass fast =
        fast_forward(model.head, model.steps, tape, g, seg.targets, &carry.state, &model.decays, fo);
    FastBackwardOptions bo;
    bo.second_order = c.second_order;
    bo.chunk_size = c.chunk_size;
    fast_backward(model.head, model.steps, &model.decays, &carry.state, tape, g, fast, seg.targets,
                  weights, bo, hg);
    for (Real l : fast.losses) loss += l;
    carry.state = update_stream_state(carry.state, g, tape, model.decays, mask);
  }
  carry.memory = std::move(enc.memory);

  for (std::size_t k = 0; k < kHeadTensorCount; ++k) {
    const auto t = static_cast<HeadTensor>(k);
    axpy(1, hg.params.tensor(t), grads.head.tensor(t));
    if (!mask.has(t)) continue;
    grads.steps.alpha[k] += hg.alpha[k];
    grads.decays.raw[k] += hg.decay_raw[k];
  }
  if (c.mode != TrainMode::fwl_finetune)
    backbone_backward(model.config.backbone, model.backbone, enc.tape, hg.h, grads.backbone);
  return loss;
}

StepMetrics train_step(Model& model, OptimizerState& opt,
                       const std::vector<std::vector<SegmentRef>>& batch,
                       std::vector<StreamCarry>& carries, const TrainConfig& c, std::size_t step) {
  if (batch.size() != carries.size())
    throw ShapeError("train_step: " + std::to_string(batch.size()) + " streams but " +
                     std::to_string(carries.size()) + " carries");
  std::size_t tokens = 0;
  for (const auto& run : batch)
    for (const auto& s : run) {
      if (s.inputs.size() != s.targets.size() || s.inputs.empty())
        throw ShapeError("train_step: malformed segment");
      tokens += s.targets.size();
    }
  if (tokens == 0) throw InputError("train_step: empty batch");
  const Real weight = Real(1) / static_cast<Real>(tokens);

  Model grads = zero_model(model.config);
  grads.steps.mask = model.steps.mask;
  Real loss = 0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (const auto& s : batch[i]) loss += accumulate_segment(model, s, carries[i], c, weight, grads);
  loss /= static_cast<Real>(tokens);
  if (!std::isfinite(loss))
    throw NumericalError("non-finite training loss at step " + std::to_string(step));

  StepMetrics m;
  m.step = step + 1;
  m.loss = loss;
  m.tokens = tokens;
  m.grad_norm = apply_update(model, grads, opt, c, step);
  m.alpha = model.steps.alpha;
  for (std::size_t k = 0; k < kHeadTensorCount; ++k)
    m.decay[k] = model.decays.value(static_cast<HeadTensor>(k));
  return m;
}

double CorpusScore::perplexity() const { return std::exp(mean_nll()); }

CorpusScore score_corpus(const Model& model, const Corpus& corpus, std::size_t seq_len,
                         const SegmentScoreOptions& options) {
  const FastMask mask = options.steps ? options.steps->mask : model.steps.mask;
  const auto n_docs = static_cast<std::ptrdiff_t>(corpus.documents.size());
  CorpusScore out;
  out.nll.resize(corpus.documents.size());
  std::vector<std::exception_ptr> errors(corpus.documents.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t d = 0; d < n_docs; ++d) {
    try {
      const auto& doc = corpus.documents[static_cast<std::size_t>(d)];
      StreamCarry carry = fresh_carry(model, mask);
      Vector& nll = out.nll[static_cast<std::size_t>(d)];
      for (const Window& w : document_windows(doc.size(), seq_len)) {
        const std::span<const TokenId> all(doc);
        const Vector l = score_segment(model, all.subspan(w.begin, w.length),
                                       all.subspan(w.begin + 1, w.length), carry, options);
        nll.insert(nll.end(), l.begin(), l.end());
      }
    } catch (...) {
      errors[static_cast<std::size_t>(d)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& doc : out.nll)
    for (Real l : doc) {
      out.total_nll += l;
      ++out.tokens;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

constexpr std::int64_t kNoDoc = -1;

struct Stream {
  std::int64_t doc = kNoDoc;
  std::size_t window = 0;
  StreamCarry carry;
};

struct Trainer {
  std::uint64_t step = 0;
  Rng rng{0};
  std::vector<std::size_t> order;
  std::size_t next = 0;
  std::vector<Stream> streams;
  double best_dev = std::numeric_limits<double>::infinity();
};

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

std::vector<std::size_t> usable_documents(const Corpus& c) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.documents.size(); ++i)
    if (c.documents[i].size() >= 2) out.push_back(i);
  return out;
}

std::string stream_prefix(std::size_t i) { return "stream." + std::to_string(i) + "."; }

void store_trainer(Checkpoint& ck, const Trainer& tr, const OptimizerState& opt,
                   const TrainConfig& config) {
  json streams = json::array();
  for (const auto& s : tr.streams) streams.push_back({{"doc", s.doc}, {"window", s.window}});
  ck.extra["train_config"] = to_json(config);
  ck.extra["trainer"] = {{"step", tr.step},   {"rng", tr.rng.state()},   {"order", tr.order},
                         {"next", tr.next},   {"streams", streams},      {"opt_t", opt.t},
                         {"best_dev", std::isfinite(tr.best_dev) ? json(tr.best_dev) : json(nullptr)}};
  ck.extra_tensors.clear();
  auto add_model = [&](const std::string& prefix, const Model& m) {
    m.for_each_parameter([&](const std::string& name, std::span<const Real> s) {
      ck.extra_tensors[prefix + name] = to_tensor(s);
    });
  };
  add_model("adam.m.", opt.m);
  add_model("adam.v.", opt.v);
  for (std::size_t i = 0; i < tr.streams.size(); ++i) {
    const auto& c = tr.streams[i].carry;
    const std::string p = stream_prefix(i);
    for (std::size_t l = 0; l < c.memory.layers.size(); ++l)
      ck.extra_tensors[p + "memory." + std::to_string(l)] = to_tensor(c.memory.layers[l]);
    for (std::size_t k = 0; k < kHeadTensorCount; ++k) {
      if (c.state.recent[k].empty() && c.state.history[k].empty()) continue;
      const std::string n(kHeadTensorNames[k]);
      ck.extra_tensors[p + "state.history." + n] = to_tensor(c.state.history[k]);
      ck.extra_tensors[p + "state.recent." + n] = to_tensor(c.state.recent[k]);
    }
  }
}

void restore_trainer(const Checkpoint& ck, Trainer& tr, OptimizerState& opt, const Model& model) {
  try {
    const json& t = ck.extra.at("trainer");
    tr.step = t.at("step").get<std::uint64_t>();
    tr.rng = Rng(t.at("rng").get<std::uint64_t>());
    tr.order = t.at("order").get<std::vector<std::size_t>>();
    tr.next = t.at("next").get<std::size_t>();
    opt.t = t.at("opt_t").get<std::uint64_t>();
    tr.best_dev = t.at("best_dev").is_null() ? std::numeric_limits<double>::infinity()
                                             : t.at("best_dev").get<double>();
    tr.streams.clear();
    for (const auto& s : t.at("streams")) {
      Stream st;
      st.doc = s.at("doc").get<std::int64_t>();
      st.window = s.at("window").get<std::size_t>();
      tr.streams.push_back(std::move(st));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint has no usable trainer state: ") + e.what());
  }
  auto take = [&](const std::string& name) -> const Tensor& {
    auto it = ck.extra_tensors.find(name);
    if (it == ck.extra_tensors.end()) throw IoError("checkpoint lacks tensor " + name);
    return it->second;
  };
  auto load_model = [&](const std::string& prefix, Model& m) {
    m.for_each_parameter([&](const std::string& name, std::span<Real> s) {
      const Tensor& t = take(prefix + name);
      if (t.data.size() != s.size()) throw IoError("checkpoint tensor " + prefix + name + " has the wrong size");
      std::copy(t.data.begin(), t.data.end(), s.begin());
    });
  };
  load_model("adam.m.", opt.m);
  load_model("adam.v.", opt.v);
  for (std::size_t i = 0; i < tr.streams.size(); ++i) {
    const std::string p = stream_prefix(i);
    StreamCarry c = fresh_carry(model, model.steps.mask);
    for (std::size_t l = 0;; ++l) {
      auto it = ck.extra_tensors.find(p + "memory." + std::to_string(l));
      if (it == ck.extra_tensors.end()) break;
      c.memory.layers.push_back(matrix_from_tensor(it->second, it->first));
    }
    for (std::size_t k = 0; k < kHeadTensorCount; ++k) {
      if (!model.steps.mask.has(static_cast<HeadTensor>(k))) continue;
      const std::string n(kHeadTensorNames[k]);
      c.state.history[k] = matrix_from_tensor(take(p + "state.history." + n), n);
      c.state.recent[k] = matrix_from_tensor(take(p + "state.recent." + n), n);
    }
    tr.streams[i].carry = std::move(c);
  }
}

}  // namespace

FitResult fit(const FitInputs& in, const TrainConfig& config,
              const std::function<void(const StepMetrics&)>& on_step) {
  config.validate();
  const std::vector<std::size_t> usable = usable_documents(in.train);
  if (usable.empty()) throw ConfigError("training corpus has no document with two or more tokens");
  std::error_code ec;
  std::filesystem::create_directories(in.out_dir, ec);
  if (ec) throw IoError("cannot create " + in.out_dir.string() + ": " + ec.message());

  Model model;
  Trainer tr;
  OptimizerState opt;
  if (in.resume_checkpoint) {
    Checkpoint ck = load_checkpoint(*in.resume_checkpoint);
    model = std::move(ck.model);
    if (model.steps.mask != config.mask && config.mode != TrainMode::slow_only)
      throw ConfigError("resume: checkpoint mask " + model.steps.mask.to_string() +
                        " differs from requested " + config.mask.to_string());
    opt = make_optimizer_state(model);
    restore_trainer(ck, tr, opt, model);
  } else {
    if (in.init_checkpoint) {
      model = load_checkpoint(*in.init_checkpoint).model;
    } else {
      ModelConfig mc = in.model;
      mc.mask = config.mask;
      model = init_model(mc);
    }
    model.config.mask = config.mask;
    model.steps.mask = config.mask;
    opt = make_optimizer_state(model);
    tr.rng = Rng(config.seed);
    tr.streams.resize(config.full_batch ? 0 : config.batch_size);
  }

  const std::filesystem::path metrics_path = in.out_dir / "metrics.jsonl";
  std::ofstream metrics_out(metrics_path, in.resume_checkpoint ? std::ios::app : std::ios::trunc);
  if (!metrics_out) throw IoError("cannot write " + metrics_path.string());

  auto make_checkpoint = [&]() {
    Checkpoint ck;
    ck.model = model;
    ck.tokenizer = in.tokenizer;
    ck.step = tr.step;
    store_trainer(ck, tr, opt, config);
    return ck;
  };
  auto next_document = [&]() -> std::size_t {
    if (tr.next >= tr.order.size()) {
      tr.order = shuffled(usable.size(), tr.rng);
      tr.next = 0;
    }
    return usable[tr.order[tr.next++]];
  };
  const SegmentScoreOptions eval_options{
      config.mode == TrainMode::slow_only ? HeadMode::slow : HeadMode::fast, nullptr, nullptr,
      config.chunk_size};

  FitResult result;
  while (tr.step < config.steps) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<SegmentRef>> batch;
    std::vector<StreamCarry> carries;
    if (config.full_batch) {
      for (std::size_t d : usable) {
        const auto& doc = in.train.documents[d];
        const std::span<const TokenId> all(doc);
        std::vector<SegmentRef> run;
        for (const Window& w : document_windows(doc.size(), config.seq_len))
          run.push_back({all.subspan(w.begin, w.length), all.subspan(w.begin + 1, w.length)});
        batch.push_back(std::move(run));
        carries.push_back(fresh_carry(model, model.steps.mask));
      }
    } else {
      for (auto& s : tr.streams) {
        if (!config.streaming) {
          s.doc = static_cast<std::int64_t>(usable[tr.rng.below(usable.size())]);
          const auto& doc = in.train.documents[static_cast<std::size_t>(s.doc)];
          s.window = tr.rng.below(document_windows(doc.size(), config.seq_len).size());
          s.carry = fresh_carry(model, model.steps.mask);
        } else if (s.doc == kNoDoc ||
                   s.window >= document_windows(in.train.documents[static_cast<std::size_t>(s.doc)].size(),
                                                config.seq_len).size()) {
          s.doc = static_cast<std::int64_t>(next_document());
          s.window = 0;
          s.carry = fresh_carry(model, model.steps.mask);
        }
        const auto& doc = in.train.documents[static_cast<std::size_t>(s.doc)];
        const Window w = document_windows(doc.size(), config.seq_len)[s.window++];
        const std::span<const TokenId> all(doc);
        batch.push_back({{all.subspan(w.begin, w.length), all.subspan(w.begin + 1, w.length)}});
        carries.push_back(std::move(s.carry));
      }
    }

    StepMetrics m = train_step(model, opt, batch, carries, config, tr.step);
    if (!config.full_batch)
      for (std::size_t i = 0; i < tr.streams.size(); ++i) tr.streams[i].carry = std::move(carries[i]);
    ++tr.step;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    const bool last = tr.step == config.steps;
    if (!in.dev.documents.empty() &&
        (last || (config.eval_every && tr.step % config.eval_every == 0))) {
      const double ppl = score_corpus(model, in.dev, config.seq_len, eval_options).perplexity();
      if (!std::isfinite(ppl)) throw NumericalError("non-finite dev perplexity at step " + std::to_string(tr.step));
      m.dev_perplexity = ppl;
      if (ppl < tr.best_dev) {
        tr.best_dev = ppl;
        save_checkpoint(make_checkpoint(), in.out_dir / "best.ckpt");
      }
    }
    metrics_out << to_json(m, model.steps.mask).dump() << '\n';
    metrics_out.flush();
    if (on_step) on_step(m);
    result.metrics.push_back(m);
    if (config.checkpoint_every && tr.step % config.checkpoint_every == 0)
      save_checkpoint(make_checkpoint(), in.out_dir / "latest.ckpt");
  }

  result.final_checkpoint = make_checkpoint();
  save_checkpoint(result.final_checkpoint, in.out_dir / "final.ckpt");
  result.best_dev_perplexity = tr.best_dev;
  return result;
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const Model& model, const std::vector<std::vector<TokenId>>& documents,
                           const TrainConfig& config, std::size_t n_directions, std::uint64_t seed,
                           Real eps, const std::function<bool(const std::string&)>& include) {
  struct Piece {
    SegmentRef seg;
    StreamCarry carry_in;
  };
  // Record the carries entering each segment under the unperturbed model.
  std::vector<Piece> pieces;
  std::size_t tokens = 0;
  {
    Model scratch = zero_model(model.config);
    for (const auto& doc : documents) {
      StreamCarry carry = fresh_carry(model, model.steps.mask);
      const std::span<const TokenId> all(doc);
      for (const Window& w : document_windows(doc.size(), config.seq_len)) {
        const SegmentRef s{all.subspan(w.begin, w.length), all.subspan(w.begin + 1, w.length)};
        pieces.push_back({s, carry});
        accumulate_segment(model, s, carry, config, 0, scratch);
        tokens += w.length;
      }
    }
  }
  if (tokens == 0) throw InputError("grad_check: no predicted tokens");
  const Real weight = Real(1) / static_cast<Real>(tokens);

  auto objective = [&](const Model& m, Model* grads) {
    Model sink = zero_model(m.config);
    Real total = 0;
    for (const auto& p : pieces) {
      StreamCarry c = p.carry_in;
      total += accumulate_segment(m, p.seg, c, config, weight, grads ? *grads : sink);
    }
    return total * weight;
  };

  Model grads = zero_model(model.config);
  grads.steps.mask = model.steps.mask;
  objective(model, &grads);
  const Vector g = flatten_parameters(grads);
  const Vector base = flatten_parameters(model);

  GradCheckReport report;
  Rng rng(seed);
  for (std::size_t d = 0; d < n_directions; ++d) {
    Vector dir(base.size());
    for (auto& x : dir) x = static_cast<Real>(rng.normal());
    // Only head-side parameters are differentiated in fwl-finetune mode.
    std::size_t off = 0;
    model.for_each_parameter([&](const std::string& name, std::span<const Real> s) {
      if ((config.mode == TrainMode::fwl_finetune && is_backbone(name)) || (include && !include(name)))
        std::fill_n(dir.begin() + static_cast<std::ptrdiff_t>(off), s.size(), Real(0));
      off += s.size();
    });
    const Real len = std::sqrt(dot(dir, dir));
    if (len == 0) continue;
    for (auto& x : dir) x /= len;
    auto at = [&](Real h) {
      Vector v = base;
      axpy(h, dir, v);
      Model m = model;
      unflatten_parameters(m, v);
      return objective(m, nullptr);
    };
    const Real numeric = (at(eps) - at(-eps)) / (2 * eps);
    const Real analytic = dot(g, dir);
    const Real rel = std::abs(analytic - numeric) /
                     std::max({std::abs(analytic), std::abs(numeric), Real(1e-10)});
    report.max_relative_error = std::max(report.max_relative_error, rel);
    report.directions.emplace_back(analytic, numeric);
  }
  return report;
}

}  // namespace fwl
