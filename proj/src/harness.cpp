#include "fwl/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <map>
#include <set>

#include "fwl/linear_attention.hpp"
#include "fwl/oracle.hpp"

namespace fwl {

Variant parse_variant(std::string_view name) {
  if (name == "baseline" || name == "none") return Variant::baseline;
  if (name == "fwl") return Variant::fwl;
  if (name == "test-time-only") return Variant::test_time_only;
  if (name == "bias-only") return Variant::bias_only;
  throw ConfigError("variant must be baseline, fwl, test-time-only or bias-only, got '" +
                    std::string(name) + "'");
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::fwl: return "fwl";
    case Variant::test_time_only: return "test-time-only";
    case Variant::bias_only: return "bias-only";
  }
  return "fwl";
}

void ensure_same_tokenizer(const Tokenizer& a, const Tokenizer& b) {
  if (a.kind != b.kind)
    throw ConfigError("tokenizer mismatch: checkpoint uses " + std::string(to_string(a.kind)) +
                      ", corpus uses " + std::string(to_string(b.kind)));
  if (a.vocab.tokens() != b.vocab.tokens())
    throw ConfigError("tokenizer mismatch: vocabularies differ (" + std::to_string(a.vocab.size()) +
                      " vs " + std::to_string(b.vocab.size()) + " tokens)");
}

Corpus encode_for(const Checkpoint& ck, const std::vector<std::string>& documents) {
  if (ck.tokenizer.vocab.size() != ck.model.config.backbone.vocab_size)
    throw ConfigError("checkpoint tokenizer has " + std::to_string(ck.tokenizer.vocab.size()) +
                      " tokens but the model expects " +
                      std::to_string(ck.model.config.backbone.vocab_size));
  return encode_corpus(ck.tokenizer, documents);
}

namespace {

struct Resolved {
  HeadMode mode = HeadMode::slow;
  StepSizes steps;
  Decays decays;
};

Resolved resolve(const Model& model, Variant v, Real global_step, FastMask test_time_mask) {
  Resolved r;
  r.steps = model.steps;
  r.decays = model.decays;
  switch (v) {
    case Variant::baseline:
      r.steps.mask = FastMask::none();
      break;
    case Variant::fwl:
      r.mode = HeadMode::fast;
      break;
    case Variant::test_time_only:
      r.mode = HeadMode::fast;
      r.steps = StepSizes::uniform(global_step, test_time_mask);
      r.decays = Decays::uniform(kDefaultDecay);
      break;
    case Variant::bias_only:
      r.mode = HeadMode::fast;
      r.steps.mask = FastMask::bias_only();
      break;
  }
  return r;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

CorpusScore score_variant(const Model& model, const Corpus& corpus, const ScoreOptions& o) {
  const Resolved r = resolve(model, o.variant, o.global_step, o.test_time_mask);
  SegmentScoreOptions so;
  so.mode = r.mode;
  so.steps = &r.steps;
  so.decays = &r.decays;
  so.chunk_size = o.chunk_size;
  return score_corpus(model, corpus, o.seq_len, so);
}

TuneResult tune_global_step(const Model& model, const Corpus& dev, const std::vector<Real>& grid,
                            const ScoreOptions& options) {
  if (grid.empty()) throw ConfigError("tune_global_step: empty step-size grid");
  std::vector<Real> sorted = grid;
  std::sort(sorted.begin(), sorted.end());
  TuneResult out;
  out.best_perplexity = std::numeric_limits<double>::infinity();
  for (Real step : sorted) {
    if (step < 0) throw ConfigError("tune_global_step: step sizes must be non-negative");
    ScoreOptions o = options;
    o.variant = Variant::test_time_only;
    o.global_step = step;
    const double ppl = score_variant(model, dev, o).perplexity();
    out.grid.emplace_back(step, ppl);
    if (ppl < out.best_perplexity) {
      out.best_perplexity = ppl;
      out.best_step = step;
    }
  }
  return out;
}

CorpusScore dynamic_evaluate(const Model& model, const Corpus& corpus,
                             const DynamicEvalOptions& options) {
  if (options.chunk_len == 0) throw ConfigError("dynamic evaluation: chunk length must be positive");
  const BackboneConfig& bc = model.config.backbone;
  const auto n_docs = static_cast<std::ptrdiff_t>(corpus.documents.size());
  CorpusScore out;
  out.nll.resize(corpus.documents.size());
  std::vector<std::exception_ptr> errors(corpus.documents.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t d = 0; d < n_docs; ++d) {
    try {
      const auto& doc = corpus.documents[static_cast<std::size_t>(d)];
      Model m = model;
      Model grads = zero_model(model.config);
      SegmentMemory memory;
      Vector& nll = out.nll[static_cast<std::size_t>(d)];
      const std::span<const TokenId> all(doc);
      for (const Window& w : document_windows(doc.size(), options.chunk_len)) {
        const auto inputs = all.subspan(w.begin, w.length);
        const auto targets = all.subspan(w.begin + 1, w.length);
        TapedSegment enc = encode_segment_taped(bc, m.backbone, inputs, memory);
        const PositionTape tape = slow_forward(m.head, enc.hidden, targets);
        nll.insert(nll.end(), tape.losses.begin(), tape.losses.end());
        memory = std::move(enc.memory);

        HeadGradients hg = zero_head_gradients(m.head, w.length);
        const Vector weights(w.length, Real(1) / static_cast<Real>(w.length));
        slow_backward(m.head, tape, targets, weights, hg);
        grads.backbone.for_each_tensor([](const std::string&, std::span<Real> s) {
          std::fill(s.begin(), s.end(), Real(0));
        });
        backbone_backward(bc, m.backbone, enc.tape, hg.h, grads.backbone);
        std::vector<std::span<const Real>> gs;
        grads.backbone.for_each_tensor([&](const std::string&, std::span<const Real> s) { gs.push_back(s); });
        hg.params.for_each_tensor([&](const std::string&, std::span<const Real> s) { gs.push_back(s); });
        std::size_t k = 0;
        auto step = [&](const std::string&, std::span<Real> p) { axpy(-options.step_size, gs[k++], p); };
        m.backbone.for_each_tensor(step);
        m.head.for_each_tensor(step);
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

std::vector<AblationRow> ablate(const AblationInputs& in, const Corpus& corpus) {
  auto need = [](const Model* m, const char* row, const char* which) -> const Model& {
    if (!m) throw ConfigError(std::string("ablation row '") + row + "' needs the " + which + " checkpoint");
    return *m;
  };
  const Model& slow = need(in.slow_only, "No FWL", "slow-only");
  const Model& fwl = need(in.fwl, "FWL", "FWL-trained");
  const Model& bias = need(in.bias_only, "Bias only", "bias-only");

  auto timed = [&](const std::string& name, auto&& run) {
    const auto t0 = std::chrono::steady_clock::now();
    const CorpusScore s = run();
    const double secs = seconds_since(t0);
    return AblationRow{name, s.perplexity(), secs > 0 ? static_cast<double>(s.tokens) / secs : 0};
  };
  ScoreOptions base;
  base.seq_len = in.seq_len;
  base.chunk_size = in.chunk_size;
  base.test_time_mask = in.test_time_mask;
  base.global_step = in.test_time_step;

  std::vector<AblationRow> rows;
  rows.push_back(timed("No FWL", [&] {
    ScoreOptions o = base;
    o.variant = Variant::baseline;
    return score_variant(slow, corpus, o);
  }));
  rows.push_back(timed("FWL", [&] {
    ScoreOptions o = base;
    o.variant = Variant::fwl;
    return score_variant(fwl, corpus, o);
  }));
  rows.push_back(timed("Test-time only", [&] {
    ScoreOptions o = base;
    o.variant = Variant::test_time_only;
    return score_variant(slow, corpus, o);
  }));
  rows.push_back(timed("Bias only", [&] {
    ScoreOptions o = base;
    o.variant = Variant::bias_only;
    return score_variant(bias, corpus, o);
  }));
  rows.push_back(timed("Dynamic Evaluation", [&] { return dynamic_evaluate(slow, corpus, in.dynamic); }));
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "variant,perplexity,tokens_per_second\n";
  out << std::setprecision(10);
  for (const auto& r : rows) out << r.name << ',' << r.perplexity << ',' << r.tokens_per_second << '\n';
}

void write_ablation_table(std::ostream& out, const std::vector<AblationRow>& rows) {
  std::size_t w = 7;
  for (const auto& r : rows) w = std::max(w, r.name.size());
  out << std::left << std::setw(static_cast<int>(w)) << "Variant" << "  " << std::right
      << std::setw(12) << "Perplexity" << "  " << std::setw(12) << "Tokens/sec" << '\n';
  for (const auto& r : rows)
    out << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << std::right
        << std::fixed << std::setprecision(4) << std::setw(12) << r.perplexity << "  "
        << std::setprecision(1) << std::setw(12) << r.tokens_per_second << '\n';
  out.unsetf(std::ios::fixed);
}

// ---------------------------------------------------------------------------

const Bucket& AnalysisReport::find(std::string_view group, std::string_view label) const {
  for (const auto& b : buckets)
    if (b.group == group && b.label == label) return b;
  throw IndexError("analysis has no bucket " + std::string(group) + "/" + std::string(label));
}

namespace {

std::string repeat_label(std::size_t seen) {
  if (seen == 0) return "first";
  if (seen <= 2) return "repeat-" + std::to_string(seen);
  if (seen <= 4) return "repeat-3-4";
  return "repeat-5+";
}

}  // namespace

AnalysisReport analyze(const Corpus& corpus, const CorpusScore& baseline, const CorpusScore& fwl) {
  const std::size_t n_docs = corpus.documents.size();
  if (baseline.nll.size() != n_docs || fwl.nll.size() != n_docs)
    throw AlignmentError("analyze: score streams cover " + std::to_string(baseline.nll.size()) +
                         " and " + std::to_string(fwl.nll.size()) + " documents, corpus has " +
                         std::to_string(n_docs));
  std::map<TokenId, std::size_t> freq;
  for (std::size_t d = 0; d < n_docs; ++d) {
    const auto& doc = corpus.documents[d];
    const std::size_t predicted = doc.empty() ? 0 : doc.size() - 1;
    if (baseline.nll[d].size() != predicted || fwl.nll[d].size() != predicted)
      throw AlignmentError("analyze: document " + std::to_string(d) + " has " +
                           std::to_string(predicted) + " predicted tokens but the streams have " +
                           std::to_string(baseline.nll[d].size()) + " and " +
                           std::to_string(fwl.nll[d].size()));
    for (std::size_t j = 1; j < doc.size(); ++j) ++freq[doc[j]];
  }

  struct Acc {
    std::size_t n = 0;
    double sum = 0;
  };
  std::map<std::pair<int, std::string>, Acc> acc;  // ordered by group then label key
  std::map<std::string, int> label_order;
  Acc first, repeat;
  auto add = [&](int group_order, const std::string& key, double v) {
    auto& a = acc[{group_order, key}];
    ++a.n;
    a.sum += v;
  };
  AnalysisReport report;
  for (std::size_t d = 0; d < n_docs; ++d) {
    const auto& doc = corpus.documents[d];
    const std::size_t predicted = doc.empty() ? 0 : doc.size() - 1;
    std::map<TokenId, std::size_t> seen;
    for (std::size_t j = 0; j < predicted; ++j) {
      const TokenId tok = doc[j + 1];
      const double imp = static_cast<double>(baseline.nll[d][j]) - static_cast<double>(fwl.nll[d][j]);
      const std::size_t decile = std::min<std::size_t>(9, 10 * j / predicted);
      char pos[16];
      std::snprintf(pos, sizeof(pos), "%02zu", decile);
      add(0, pos, imp);
      const auto bin = static_cast<int>(std::floor(std::log2(static_cast<double>(freq[tok]))));
      char fb[16];
      std::snprintf(fb, sizeof(fb), "%02d", bin);
      add(1, fb, imp);
      const std::size_t s = seen[tok]++;
      const std::string rl = repeat_label(s);
      const int rank = s == 0 ? 0 : s == 1 ? 1 : s == 2 ? 2 : s <= 4 ? 3 : 4;
      add(2, std::to_string(rank) + rl, imp);
      Acc& fr = s == 0 ? first : repeat;
      ++fr.n;
      fr.sum += imp;
      ++report.tokens;
    }
  }
  for (const auto& [key, a] : acc) {
    Bucket b;
    b.count = a.n;
    b.mean_improvement = a.n ? a.sum / static_cast<double>(a.n) : 0;
    if (key.first == 0) {
      const int dec = std::stoi(key.second);
      b.group = "position";
      b.label = std::to_string(dec * 10) + "-" + std::to_string(dec * 10 + 10) + "%";
    } else if (key.first == 1) {
      const int bin = std::stoi(key.second);
      b.group = "frequency";
      b.label = "2^" + std::to_string(bin);
    } else {
      b.group = "repeat";
      b.label = key.second.substr(1);
    }
    report.buckets.push_back(std::move(b));
  }
  report.repeat_fraction =
      report.tokens ? static_cast<double>(repeat.n) / static_cast<double>(report.tokens) : 0;
  report.first_occurrence_improvement = first.n ? first.sum / static_cast<double>(first.n) : 0;
  report.repeat_improvement = repeat.n ? repeat.sum / static_cast<double>(repeat.n) : 0;
  return report;
}

void write_analysis_csv(std::ostream& out, const AnalysisReport& r) {
  out << "group,bucket,count,mean_nll_improvement\n" << std::setprecision(10);
  for (const auto& b : r.buckets)
    out << b.group << ',' << b.label << ',' << b.count << ',' << b.mean_improvement << '\n';
  out << "summary,first-occurrence,,"
      << r.first_occurrence_improvement << '\n';
  out << "summary,any-repeat,," << r.repeat_improvement << '\n';
  out << "summary,repeat-fraction,," << r.repeat_fraction << '\n';
  out << "summary,tokens,," << r.tokens << '\n';
}

// ---------------------------------------------------------------------------

FlopReport flop_report(const ModelConfig& config, std::size_t seq_len, std::size_t chunk_size,
                       FastMask mask) {
  const BackboneConfig& b = config.backbone;
  const std::size_t t = std::min(seq_len, b.max_seq_len);
  FlopReport r;
  r.backbone = backbone_forward_flops(b, t, b.memory_len) / t;
  const HeadFlops h = head_flops_per_token(b.d_model, config.d_hidden, b.vocab_size, t, chunk_size, mask);
  r.head_slow = h.slow_forward;
  r.softmax = h.softmax;
  if (!mask.empty()) {
    r.position_backward = h.position_backward;
    r.fast_pass = h.fast_pass;
    r.fast_softmax = h.softmax;
  }
  return r;
}

BenchReport bench(const Model& model, const Corpus& corpus, std::size_t seq_len,
                  std::size_t chunk_size, const DynamicEvalOptions& dynamic, int repeats) {
  BenchReport r;
  r.flops = flop_report(model.config, seq_len, chunk_size, model.steps.mask);
  auto rate = [&](auto&& run) {
    double best = 0;
    for (int i = 0; i < std::max(1, repeats); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const CorpusScore s = run();
      const double secs = seconds_since(t0);
      if (secs > 0) best = std::max(best, static_cast<double>(s.tokens) / secs);
    }
    return best;
  };
  ScoreOptions o;
  o.seq_len = seq_len;
  o.chunk_size = chunk_size;
  o.variant = Variant::baseline;
  r.baseline_tokens_per_second = rate([&] { return score_variant(model, corpus, o); });
  o.variant = Variant::fwl;
  r.fwl_tokens_per_second = rate([&] { return score_variant(model, corpus, o); });
  r.dynamic_tokens_per_second = rate([&] { return dynamic_evaluate(model, corpus, dynamic); });
  return r;
}

nlohmann::json to_json(const BenchReport& r) {
  const FlopReport& f = r.flops;
  const double base = static_cast<double>(f.baseline_total());
  return nlohmann::json{
      {"flops_per_token",
       {{"backbone", f.backbone},
        {"head_slow", f.head_slow},
        {"softmax", f.softmax},
        {"position_backward", f.position_backward},
        {"fast_pass", f.fast_pass},
        {"fast_softmax", f.fast_softmax},
        {"baseline_total", f.baseline_total()},
        {"fwl_total", f.fwl_total()},
        {"fwl_overhead", base > 0 ? static_cast<double>(f.fwl_total()) / base - 1 : 0.0}}},
      {"tokens_per_second",
       {{"baseline", r.baseline_tokens_per_second},
        {"fwl", r.fwl_tokens_per_second},
        {"dynamic_evaluation", r.dynamic_tokens_per_second}}},
      {"cost_per_token_vs_baseline",
       {{"fwl", r.fwl_tokens_per_second > 0 ? r.baseline_tokens_per_second / r.fwl_tokens_per_second : 0.0},
        {"dynamic_evaluation", r.dynamic_tokens_per_second > 0
                                   ? r.baseline_tokens_per_second / r.dynamic_tokens_per_second
                                   : 0.0}}}};
}

// ---------------------------------------------------------------------------

Generation generate(const Model& model, const Tokenizer& tokenizer, std::string_view prompt,
                    const GenerateOptions& o) {
  const BackboneConfig& bc = model.config.backbone;
  const Resolved r = resolve(model, o.variant, o.global_step, o.test_time_mask);
  const FastMask mask = r.mode == HeadMode::slow ? FastMask::none() : r.steps.mask;
  StepSizes steps = r.steps;
  steps.mask = mask;

  Generation g;
  g.tokens.push_back(kBosId);
  for (const auto& piece : tokenizer.split(prompt)) {
    const TokenId id = tokenizer.vocab.id(piece);
    if (id == kUnkId && piece != kUnkToken) ++g.unknown_prompt_tokens;
    g.tokens.push_back(id);
  }
  g.prompt_length = g.tokens.size();

  const std::size_t len = bc.max_seq_len;
  Rng rng(o.seed);
  SegmentMemory memory;
  StreamState carry = StreamState::zeros(model.head, mask);
  StreamState sums = carry;
  auto base_offsets = [&]() {
    StreamState s = StreamState::zeros(model.head, mask);
    for (std::size_t k = 0; k < kHeadTensorCount; ++k)
      if (mask.has(static_cast<HeadTensor>(k))) s.recent[k] = carry.effective(static_cast<HeadTensor>(k), r.decays);
    return s;
  };
  StreamState base = base_offsets();

  for (std::size_t p = 0; g.losses.size() < o.n_tokens; ++p) {
    const std::size_t wb = p - p % len;
    if (p > 0 && p == wb) {
      const std::span<const TokenId> window(g.tokens.data() + wb - len, len);
      memory = encode_segment(bc, model.backbone, window, memory).memory;
      StreamState next = carry;
      for (std::size_t k = 0; k < kHeadTensorCount; ++k) {
        if (!mask.has(static_cast<HeadTensor>(k))) continue;
        next.history[k] = carry.effective(static_cast<HeadTensor>(k), r.decays);
        next.recent[k] = sums.recent[k];
      }
      carry = std::move(next);
      sums = StreamState::zeros(model.head, mask);
      base = base_offsets();
    }
    const std::span<const TokenId> context(g.tokens.data() + wb, p - wb + 1);
    const Matrix hidden = encode_segment(bc, model.backbone, context, memory).hidden;
    const auto h = hidden.row(hidden.rows() - 1);

    if (p + 1 < g.prompt_length) {
      sums = absorb_token(model.head, mask, sums, h, g.tokens[p + 1]);
      continue;
    }
    StreamState offsets = base;
    for (std::size_t k = 0; k < kHeadTensorCount; ++k)
      if (mask.has(static_cast<HeadTensor>(k))) add_inplace(offsets.recent[k], sums.recent[k]);
    const GenerateResult step = generate_step(model.head, steps, offsets, h, o.temperature, rng);
    g.tokens.push_back(step.token);
    g.losses.push_back(step.loss);
    sums = absorb_token(model.head, mask, sums, h, step.token);
  }
  g.text = tokenizer.decode(std::span<const TokenId>(g.tokens).subspan(g.prompt_length));
  return g;
}

double repeated_ngram_fraction(std::span<const TokenId> tokens, std::size_t n) {
  if (n == 0 || tokens.size() < n) return 0;
  std::set<std::vector<TokenId>> seen;
  std::size_t repeats = 0, total = 0;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::vector<TokenId> gram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                              tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
    if (!seen.insert(std::move(gram)).second) ++repeats;
    ++total;
  }
  return static_cast<double>(repeats) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------

VerifyReport run_verification(std::uint64_t seed) {
  VerifyReport rep;
  const std::size_t ts[] = {1, 2, 17, 64};
  const std::size_t ds[] = {4, 16, 32};
  const std::size_t vs[] = {3, 17};
  const FastMask masks[] = {FastMask::bias_only(), FastMask::vectors_only(),
                            FastMask::matrices_only(), FastMask::all()};
  for (std::size_t i = 0; i < 50; ++i) {
    const std::size_t t = ts[i % 4], d = ds[(i / 4) % 3], v = vs[(i / 12) % 2];
    const FastMask mask = masks[(i + i / 4) % 4];
    Rng rng(seed + i);
    HeadParams p = init_head(d, 2 * d, v, rng);
    p.a = random_vector(2 * d, rng, Real(0.3));
    p.b = random_vector(d, rng, Real(0.3));
    for (auto& x : p.ln_gain) x = Real(1) + Real(0.3) * static_cast<Real>(rng.normal());
    p.ln_bias = random_vector(d, rng, Real(0.3));
    p.c = random_vector(v, rng, Real(0.3));
    const Matrix h = random_matrix(t, d, rng, 1);
    std::vector<TokenId> y(t);
    for (auto& x : y) x = static_cast<TokenId>(rng.below(v));
    StepSizes steps = StepSizes::uniform(0, mask);
    for (auto& a : steps.alpha) a = Real(0.02) * static_cast<Real>(rng.uniform());
    const PositionTape tape = slow_forward(p, h, y);
    const PositionGrads g = per_position_grads(p, tape, y);
    FastOptions fo;
    fo.chunk_size = 1 + i % 7;
    const FastPass f = fast_forward(p, steps, tape, g, y, nullptr, nullptr, fo);
    const Vector ref = sequential_fast_forward(p, steps, h, y);
    rep.oracle_max_error = std::max(rep.oracle_max_error, static_cast<double>(max_abs_diff(f.losses, ref)));
    ++rep.oracle_instances;
  }

  Rng rng(seed ^ 0xa77e);
  for (std::size_t t : {1, 5, 64, 200, 512}) {
    const Matrix q = random_matrix(t, 8, rng, 1), k = random_matrix(t, 8, rng, 1),
                 v = random_matrix(t, 6, rng, 1);
    const KVState init{random_matrix(8, 6, rng, 1)};
    for (std::size_t c : {std::size_t{1}, std::size_t{7}, std::size_t{64}, t}) {
      for (bool with_init : {false, true}) {
        const std::optional<KVState> s = with_init ? std::optional<KVState>(init) : std::nullopt;
        const AttentionResult a = causal_linear_attention(q, k, v, s);
        const AttentionResult b = chunked_causal_linear_attention(q, k, v, c, s);
        rep.attention_max_error = std::max(
            {rep.attention_max_error, static_cast<double>(max_abs_diff(a.output.flat(), b.output.flat())),
             static_cast<double>(max_abs_diff(a.final_state.accumulator.flat(),
                                              b.final_state.accumulator.flat()))});
        ++rep.attention_cases;
      }
    }
  }
  return rep;
}

}  // namespace fwl
