#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "fwl/harness.hpp"

namespace fwl {
namespace {

Model small_model(std::size_t vocab, FastMask mask = FastMask::all(), std::uint64_t seed = 1) {
  ModelConfig c;
  c.backbone.vocab_size = vocab;
  c.backbone.d_model = 16;
  c.backbone.n_layers = 1;
  c.backbone.n_heads = 2;
  c.backbone.d_ff = 32;
  c.backbone.max_seq_len = 10;
  c.backbone.memory_len = 5;
  c.backbone.seed = seed;
  c.d_hidden = 16;
  c.mask = mask;
  c.alpha_init = Real(0.05);
  Model m = init_model(c);
  Rng rng(seed + 100);
  for (auto& x : m.head.c) x = Real(0.3) * static_cast<Real>(rng.normal());
  return m;
}

Corpus random_corpus(std::size_t docs, std::size_t len, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  Corpus c;
  for (std::size_t d = 0; d < docs; ++d) {
    std::vector<TokenId> doc{kBosId};
    const std::size_t n = len + rng.below(len);
    for (std::size_t i = 0; i < n; ++i) doc.push_back(static_cast<TokenId>(2 + rng.below(vocab - 2)));
    c.documents.push_back(doc);
  }
  return c;
}

ScoreOptions opts(Variant v) {
  ScoreOptions o;
  o.variant = v;
  o.seq_len = 10;
  o.chunk_size = 4;
  return o;
}

TEST(Score, ZeroStepSizesMatchBaseline) {
  Model m = small_model(9);
  m.steps.alpha.fill(0);
  const Corpus c = random_corpus(4, 25, 9, 1);
  const double base = score_variant(m, c, opts(Variant::baseline)).perplexity();
  EXPECT_NEAR(score_variant(m, c, opts(Variant::fwl)).perplexity(), base, 1e-12);
  EXPECT_NEAR(score_variant(m, c, opts(Variant::bias_only)).perplexity(), base, 1e-12);
  ScoreOptions t = opts(Variant::test_time_only);
  t.global_step = 0;
  EXPECT_NEAR(score_variant(m, c, t).perplexity(), base, 1e-12);
}

TEST(Score, EmptyMaskIsTheSlowPathBitForBit) {
  const Model m = small_model(9, FastMask::none());
  const Corpus c = random_corpus(3, 25, 9, 2);
  const CorpusScore a = score_variant(m, c, opts(Variant::baseline));
  const CorpusScore b = score_variant(m, c, opts(Variant::fwl));
  EXPECT_EQ(a.nll, b.nll);
}

TEST(Score, UniformTokensGivePerplexityNearTheirCount) {
  // 38 equiprobable tokens; a model trained on them should approach 38.
  const Corpus train = random_corpus(20, 60, 40, 3);
  const Corpus dev = random_corpus(6, 60, 40, 33);
  FitInputs in;
  in.train = train;
  in.tokenizer.vocab = Vocabulary();
  in.model = small_model(40).config;
  in.out_dir = std::filesystem::temp_directory_path() / "fwl_test_uniform";
  TrainConfig tc;
  tc.steps = 150;
  tc.batch_size = 4;
  tc.seq_len = 10;
  tc.warmup_steps = 10;
  tc.mask = FastMask::all();
  const Model m = fit(in, tc).final_checkpoint.model;
  for (Variant v : {Variant::baseline, Variant::fwl, Variant::bias_only, Variant::test_time_only}) {
    ScoreOptions o = opts(v);
    o.global_step = Real(1e-3);
    const double ppl = score_variant(m, dev, o).perplexity();
    EXPECT_NEAR(ppl, 38.0, 38.0 * 0.1) << to_string(v);
  }
}

TEST(Score, DocumentOrderDoesNotMatter) {
  const Model m = small_model(9);
  Corpus c = random_corpus(5, 20, 9, 4);
  const CorpusScore a = score_variant(m, c, opts(Variant::fwl));
  std::reverse(c.documents.begin(), c.documents.end());
  const CorpusScore b = score_variant(m, c, opts(Variant::fwl));
  for (std::size_t d = 0; d < 5; ++d) EXPECT_EQ(a.nll[d], b.nll[4 - d]);
}

TEST(Score, VariantNamesParse) {
  EXPECT_EQ(parse_variant("test-time-only"), Variant::test_time_only);
  EXPECT_THROW(parse_variant("fast"), ConfigError);
}

TEST(Score, TokenizerMismatchIsConfigError) {
  const Tokenizer a = build_tokenizer(TokenizerKind::word, {"x y"});
  const Tokenizer b = build_tokenizer(TokenizerKind::word, {"x z"});
  EXPECT_NO_THROW(ensure_same_tokenizer(a, a));
  EXPECT_THROW(ensure_same_tokenizer(a, b), ConfigError);
  Checkpoint ck;
  ck.model = small_model(9);
  ck.tokenizer = a;
  EXPECT_THROW(encode_for(ck, {"x"}), ConfigError);
}

TEST(Tune, GridOfZeroReturnsZeroAndBaseline) {
  const Model m = small_model(9, FastMask::none());
  const Corpus c = random_corpus(3, 20, 9, 5);
  const TuneResult r = tune_global_step(m, c, {0}, opts(Variant::test_time_only));
  EXPECT_EQ(r.best_step, 0);
  EXPECT_NEAR(r.best_perplexity, score_variant(m, c, opts(Variant::baseline)).perplexity(), 1e-12);
}

TEST(Tune, ArgminDominatesBaselineAndPrefersSmallerSteps) {
  const Model m = small_model(9, FastMask::none());
  const Corpus c = random_corpus(3, 20, 9, 6);
  const double base = score_variant(m, c, opts(Variant::baseline)).perplexity();
  const TuneResult r = tune_global_step(m, c, {0.3, 0, 0.01, 0.1}, opts(Variant::test_time_only));
  EXPECT_LE(r.best_perplexity, base);
  EXPECT_EQ(r.grid.front().first, 0);
  // A mask that ignores the step makes every grid value tie.
  ScoreOptions o = opts(Variant::test_time_only);
  o.test_time_mask = FastMask::none();
  EXPECT_EQ(tune_global_step(m, c, {0.5, 0.2}, o).best_step, Real(0.2));
  EXPECT_THROW(tune_global_step(m, c, {}, o), ConfigError);
}

TEST(DynamicEval, ZeroStepEqualsBaseline) {
  const Model m = small_model(9);
  const Corpus c = random_corpus(3, 25, 9, 7);
  DynamicEvalOptions d;
  d.step_size = 0;
  d.chunk_len = 10;
  const CorpusScore a = dynamic_evaluate(m, c, d);
  const CorpusScore b = score_variant(m, c, opts(Variant::baseline));
  EXPECT_EQ(a.nll, b.nll);
}

TEST(DynamicEval, AdaptsToRepetitiveDocuments) {
  const Model m = small_model(9);
  Corpus c;
  for (int d = 0; d < 2; ++d) {
    std::vector<TokenId> doc{kBosId};
    for (int i = 0; i < 60; ++i) doc.push_back(static_cast<TokenId>(2 + (i + d) % 3));
    c.documents.push_back(doc);
  }
  DynamicEvalOptions d;
  d.step_size = 0.5;
  d.chunk_len = 10;
  EXPECT_LT(dynamic_evaluate(m, c, d).perplexity(), score_variant(m, c, opts(Variant::baseline)).perplexity());
}

TEST(Ablate, FiveRowsAndMissingCheckpointsAreNamed) {
  const Model slow = small_model(9, FastMask::none());
  const Model fwl = small_model(9);
  const Model bias = small_model(9, FastMask::bias_only());
  const Corpus c = random_corpus(2, 15, 9, 8);
  AblationInputs in;
  in.slow_only = &slow;
  in.fwl = &fwl;
  in.bias_only = &bias;
  in.seq_len = 10;
  in.dynamic.chunk_len = 10;
  const auto rows = ablate(in, c);
  ASSERT_EQ(rows.size(), 5u);
  const char* names[] = {"No FWL", "FWL", "Test-time only", "Bias only", "Dynamic Evaluation"};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(rows[i].name, names[i]);
    EXPECT_GT(rows[i].perplexity, 1);
    EXPECT_GT(rows[i].tokens_per_second, 0);
  }
  std::ostringstream csv, table;
  write_ablation_csv(csv, rows);
  write_ablation_table(table, rows);
  const std::string csv_text = csv.str();
  EXPECT_EQ(std::count(csv_text.begin(), csv_text.end(), '\n'), 6);
  EXPECT_NE(table.str().find("Dynamic Evaluation"), std::string::npos);

  in.bias_only = nullptr;
  try {
    ablate(in, c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("Bias only"), std::string::npos);
  }
}

TEST(Analyze, IdenticalStreamsGiveZeroBucketsThatPartitionTokens) {
  const Model m = small_model(9);
  const Corpus c = random_corpus(4, 30, 9, 9);
  const CorpusScore s = score_variant(m, c, opts(Variant::baseline));
  const AnalysisReport r = analyze(c, s, s);
  EXPECT_EQ(r.tokens, c.token_count());
  std::map<std::string, std::size_t> totals;
  for (const auto& b : r.buckets) {
    EXPECT_EQ(b.mean_improvement, 0);
    totals[b.group] += b.count;
  }
  ASSERT_EQ(totals.size(), 3u);
  for (const auto& [g, n] : totals) EXPECT_EQ(n, r.tokens) << g;
  EXPECT_EQ(r.find("position", "0-10%").mean_improvement, 0);
  EXPECT_GT(r.repeat_fraction, 0.5);
}

TEST(Analyze, RepeatBucketsAndFractionOnAHandExample) {
  Corpus c;
  c.documents.push_back({kBosId, 2, 3, 2, 2});
  CorpusScore base, fwl;
  base.nll = {{1, 1, 1, 1}};
  fwl.nll = {{1.5, 1, 0.5, 0}};
  const AnalysisReport r = analyze(c, base, fwl);
  EXPECT_DOUBLE_EQ(r.repeat_fraction, 0.5);
  EXPECT_DOUBLE_EQ(r.first_occurrence_improvement, -0.25);
  EXPECT_DOUBLE_EQ(r.repeat_improvement, 0.75);
  EXPECT_EQ(r.find("repeat", "repeat-1").count, 1u);
  EXPECT_DOUBLE_EQ(r.find("repeat", "repeat-2").mean_improvement, 1);
  EXPECT_EQ(r.find("frequency", "2^1").count, 3u);  // token 2 occurs three times
  EXPECT_EQ(r.find("frequency", "2^0").count, 1u);
}

TEST(Analyze, MisalignedStreamsAreRejected) {
  Corpus c;
  c.documents.push_back({kBosId, 2, 3});
  CorpusScore a, b;
  a.nll = {{1, 1}};
  b.nll = {{1}};
  EXPECT_THROW(analyze(c, a, b), AlignmentError);
  b.nll = {{1, 1}, {1}};
  EXPECT_THROW(analyze(c, a, b), AlignmentError);
}

TEST(Flops, HandCountedSmallConfiguration) {
  BackboneConfig b;
  b.vocab_size = 5;
  b.d_model = 4;
  b.n_layers = 1;
  b.n_heads = 2;
  b.d_ff = 8;
  b.max_seq_len = 2;
  // q,o: 2*2*4*4 each; k,v: 2*2*2*4*4; scores+values over 1+2 keys: 4*3*4; MLP: 4*2*4*8
  EXPECT_EQ(backbone_forward_flops(b, 2, 0), 64u + 64u + 128u + 48u + 256u);
  const HeadFlops h = head_flops_per_token(2, 3, 5, 4, 4, FastMask::bias_only());
  EXPECT_EQ(h.slow_forward, 2u * 2 * 3 * 2 + 16);
  EXPECT_EQ(h.softmax, 2u * 2 * 5 + 15);
  EXPECT_EQ(h.fast_pass, h.slow_forward + 15);
}

TEST(Flops, OverheadVanishesWithDepthAndSitsInTheHead) {
  ModelConfig c = small_model(9).config;
  double last = 1e9;
  for (std::size_t layers : {1, 4, 16, 64, 256}) {
    c.backbone.n_layers = layers;
    const FlopReport f = flop_report(c, 10, 4, FastMask::all());
    const double ratio = static_cast<double>(f.fwl_total()) / static_cast<double>(f.baseline_total());
    EXPECT_LT(ratio, last);
    last = ratio;
    EXPECT_EQ(f.fwl_total() - f.baseline_total(), f.position_backward + f.fast_pass + f.fast_softmax);
  }
  EXPECT_LT(last, 1.01);
  const FlopReport none = flop_report(c, 10, 4, FastMask::none());
  EXPECT_EQ(none.fwl_total(), none.baseline_total());
}

// Scores bos + prompt + generated tokens as one document with the model's windows.
Vector teacher_forced(const Model& m, const std::vector<TokenId>& tokens, const SegmentScoreOptions& o) {
  StreamCarry carry = fresh_carry(m, o.steps ? o.steps->mask : m.steps.mask);
  Vector out;
  const std::span<const TokenId> all(tokens);
  for (const Window& w : document_windows(tokens.size(), m.config.backbone.max_seq_len)) {
    const Vector l = score_segment(m, all.subspan(w.begin, w.length), all.subspan(w.begin + 1, w.length), carry, o);
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

TEST(Generate, TeacherForcingReproducesGeneratorLosses) {
  Model m = small_model(9);
  for (auto& d : m.decays.raw) d = Real(0.4);
  const Tokenizer tok = build_tokenizer(TokenizerKind::word, {"a b c d e f g"});
  GenerateOptions o;
  o.n_tokens = 27;  // crosses several windows
  o.seed = 3;
  const Generation g = generate(m, tok, "a b c d", o);
  ASSERT_EQ(g.losses.size(), 27u);
  EXPECT_EQ(g.prompt_length, 5u);
  SegmentScoreOptions so;
  so.chunk_size = 3;
  const Vector tf = teacher_forced(m, g.tokens, so);
  for (std::size_t i = 0; i < g.losses.size(); ++i)
    EXPECT_NEAR(tf[g.prompt_length - 1 + i], g.losses[i], 1e-9) << i;
}

TEST(Generate, ZeroStepGreedyMatchesBaselineAndIsDeterministic) {
  Model m = small_model(9);
  m.steps.alpha.fill(0);
  const Tokenizer tok = build_tokenizer(TokenizerKind::word, {"a b c d e f g"});
  GenerateOptions o;
  o.temperature = 0;
  o.n_tokens = 15;
  const Generation fast = generate(m, tok, "a b", o);
  o.variant = Variant::baseline;
  const Generation base = generate(m, tok, "a b", o);
  EXPECT_EQ(fast.tokens, base.tokens);

  o.variant = Variant::fwl;
  o.temperature = 1;
  o.seed = 8;
  EXPECT_EQ(generate(m, tok, "a b", o).text, generate(m, tok, "a b", o).text);
}

TEST(Generate, UnknownPromptWordsAreCounted) {
  const Model m = small_model(9);
  const Tokenizer tok = build_tokenizer(TokenizerKind::word, {"a b c d e f g"});
  GenerateOptions o;
  o.n_tokens = 2;
  const Generation g = generate(m, tok, "a zebra b quagga", o);
  EXPECT_EQ(g.unknown_prompt_tokens, 2u);
  EXPECT_EQ(g.tokens[2], kUnkId);
}

TEST(Generate, RepeatedNgramFraction) {
  const std::vector<TokenId> t{1, 2, 1, 2, 1};
  EXPECT_DOUBLE_EQ(repeated_ngram_fraction(t, 2), 0.5);
  EXPECT_DOUBLE_EQ(repeated_ngram_fraction(t, 9), 0);
}

TEST(Verify, OracleAndKernelSuitesPass) {
  const VerifyReport r = run_verification(17);
  EXPECT_EQ(r.oracle_instances, 50u);
  EXPECT_LE(r.oracle_max_error, 1e-9);
  EXPECT_LE(r.attention_max_error, 1e-10);
}

}  // namespace
}  // namespace fwl
