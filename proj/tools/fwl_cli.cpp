#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "fwl/harness.hpp"
#include "fwl/training.hpp"

using namespace fwl;
using nlohmann::json;

namespace {

// Accepts both --some-flag and --some_flag so config files can use field names.
std::string flag(const std::string& name) {
  std::string under = name;
  for (auto& c : under)
    if (c == '-') c = '_';
  return under == name ? "--" + name : "--" + name + ",--" + under;
}

std::vector<std::string> read_documents(const std::string& path) {
  auto docs = split_documents(read_text_file(path));
  if (docs.empty()) throw ConfigError("corpus " + path + " contains no documents");
  return docs;
}

std::vector<Real> parse_grid(const std::string& text) {
  std::vector<Real> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(static_cast<Real>(std::stod(item)));
    } catch (const std::exception&) {
      throw ConfigError("bad step-size grid entry '" + item + "'");
    }
  }
  return out;
}

void write_nll(const std::string& path, const CorpusScore& s, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "doc,index,target,nll\n" << std::setprecision(17);
  for (std::size_t d = 0; d < s.nll.size(); ++d)
    for (std::size_t j = 0; j < s.nll[d].size(); ++j)
      out << d << ',' << j << ',' << corpus.documents[d][j + 1] << ',' << s.nll[d][j] << '\n';
}

CorpusScore read_nll(const std::string& path, const Corpus& corpus) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  CorpusScore s;
  s.nll.resize(corpus.documents.size());
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t d = 0, j = 0;
    unsigned long target = 0;
    double nll = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lu,%lf", &d, &j, &target, &nll) != 4)
      throw InputError(path + ":" + std::to_string(lineno) + ": malformed row");
    if (d >= s.nll.size() || j != s.nll[d].size() || j + 1 >= corpus.documents[d].size() ||
        corpus.documents[d][j + 1] != target)
      throw AlignmentError(path + ":" + std::to_string(lineno) + ": row does not align with the corpus");
    s.nll[d].push_back(static_cast<Real>(nll));
    s.total_nll += nll;
    ++s.tokens;
  }
  return s;
}

json score_json(const CorpusScore& s) {
  return json{{"perplexity", s.perplexity()}, {"mean_nll", s.mean_nll()}, {"tokens", s.tokens}};
}

void print(const json& j) { std::cout << std::setprecision(17) << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fast weight layers: training, scoring and analysis"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI file with option values (command line wins)");
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();

  // train ------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_path, dev_path, out_dir, tokenizer_kind = "char", vocab_path, init_path, resume_path;
  TrainConfig tc;
  ModelConfig mc;
  mc.backbone.memory_len = 32;
  std::string mode_name = "full", mask_name = "all", optimizer_name = "adam";
  bool first_order = false, no_streaming = false;
  std::size_t min_count = 1;
  train->add_option("--train", train_path, "Training text")->required()->check(CLI::ExistingFile);
  train->add_option("--dev", dev_path, "Dev text")->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--tokenizer", tokenizer_kind, "char or word")->capture_default_str();
  train->add_option("--vocab", vocab_path, "Vocabulary file (one token per line)")->check(CLI::ExistingFile);
  train->add_option(flag("min-count"), min_count, "Minimum count for a vocabulary entry")->capture_default_str();
  train->add_option("--init", init_path, "Start from this checkpoint's weights")->check(CLI::ExistingFile);
  train->add_option("--resume", resume_path, "Resume a run from its checkpoint")->check(CLI::ExistingFile);
  train->add_option(flag("d-model"), mc.backbone.d_model)->capture_default_str();
  train->add_option(flag("n-layers"), mc.backbone.n_layers)->capture_default_str();
  train->add_option(flag("n-heads"), mc.backbone.n_heads)->capture_default_str();
  train->add_option(flag("d-ff"), mc.backbone.d_ff)->capture_default_str();
  train->add_option(flag("memory-len"), mc.backbone.memory_len)->capture_default_str();
  train->add_option(flag("d-hidden"), mc.d_hidden)->capture_default_str();
  train->add_option(flag("alpha-init"), mc.alpha_init)->capture_default_str();
  train->add_option(flag("decay-init"), mc.decay_init)->capture_default_str();
  train->add_option(flag("learning-rate"), tc.learning_rate)->capture_default_str();
  train->add_option(flag("fast-learning-rate"), tc.fast_learning_rate, "For step sizes and decays; 0 uses learning-rate")->capture_default_str();
  train->add_option(flag("beta1"), tc.beta1)->capture_default_str();
  train->add_option(flag("beta2"), tc.beta2)->capture_default_str();
  train->add_option(flag("adam-eps"), tc.adam_eps)->capture_default_str();
  train->add_option(flag("weight-decay"), tc.weight_decay)->capture_default_str();
  train->add_option(flag("batch-size"), tc.batch_size)->capture_default_str();
  train->add_option(flag("seq-len"), tc.seq_len)->capture_default_str();
  train->add_option(flag("steps"), tc.steps)->capture_default_str();
  train->add_option(flag("warmup-steps"), tc.warmup_steps)->capture_default_str();
  train->add_option(flag("clip-norm"), tc.clip_norm)->capture_default_str();
  train->add_option(flag("mode"), mode_name, "full, slow-only or fwl-finetune")->capture_default_str();
  train->add_option(flag("mask"), mask_name, "all, none, bias-only, vectors, matrices or a list such as U,E,c")->capture_default_str();
  train->add_option(flag("chunk-size"), tc.chunk_size)->capture_default_str();
  train->add_option(flag("optimizer"), optimizer_name, "adam or sgd")->capture_default_str();
  train->add_flag(flag("first-order"), first_order, "Treat per-position gradients as constants");
  train->add_flag(flag("no-streaming"), no_streaming, "Sample independent windows instead of walking documents");
  train->add_flag(flag("full-batch"), tc.full_batch, "Use every training document each step");
  train->add_option(flag("eval-every"), tc.eval_every)->capture_default_str();
  train->add_option(flag("checkpoint-every"), tc.checkpoint_every)->capture_default_str();

  // score ------------------------------------------------------------------
  auto* score = app.add_subcommand("score", "Perplexity of a corpus under one variant");
  std::string ckpt_path, corpus_path, variant_name = "fwl", tt_mask = "all", grid_text, tune_dev, nll_out;
  ScoreOptions so;
  score->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  score->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  score->add_option("--variant", variant_name, "baseline, fwl, test-time-only or bias-only")->capture_default_str();
  score->add_option(flag("seq-len"), so.seq_len)->capture_default_str();
  score->add_option(flag("chunk-size"), so.chunk_size)->capture_default_str();
  score->add_option(flag("global-step"), so.global_step, "Test-time-only step size")->capture_default_str();
  score->add_option(flag("test-time-mask"), tt_mask)->capture_default_str();
  score->add_option(flag("tune-grid"), grid_text, "Comma-separated step sizes tuned on --tune-dev");
  score->add_option(flag("tune-dev"), tune_dev, "Dev text for --tune-grid")->check(CLI::ExistingFile);
  score->add_option(flag("nll-out"), nll_out, "Write per-token NLL as CSV");

  // generate -----------------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "Sample text");
  std::string prompt;
  GenerateOptions go;
  gen->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  gen->add_option("--prompt", prompt)->capture_default_str();
  gen->add_option(flag("n-tokens"), go.n_tokens)->capture_default_str();
  gen->add_option("--temperature", go.temperature)->capture_default_str();
  gen->add_option("--variant", variant_name)->capture_default_str();
  gen->add_option(flag("global-step"), go.global_step)->capture_default_str();
  gen->add_option(flag("test-time-mask"), tt_mask)->capture_default_str();

  // dyneval ------------------------------------------------------------------
  auto* dyn = app.add_subcommand("dyneval", "Dynamic evaluation baseline");
  DynamicEvalOptions dopt;
  dyn->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  dyn->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  dyn->add_option(flag("step-size"), dopt.step_size)->capture_default_str();
  dyn->add_option(flag("chunk-len"), dopt.chunk_len)->capture_default_str();

  // ablate -------------------------------------------------------------------
  auto* abl = app.add_subcommand("ablate", "Ablation table");
  std::string slow_path, fwl_path, bias_path, csv_path;
  AblationInputs ai;
  abl->add_option(flag("slow-only"), slow_path, "Slow-only trained checkpoint");
  abl->add_option("--fwl", fwl_path, "FWL trained checkpoint");
  abl->add_option(flag("bias-only"), bias_path, "Bias-only trained checkpoint");
  abl->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  abl->add_option(flag("seq-len"), ai.seq_len)->capture_default_str();
  abl->add_option(flag("chunk-size"), ai.chunk_size)->capture_default_str();
  abl->add_option(flag("global-step"), ai.test_time_step, "Test-time-only step size")->capture_default_str();
  abl->add_option(flag("test-time-mask"), tt_mask)->capture_default_str();
  abl->add_option(flag("tune-grid"), grid_text, "Tune the test-time step on --tune-dev");
  abl->add_option(flag("tune-dev"), tune_dev)->check(CLI::ExistingFile);
  abl->add_option(flag("step-size"), ai.dynamic.step_size, "Dynamic evaluation step")->capture_default_str();
  abl->add_option(flag("chunk-len"), ai.dynamic.chunk_len, "Dynamic evaluation chunk")->capture_default_str();
  abl->add_option("--csv", csv_path, "Also write CSV here");

  // analyze ------------------------------------------------------------------
  auto* ana = app.add_subcommand("analyze", "Bucket NLL improvements");
  std::string base_nll, fwl_nll;
  ana->add_option("--checkpoint", ckpt_path, "Checkpoint providing the tokenizer")->required()->check(CLI::ExistingFile);
  ana->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  ana->add_option(flag("baseline-nll"), base_nll)->required()->check(CLI::ExistingFile);
  ana->add_option(flag("fwl-nll"), fwl_nll)->required()->check(CLI::ExistingFile);
  ana->add_option("--csv", csv_path, "Write CSV here instead of stdout");

  // bench --------------------------------------------------------------------
  auto* ben = app.add_subcommand("bench", "FLOP report and measured throughput");
  int repeats = 3;
  ben->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  ben->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  ben->add_option(flag("seq-len"), so.seq_len)->capture_default_str();
  ben->add_option(flag("chunk-size"), so.chunk_size)->capture_default_str();
  ben->add_option(flag("step-size"), dopt.step_size)->capture_default_str();
  ben->add_option(flag("chunk-len"), dopt.chunk_len)->capture_default_str();
  ben->add_option("--repeats", repeats)->capture_default_str();

  // verify -------------------------------------------------------------------
  auto* ver = app.add_subcommand("verify", "Oracle and kernel equivalence suites");

  // synth --------------------------------------------------------------------
  auto* syn = app.add_subcommand("synth", "Write the synthetic entity corpus");
  EntityCorpusConfig ec;
  std::string synth_out;
  syn->add_option("--out", synth_out)->required();
  syn->add_option("--documents", ec.documents)->capture_default_str();
  syn->add_option(flag("sentences"), ec.sentences_per_document)->capture_default_str();
  syn->add_option("--people", ec.people)->capture_default_str();
  syn->add_option(flag("fact-rate"), ec.fact_rate)->capture_default_str();
  syn->add_option(flag("mention-rate"), ec.mention_rate)->capture_default_str();
  syn->add_option(flag("name-pool"), ec.name_pool)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }

  try {
    auto load = [&]() { return load_checkpoint(ckpt_path); };

    if (*train) {
      tc.seed = seed;
      tc.mode = parse_train_mode(mode_name);
      tc.mask = FastMask::parse(mask_name);
      tc.second_order = !first_order;
      tc.streaming = !no_streaming;
      if (optimizer_name == "adam") tc.optimizer = OptimizerKind::adam;
      else if (optimizer_name == "sgd") tc.optimizer = OptimizerKind::sgd;
      else throw ConfigError("optimizer must be adam or sgd");
      if (tc.mode == TrainMode::slow_only && mask_name == "all") tc.mask = FastMask::none();

      FitInputs in;
      const auto train_docs = read_documents(train_path);
      if (!resume_path.empty() || !init_path.empty()) {
        in.tokenizer = load_checkpoint(resume_path.empty() ? init_path : resume_path).tokenizer;
      } else {
        in.tokenizer.kind = parse_tokenizer_kind(tokenizer_kind);
        if (!vocab_path.empty()) in.tokenizer.vocab = Vocabulary::load(vocab_path);
        else in.tokenizer = build_tokenizer(in.tokenizer.kind, train_docs, min_count);
      }
      in.train = encode_corpus(in.tokenizer, train_docs);
      if (!dev_path.empty()) in.dev = encode_corpus(in.tokenizer, read_documents(dev_path));
      mc.backbone.vocab_size = in.tokenizer.vocab.size();
      mc.backbone.max_seq_len = tc.seq_len;
      mc.backbone.seed = seed;
      mc.mask = tc.mask;
      in.model = mc;
      in.out_dir = out_dir;
      if (!init_path.empty()) in.init_checkpoint = init_path;
      if (!resume_path.empty()) in.resume_checkpoint = resume_path;
      const FitResult r = fit(in, tc, [&](const StepMetrics& m) {
        if (m.dev_perplexity)
          std::cerr << "step " << m.step << " loss " << m.loss << " dev_ppl " << *m.dev_perplexity << '\n';
      });
      print(json{{"final_checkpoint", (std::filesystem::path(out_dir) / "final.ckpt").string()},
                 {"best_dev_perplexity", r.best_dev_perplexity},
                 {"parameters", parameter_count(r.final_checkpoint.model)},
                 {"steps", r.final_checkpoint.step}});
    } else if (*score) {
      const Checkpoint ck = load();
      so.variant = parse_variant(variant_name);
      so.test_time_mask = FastMask::parse(tt_mask);
      const Corpus corpus = encode_for(ck, read_documents(corpus_path));
      json out;
      if (!grid_text.empty()) {
        if (tune_dev.empty()) throw ConfigError("--tune-grid needs --tune-dev");
        const TuneResult t = tune_global_step(ck.model, encode_for(ck, read_documents(tune_dev)),
                                              parse_grid(grid_text), so);
        so.global_step = t.best_step;
        out["tuned_step"] = t.best_step;
        out["tune_grid"] = t.grid;
      }
      const CorpusScore s = score_variant(ck.model, corpus, so);
      out.update(score_json(s));
      out["variant"] = std::string(to_string(so.variant));
      if (!nll_out.empty()) write_nll(nll_out, s, corpus);
      print(out);
    } else if (*gen) {
      const Checkpoint ck = load();
      go.seed = seed;
      go.variant = parse_variant(variant_name);
      go.test_time_mask = FastMask::parse(tt_mask);
      const Generation g = generate(ck.model, ck.tokenizer, prompt, go);
      if (g.unknown_prompt_tokens)
        std::cerr << "warning: " << g.unknown_prompt_tokens << " prompt token(s) mapped to <unk>\n";
      std::cout << g.text << std::endl;
    } else if (*dyn) {
      const Checkpoint ck = load();
      const Corpus corpus = encode_for(ck, read_documents(corpus_path));
      json out = score_json(dynamic_evaluate(ck.model, corpus, dopt));
      out["step_size"] = dopt.step_size;
      out["chunk_len"] = dopt.chunk_len;
      print(out);
    } else if (*abl) {
      auto maybe = [](const std::string& p) {
        return p.empty() ? std::optional<Checkpoint>() : std::optional<Checkpoint>(load_checkpoint(p));
      };
      const auto slow = maybe(slow_path), fw = maybe(fwl_path), bias = maybe(bias_path);
      const Checkpoint* any = slow ? &*slow : fw ? &*fw : bias ? &*bias : nullptr;
      if (!any) throw ConfigError("ablate needs --slow-only, --fwl and --bias-only checkpoints");
      for (const auto* c : {&slow, &fw, &bias})
        if (*c) ensure_same_tokenizer(any->tokenizer, (*c)->tokenizer);
      ai.slow_only = slow ? &slow->model : nullptr;
      ai.fwl = fw ? &fw->model : nullptr;
      ai.bias_only = bias ? &bias->model : nullptr;
      ai.test_time_mask = FastMask::parse(tt_mask);
      if (!grid_text.empty()) {
        if (tune_dev.empty() || !slow) throw ConfigError("--tune-grid needs --tune-dev and --slow-only");
        ScoreOptions t;
        t.seq_len = ai.seq_len;
        t.chunk_size = ai.chunk_size;
        t.test_time_mask = ai.test_time_mask;
        ai.test_time_step =
            tune_global_step(slow->model, encode_for(*slow, read_documents(tune_dev)), parse_grid(grid_text), t).best_step;
      }
      const Corpus corpus = encode_for(*any, read_documents(corpus_path));
      const auto rows = ablate(ai, corpus);
      write_ablation_table(std::cout, rows);
      if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw IoError("cannot write " + csv_path);
        write_ablation_csv(out, rows);
      }
    } else if (*ana) {
      const Checkpoint ck = load();
      const Corpus corpus = encode_for(ck, read_documents(corpus_path));
      const AnalysisReport r = analyze(corpus, read_nll(base_nll, corpus), read_nll(fwl_nll, corpus));
      if (csv_path.empty()) {
        write_analysis_csv(std::cout, r);
      } else {
        std::ofstream out(csv_path);
        if (!out) throw IoError("cannot write " + csv_path);
        write_analysis_csv(out, r);
      }
    } else if (*ben) {
      const Checkpoint ck = load();
      const Corpus corpus = encode_for(ck, read_documents(corpus_path));
      print(to_json(bench(ck.model, corpus, so.seq_len, so.chunk_size, dopt, repeats)));
    } else if (*ver) {
      const VerifyReport r = run_verification(seed);
      const bool ok = r.oracle_max_error <= 1e-9 && r.attention_max_error <= 1e-10;
      print(json{{"oracle_instances", r.oracle_instances},
                 {"oracle_max_abs_error", r.oracle_max_error},
                 {"attention_cases", r.attention_cases},
                 {"attention_max_abs_error", r.attention_max_error},
                 {"pass", ok}});
      return ok ? 0 : static_cast<int>(ExitCode::numerical);
    } else if (*syn) {
      ec.seed = seed;
      std::string text;
      for (const auto& d : generate_entity_documents(ec)) text += d + "\n\n";
      write_text_file(synth_out, text);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::usage);
  }
  return 0;
}
