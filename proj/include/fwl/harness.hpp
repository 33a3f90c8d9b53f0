#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fwl/checkpoint.hpp"
#include "fwl/corpus.hpp"
#include "fwl/model.hpp"
#include "fwl/training.hpp"

namespace fwl {

enum class Variant { baseline, fwl, test_time_only, bias_only };
Variant parse_variant(std::string_view name);
std::string_view to_string(Variant v);

struct ScoreOptions {
  Variant variant = Variant::fwl;
  std::size_t seq_len = 32;
  std::size_t chunk_size = kDefaultChunkSize;
  Real global_step = 0;                  // test-time-only step size
  FastMask test_time_mask = FastMask::all();
};

// Throws ConfigError when a corpus tokenizer differs from the checkpoint's.
void ensure_same_tokenizer(const Tokenizer& checkpoint, const Tokenizer& corpus);

// Encodes raw documents with the checkpoint's tokenizer.
Corpus encode_for(const Checkpoint& checkpoint, const std::vector<std::string>& documents);

// Baseline runs the slow head. Fwl uses the model's learned step sizes and
// decays. Test-time-only applies global_step to every tensor of
// test_time_mask with the default decay. Bias-only restricts the model's
// learned step sizes to the softmax bias.
CorpusScore score_variant(const Model& model, const Corpus& corpus, const ScoreOptions& options);

struct TuneResult {
  Real best_step = 0;
  double best_perplexity = 0;
  std::vector<std::pair<Real, double>> grid;  // (step, perplexity)
};

// Argmin of test-time-only perplexity over `grid`; ties go to the smaller step.
TuneResult tune_global_step(const Model& model, const Corpus& dev, const std::vector<Real>& grid,
                            const ScoreOptions& options);

struct DynamicEvalOptions {
  Real step_size = Real(1e-3);
  std::size_t chunk_len = 32;
};

// Chunked SGD over every parameter. Each chunk is scored before the update
// computed from its mean loss; weights reset at every document.
CorpusScore dynamic_evaluate(const Model& model, const Corpus& corpus,
                             const DynamicEvalOptions& options);

struct AblationInputs {
  const Model* slow_only = nullptr;  // for No FWL, Test-time only, Dynamic Evaluation
  const Model* fwl = nullptr;
  const Model* bias_only = nullptr;
  std::size_t seq_len = 32;
  std::size_t chunk_size = kDefaultChunkSize;
  Real test_time_step = 0;
  FastMask test_time_mask = FastMask::all();
  DynamicEvalOptions dynamic;
};

struct AblationRow {
  std::string name;
  double perplexity = 0;
  double tokens_per_second = 0;
};

std::vector<AblationRow> ablate(const AblationInputs& inputs, const Corpus& corpus);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);
void write_ablation_table(std::ostream& out, const std::vector<AblationRow>& rows);

struct Bucket {
  std::string group;  // position, frequency, repeat
  std::string label;
  std::size_t count = 0;
  double mean_improvement = 0;  // baseline NLL minus FWL NLL
};

struct AnalysisReport {
  std::vector<Bucket> buckets;
  std::size_t tokens = 0;
  double repeat_fraction = 0;
  double first_occurrence_improvement = 0;
  double repeat_improvement = 0;  // over every non-first occurrence
  const Bucket& find(std::string_view group, std::string_view label) const;
};

// Token frequencies are counted over the analysed corpus.
AnalysisReport analyze(const Corpus& corpus, const CorpusScore& baseline, const CorpusScore& fwl);
void write_analysis_csv(std::ostream& out, const AnalysisReport& report);

struct FlopReport {
  std::uint64_t backbone = 0;
  std::uint64_t head_slow = 0;
  std::uint64_t softmax = 0;
  std::uint64_t position_backward = 0;
  std::uint64_t fast_pass = 0;
  std::uint64_t fast_softmax = 0;
  std::uint64_t baseline_total() const { return backbone + head_slow + softmax; }
  std::uint64_t fwl_total() const {
    return baseline_total() + position_backward + fast_pass + fast_softmax;
  }
};

// Per-token counts for segments of seq_len tokens with a full memory.
FlopReport flop_report(const ModelConfig& config, std::size_t seq_len, std::size_t chunk_size,
                       FastMask mask);

struct BenchReport {
  FlopReport flops;
  double baseline_tokens_per_second = 0;
  double fwl_tokens_per_second = 0;
  double dynamic_tokens_per_second = 0;
};

BenchReport bench(const Model& model, const Corpus& corpus, std::size_t seq_len,
                  std::size_t chunk_size, const DynamicEvalOptions& dynamic, int repeats = 1);
nlohmann::json to_json(const BenchReport& report);

struct GenerateOptions {
  std::size_t n_tokens = 50;
  Real temperature = 1;
  std::uint64_t seed = 0;
  Variant variant = Variant::fwl;
  Real global_step = 0;
  FastMask test_time_mask = FastMask::all();
};

struct Generation {
  std::vector<TokenId> tokens;  // <bos>, prompt, generated
  std::size_t prompt_length = 0;  // including <bos>
  Vector losses;                  // per generated token under the sampling distribution
  std::size_t unknown_prompt_tokens = 0;
  std::string text;  // decoded generated part
};

// The prompt is teacher-forced with fast updates, then tokens are sampled.
// Segments follow the model's max_seq_len windows, as in scoring.
Generation generate(const Model& model, const Tokenizer& tokenizer, std::string_view prompt,
                    const GenerateOptions& options);

// Fraction of repeated n-grams among all n-grams of `tokens`.
double repeated_ngram_fraction(std::span<const TokenId> tokens, std::size_t n);

struct VerifyReport {
  double oracle_max_error = 0;
  std::size_t oracle_instances = 0;
  double attention_max_error = 0;
  std::size_t attention_cases = 0;
};

// Oracle equivalence over seeded random heads and chunked attention exactness.
VerifyReport run_verification(std::uint64_t seed);

}  // namespace fwl
