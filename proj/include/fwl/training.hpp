#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fwl/checkpoint.hpp"
#include "fwl/corpus.hpp"
#include "fwl/model.hpp"

namespace fwl {

enum class TrainMode { full, slow_only, fwl_finetune };
TrainMode parse_train_mode(std::string_view name);
std::string_view to_string(TrainMode mode);

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  Real learning_rate = Real(3e-3);
  Real fast_learning_rate = 0;  // step sizes and decays; 0 means learning_rate
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real adam_eps = Real(1e-8);
  Real weight_decay = 0;  // decoupled, weights only
  std::size_t batch_size = 8;
  std::size_t seq_len = 32;
  std::size_t steps = 1000;
  std::size_t warmup_steps = 100;
  Real clip_norm = 1;  // 0 disables clipping
  TrainMode mode = TrainMode::full;
  FastMask mask = FastMask::all();
  std::size_t chunk_size = kDefaultChunkSize;
  std::uint64_t seed = 0;
  bool second_order = true;
  // Streams walk whole documents carrying memory and fast state; otherwise
  // every step samples independent windows.
  bool streaming = true;
  // Every step uses every training document from its start (exact gradient).
  bool full_batch = false;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t eval_every = 0;       // 0: evaluate only at the end
  std::size_t checkpoint_every = 0;  // 0: only final and best

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
// Fields absent from `j` keep the values in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct OptimizerState {
  Model m;
  Model v;
  std::uint64_t t = 0;
};

OptimizerState make_optimizer_state(const Model& model);

// Learning-rate multiplier for 0-based step `step`.
Real warmup_factor(std::size_t step, std::size_t warmup_steps);

// Global L2 norm over every parameter gradient.
Real gradient_norm(const Model& grads);

// Clips `grads` and applies one update in place. In fwl-finetune mode the
// backbone is left untouched. Returns the pre-clipping gradient norm.
Real apply_update(Model& model, Model& grads, OptimizerState& state, const TrainConfig& config,
                  std::size_t step);

struct SegmentRef {
  std::span<const TokenId> inputs;
  std::span<const TokenId> targets;
};

// Adds d(objective)/d(params) into `grads`, where the objective is
// weight * sum_t L'_t (or L_t in slow-only mode). Advances `carry`, whose
// contents are treated as constants. Returns the unweighted loss sum.
Real accumulate_segment(const Model& model, const SegmentRef& segment, StreamCarry& carry,
                        const TrainConfig& config, Real weight, Model& grads);

struct StepMetrics {
  std::uint64_t step = 0;
  Real loss = 0;  // mean per token
  std::size_t tokens = 0;
  Real grad_norm = 0;
  std::array<Real, kHeadTensorCount> alpha{};
  std::array<Real, kHeadTensorCount> decay{};
  double wall_ms = 0;
  std::optional<double> dev_perplexity;
};

nlohmann::json to_json(const StepMetrics& m, FastMask mask);

// One optimizer step. batch[i] is a run of consecutive segments processed in
// order with carries[i].
StepMetrics train_step(Model& model, OptimizerState& opt,
                       const std::vector<std::vector<SegmentRef>>& batch,
                       std::vector<StreamCarry>& carries, const TrainConfig& config,
                       std::size_t step);

struct CorpusScore {
  std::vector<Vector> nll;  // per document, per predicted token
  double total_nll = 0;
  std::size_t tokens = 0;
  double mean_nll() const { return tokens ? total_nll / static_cast<double>(tokens) : 0; }
  double perplexity() const;
};

// Scores every document independently (fresh memory and fast state per
// document), in parallel over documents with an order-fixed reduction.
CorpusScore score_corpus(const Model& model, const Corpus& corpus, std::size_t seq_len,
                         const SegmentScoreOptions& options);

struct FitInputs {
  Corpus train;
  Corpus dev;
  Tokenizer tokenizer;
  ModelConfig model;
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> init_checkpoint;    // weights to start from
  std::optional<std::filesystem::path> resume_checkpoint;  // full trainer state
};

struct FitResult {
  Checkpoint final_checkpoint;
  double best_dev_perplexity = 0;
  std::vector<StepMetrics> metrics;
};

// Writes metrics.jsonl, best.ckpt and final.ckpt (plus latest.ckpt when
// checkpoint_every is set) into out_dir.
FitResult fit(const FitInputs& inputs, const TrainConfig& config,
              const std::function<void(const StepMetrics&)>& on_step = {});

struct GradCheckReport {
  Real max_relative_error = 0;
  std::vector<std::pair<Real, Real>> directions;  // (analytic, numeric)
};

// Compares the analytic gradient of the mean segment loss over `documents`
// with central differences along random unit directions in all parameters
// (including masked step sizes and decays). Memory and fast state entering
// each segment are held at their unperturbed values. `include`, when set,
// limits the directions to parameters whose names it accepts.
GradCheckReport grad_check(const Model& model, const std::vector<std::vector<TokenId>>& documents,
                           const TrainConfig& config, std::size_t n_directions,
                           std::uint64_t seed, Real eps = Real(1e-5),
                           const std::function<bool(const std::string&)>& include = {});

}  // namespace fwl
