#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "prrg/checkpoint.hpp"
#include "prrg/config.hpp"
#include "prrg/data.hpp"
#include "prrg/decoding.hpp"
#include "prrg/metrics.hpp"
#include "prrg/model.hpp"
#include "prrg/optim.hpp"
#include "prrg/prompt.hpp"
#include "prrg/tokenizer.hpp"

namespace prrg {

/// Plain-text report for generated ids.
std::string decode_ids_text(std::span<const TokenId> ids, const Vocabulary& vocab);

/// Splits from the configured JSONL paths, or generated from data.seed when
/// the paths are empty.
Dataset load_or_generate(const ExperimentConfig& cfg);

/// BPE over normalized training reports, registry prompt texts and the
/// category names, so every prompt word is in the base alphabet.
Vocabulary build_vocabulary(const std::vector<Sample>& train, const PromptRegistry& reg, std::size_t target_size);

PromptRegistry registry_for(const ExperimentConfig& cfg);
ModelConfig model_config_for(const ExperimentConfig& cfg, const Vocabulary& vocab);

/// Training sequence for one sample under a prompt mode. Manual prompts are
/// instantiated from the sample's labels.
Example make_example(const Sample& s, const Vocabulary& vocab, const PromptMode& mode, const PromptRegistry& reg,
                     std::size_t max_len);
PromptPrefix make_prefix(const Sample& s, const Vocabulary& vocab, const PromptMode& mode, const PromptRegistry& reg);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_bleu4 = 0.0;
  std::string json() const;
};

struct TrainOptions {
  bool resume = false;
  /// Stop (as if interrupted) after this many epochs in total.
  std::optional<std::size_t> stop_after_epochs;
  std::ostream* log = nullptr;
  /// Preloaded splits; otherwise load_or_generate(cfg).
  const Dataset* data = nullptr;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  double best_val_bleu4 = -1.0;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::string best_checkpoint, last_checkpoint, vocab_path;
};

/// Run-directory layout under cfg.output_dir: config.cfg, vocab.txt,
/// last.ckpt, best.ckpt, state.ckpt, metrics.jsonl.
TrainResult train(const ExperimentConfig& cfg, const TrainOptions& opts = {});

/// Mean teacher-forced loss of a split in eval mode.
double evaluation_loss(PromptRrgModel& model, const std::vector<Example>& examples, PromptKind kind,
                       std::size_t batch_size);

struct SampleResult {
  std::string id, candidate, reference;
  double bleu4 = 0.0, meteor = 0.0;
};

struct EvalResult {
  MetricReport report;
  std::vector<SampleResult> samples;
  /// metric,value_raw,value_presented
  std::string metrics_csv() const;
  /// id,bleu4,meteor
  std::string per_sample_csv() const;
};

struct EvalOptions {
  bool greedy = false;
  /// Candidates are set to the references (metric sanity path).
  bool oracle = false;
};

EvalResult evaluate(const PromptRrgModel& model, const Vocabulary& vocab, const std::vector<Sample>& samples,
                    const PromptMode& mode, const PromptRegistry& reg, const DecodeConfig& decode,
                    const EvalOptions& opts = {});

/// A trained run reopened from disk.
struct LoadedRun {
  PromptRrgModel model;
  Vocabulary vocab;
  PromptMode mode;
  std::map<std::string, std::string> meta;
};
/// Throws CheckpointError when the vocabulary fingerprint differs from the
/// one recorded in the checkpoint.
LoadedRun load_run(const std::string& checkpoint_path, const std::string& vocab_path);

struct ComparisonRow {
  std::string mode;
  std::uint64_t seed = 0;  // 0 on mean rows
  std::vector<double> bleu;
  double meteor = 0.0, cider = 0.0;
};

struct Comparison {
  std::vector<ComparisonRow> seed_rows, mean_rows;
  std::string table() const;  // markdown
  std::string csv() const;
};

/// One run per (mode, seed). Modes use the prompt_mode syntax, optionally
/// suffixed with "@<n_p>" to override the automatic prompt length.
Comparison compare_prompts(const ExperimentConfig& base, const std::vector<std::string>& modes,
                           const std::vector<std::uint64_t>& seeds, std::ostream* log = nullptr);

}  // namespace prrg
