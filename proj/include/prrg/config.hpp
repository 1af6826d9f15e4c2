#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "prrg/data.hpp"
#include "prrg/decoding.hpp"
#include "prrg/model.hpp"

namespace prrg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat key=value text; '#' starts a comment. Later keys win.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<config>");
KeyValues read_key_values(const std::string& path);
/// Applies "key=value" strings on top of `kv`.
void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides);

struct OptimConfig {
  double lr_visual = 5e-5;
  double lr_decoder = 2.5e-4;
  double lr_head = 5e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping

  double lr(ParamGroup g) const;
};

/// none | manual:<label> | auto:word | auto:all
struct PromptMode {
  PromptKind kind = PromptKind::None;
  std::string manual_label;

  static PromptMode parse(const std::string& text);
  std::string str() const;
  bool operator==(const PromptMode&) const = default;
};

struct ExperimentConfig {
  std::string profile = "desk";
  ModelConfig model;
  OptimConfig optim;
  PromptMode prompt;
  std::size_t n_p = 8;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::size_t patience = 5;
  std::uint64_t seed = 1;
  std::size_t vocab_size = 400;
  std::size_t max_len = 100;  // report tokens including BOS/EOS

  std::uint64_t data_seed = 2024;
  SplitSizes split_sizes;
  LabelDistribution labels;
  GeneratorConfig generator;
  std::string train_path, val_path, test_path;  // empty: generate in memory
  std::string prompt_file;                      // extra registry entries

  DecodeConfig decode;
  std::string output_dir = "runs/default";

  /// Defaults of a named profile ("desk" or "paper").
  static ExperimentConfig profile_defaults(const std::string& name);
  /// Profile defaults, then every key in `kv`. Unknown keys are errors.
  static ExperimentConfig from_key_values(const KeyValues& kv);
  KeyValues to_key_values() const;
  /// Throws ConfigError.
  void validate() const;
};

/// Loads `path` (may be empty), applies overrides and the output-directory
/// environment override (PRRG_OUTPUT_DIR).
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace prrg
