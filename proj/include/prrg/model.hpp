#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prrg/prompt.hpp"
#include "prrg/tensor.hpp"
#include "prrg/tokenizer.hpp"

namespace prrg {

struct ModelConfig {
  std::size_t d_t = 64;            // text-encoder width
  std::size_t d = 64;              // shared latent width
  std::size_t d_v = 32;            // visual feature channels after the patch embedder
  std::size_t grid_channels = 16;  // raw channels of the feature grid
  std::size_t n_heads = 4;
  std::size_t text_layers = 2;
  std::size_t vision_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t ffn_mult = 2;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 128;
  std::size_t auto_prompt_length = 0;  // 0: no automatic prompt parameter
  double dropout = 0.1;
  double init_std = 0.02;
  bool freeze_text_encoder = true;
  bool pre_norm = true;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const ModelConfig&) const = default;
};

/// Optimizer group a parameter belongs to.
enum class ParamGroup { Visual, Decoder, Head };
std::string group_name(ParamGroup g);

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
  bool text_encoder;  // part of the (freezable) embedding + text encoder block
};

/// How the textual prefix is conditioned.
enum class PromptKind { None, Manual, AutoWord, AutoAll };

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};
struct NormParams {
  Tensor gamma, beta;
};
struct EncoderLayer {
  AttentionParams attn;
  FeedForwardParams ffn;
  NormParams ln1, ln2;
};
struct DecoderLayer {
  AttentionParams self_attn, cross_attn;
  FeedForwardParams ffn;
  NormParams ln1, ln2, ln3;
};

/// Visual features, optionally a prompt prefix, and the report they
/// condition. `text` is the full textual sequence fed to the embedding
/// module: [prompt, SEP, BOS, report..., EOS] for manual prompts,
/// [BOS, report..., EOS] otherwise.
struct Example {
  Tensor visual_tokens;  // [N^s x grid_channels]
  TokenSequence text;
};

class PromptRrgModel {
 public:
  PromptRrgModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const Tensor& parameter(const std::string& name) const;
  std::size_t trainable_parameter_count() const;
  std::size_t parameter_count() const;

  BatchNormState& vision_bn_state() { return bn_state_; }
  const BatchNormState& vision_bn_state() const { return bn_state_; }
  const std::optional<AutoPromptMatrix>& auto_prompt() const { return auto_prompt_; }

  /// Deep copy of every parameter and buffer.
  PromptRrgModel clone() const;

  // -- embedding module ----------------------------------------------------
  Tensor embed_tokens(const TokenSequence& seq, Mode mode, DropoutRng& rng) const;
  /// Prompt rows enter before the position embedding (positions 0..N^p-1,
  /// words shifted by N^p) and share layer norm and dropout.
  Tensor embed_with_auto_prompt(const TokenSequence& seq, const AutoPromptMatrix& prompt, Mode mode,
                                DropoutRng& rng) const;
  /// Prompt rows are concatenated after the full embedding pipeline.
  Tensor embed_auto_all(const TokenSequence& seq, const AutoPromptMatrix& prompt, Mode mode, DropoutRng& rng) const;

  // -- encoders --------------------------------------------------------------
  Tensor encode_text(const Tensor& embedded, Mode mode, DropoutRng& rng) const;
  Tensor project_text(const Tensor& encoded) const;
  Tensor patch_embed(const Tensor& visual_tokens) const;
  /// BN over the stacked token rows of the whole batch, then
  /// Dropout(ReLU(x W_s)). Training mode needs at least two samples.
  std::vector<Tensor> project_vision(const std::vector<Tensor>& visual_tokens, Mode mode, DropoutRng& rng);
  /// Eval-mode projection of one sample (running statistics).
  Tensor project_vision_eval(const Tensor& visual_tokens) const;
  Tensor encode_vision(const Tensor& projected, Mode mode, DropoutRng& rng) const;

  // -- decoder ---------------------------------------------------------------
  /// [T x N_we] logits; row t depends only on textual rows <= t.
  Tensor decode_logits(const Tensor& visual_memory, const Tensor& text_latent, Mode mode, DropoutRng& rng) const;

  /// Embedding + text encoder + projection + decoder for one sequence.
  Tensor text_logits(const Tensor& visual_memory, const TokenSequence& text, PromptKind kind, Mode mode,
                     DropoutRng& rng) const;
  /// Eval-mode visual memory for one sample.
  Tensor visual_memory(const Tensor& visual_tokens) const;

  /// Teacher-forced mean cross-entropy over report-token targets of a batch.
  Tensor batch_loss(std::span<const Example> batch, PromptKind kind, Mode mode, DropoutRng& rng);

 private:
  friend class IncrementalDecoder;

  Tensor new_param(const std::string& name, Shape shape, ParamGroup group, bool text_encoder, double init);
  Tensor new_normal(const std::string& name, Shape shape, ParamGroup group, bool text_encoder);
  AttentionParams new_attention(const std::string& prefix, std::size_t width, ParamGroup group, bool text);
  FeedForwardParams new_ffn(const std::string& prefix, std::size_t width, ParamGroup group, bool text);
  NormParams new_norm(const std::string& prefix, std::size_t width, ParamGroup group, bool text);
  void rebind();

  Tensor embed_rows(const Tensor& rows, std::size_t first_position, Mode mode, DropoutRng& rng) const;
  Tensor encoder_stack(const std::vector<EncoderLayer>& layers, const NormParams* final_norm, const Tensor& x,
                       bool causal, Mode mode, DropoutRng& rng) const;

  ModelConfig cfg_;
  std::uint64_t init_seed_;
  std::uint64_t init_counter_ = 0;
  std::vector<NamedParam> params_;
  BatchNormState bn_state_;
  std::optional<AutoPromptMatrix> auto_prompt_;

  // Views into params_ (handles share storage).
  Tensor word_emb_, pos_emb_;
  NormParams emb_ln_;
  std::vector<EncoderLayer> text_layers_;
  NormParams text_final_;
  Tensor w_t_;
  Tensor patch_w_, patch_b_;
  NormParams vis_bn_;
  Tensor w_s_;
  std::vector<EncoderLayer> vision_layers_;
  NormParams vision_final_;
  std::vector<DecoderLayer> decoder_layers_;
  NormParams decoder_final_;
  Tensor head_;
};

/// Whether row t of a textual sequence has a next-token target, and which.
/// Targets are report-role tokens after the report's BOS; prompt, SEP and
/// the BOS itself are never predicted. `offset` counts automatic-prompt rows
/// that precede the sequence.
void report_targets(const TokenSequence& text, std::size_t offset, std::vector<int>& targets,
                    std::vector<bool>& include);

/// [rows x cols] additive mask: 0 where col <= row, -1e9 above the diagonal.
Tensor causal_mask(std::size_t rows);

Tensor multi_head_attention(const AttentionParams& p, const Tensor& queries, const Tensor& keys_values,
                            std::size_t n_heads, bool causal);

}  // namespace prrg
