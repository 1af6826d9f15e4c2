#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "prrg/model.hpp"
#include "prrg/tokenizer.hpp"

namespace prrg {

struct DecodeConfig {
  std::size_t beam_size = 3;
  std::size_t max_new_tokens = 100;
  double length_penalty_alpha = 0.0;
  /// Never emitted. EOS must not be listed.
  std::vector<TokenId> banned = {special::kPad, special::kBos, special::kSep};

  void validate() const;
};

/// Log-probabilities of the next token given the generated prefix, which
/// always starts with BOS. Any prompt conditioning lives inside the callback.
using NextTokenLogProbs = std::function<std::vector<double>(std::span<const TokenId>)>;

struct BeamHypothesis {
  std::vector<TokenId> token_ids;  // BOS, generated tokens, EOS when finished
  double cumulative_logprob = 0.0;
  bool finished = false;

  std::size_t generated() const { return token_ids.empty() ? 0 : token_ids.size() - 1; }
};

/// Final ranking score: cumulative log-probability over generated^alpha.
double hypothesis_score(const BeamHypothesis& h, double alpha);

/// Argmax decoding, ties to the lowest id. Returns [BOS, ..., EOS?].
std::vector<TokenId> greedy_decode(const NextTokenLogProbs& next, const DecodeConfig& cfg);

/// Beam search with finished-hypothesis retirement. Each step expands every
/// live hypothesis, keeps the best `capacity` candidates (by cumulative
/// log-probability, ties by lexicographic ids), and moves candidates ending
/// in EOS to the finished pool; capacity shrinks by one per retirement.
/// Returns all finished hypotheses ranked best first.
std::vector<BeamHypothesis> beam_search(const NextTokenLogProbs& next, const DecodeConfig& cfg);

/// How the textual prefix ahead of BOS is built at inference.
struct PromptPrefix {
  PromptKind kind = PromptKind::None;
  TokenSequence manual;  // role Prompt; SEP is appended when non-empty
};

/// Eval-mode inference over one sample with per-layer key/value caches. Every
/// stack on the textual axis is causal, so feeding rows one at a time
/// reproduces the full-prefix forward pass.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const PromptRrgModel& model, const Tensor& visual_tokens);

  struct State {
    std::size_t position = 0;  // next position index of the embedding module
    std::size_t rows = 0;      // textual rows consumed
    std::vector<std::vector<double>> text_k, text_v;  // per text layer, rows x d_t
    std::vector<std::vector<double>> dec_k, dec_v;    // per decoder layer, rows x d
  };

  State initial_state() const;
  /// Feeds prompt rows (and SEP for manual prompts). BOS is not fed.
  void feed_prefix(State& s, const PromptPrefix& prefix) const;
  /// Feeds one token and returns the vocabulary logits at its row.
  std::vector<double> feed_token(State& s, TokenId id) const;

  /// Callback form with a prefix cache; one instance per sample.
  NextTokenLogProbs scorer(const PromptPrefix& prefix) const;

 private:
  std::vector<double> run_row(State& s, std::vector<double> embedded) const;
  std::vector<double> embed_row(std::span<const double> row, std::size_t position) const;

  const PromptRrgModel& m_;
  std::size_t n_heads_;
  struct CrossKv {
    std::vector<double> k, v;  // N^s x d
  };
  std::vector<CrossKv> cross_;
  std::size_t memory_rows_ = 0;
};

std::vector<double> log_softmax(std::span<const double> logits);

/// Beam (or greedy when beam_size is 1) decoding of one sample through the
/// cached path; returns generated report tokens without BOS/EOS.
std::vector<TokenId> generate_report(const PromptRrgModel& model, const Tensor& visual_tokens,
                                     const PromptPrefix& prefix, const DecodeConfig& cfg, bool greedy = false);

/// Uncached reference: full forward pass over [prefix, BOS, generated...]
/// and log-softmax of the last row.
NextTokenLogProbs full_prefix_scorer(const PromptRrgModel& model, const Tensor& visual_tokens,
                                     const PromptPrefix& prefix);

}  // namespace prrg
