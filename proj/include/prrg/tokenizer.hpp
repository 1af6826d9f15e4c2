#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace prrg {

using TokenId = int;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kSep = 4;
inline constexpr std::size_t kCount = 5;
}  // namespace special

enum class Role : std::uint8_t { Prompt, Report, Special };

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<Role> roles;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  void push(TokenId id, Role role) {
    ids.push_back(id);
    roles.push_back(role);
  }
  std::size_t count(Role r) const;
  bool operator==(const TokenSequence&) const = default;
};

/// Lowercase, replace everything outside [a-z0-9] with a space, collapse
/// runs of spaces, trim.
std::string normalize_report(std::string_view text);

/// Byte-pair vocabulary. Words carry their leading space as part of the
/// first symbol, so merges never join symbols across a word boundary and
/// decoding is plain concatenation.
class Vocabulary {
 public:
  using Merge = std::pair<std::string, std::string>;

  /// Greedy most-frequent-pair merging; ties go to the lexicographically
  /// smallest (left, right) pair. If the corpus runs out of pairs before
  /// target_size is reached, the smaller vocabulary is returned and
  /// `warning` (when non-null) receives a message.
  static Vocabulary train(const std::vector<std::string>& corpus, std::size_t target_size,
                          std::string* warning = nullptr);

  std::size_t size() const { return id_to_token_.size(); }
  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::vector<Merge>& merges() const { return merges_; }
  std::size_t base_symbol_count() const { return base_count_; }

  /// Token ids for one normalized string, no BOS/EOS.
  std::vector<TokenId> encode_ids(std::string_view normalized) const;

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  /// FNV-1a over the serialized form.
  std::uint64_t fingerprint() const;

  bool operator==(const Vocabulary& o) const {
    return id_to_token_ == o.id_to_token_ && merges_ == o.merges_;
  }

 private:
  void add_token(std::string tok);
  void index_merges();

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<Merge> merges_;
  std::map<Merge, std::size_t> merge_rank_;
  std::size_t base_count_ = 0;
};

/// normalize_report + BPE, wrapped as [BOS, tokens..., EOS] with role Report.
/// A positive max_len hard-truncates the body so that EOS stays last.
TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len = 0);

/// Encodes prompt text with role Prompt and no BOS/EOS.
TokenSequence encode_prompt(std::string_view text, const Vocabulary& vocab);

/// Concatenates token strings, skipping PAD/BOS/SEP and stopping at EOS.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);
inline std::string decode(const TokenSequence& seq, const Vocabulary& vocab) { return decode(seq.ids, vocab); }

/// Encodes a raw report, dropping trailing sentences ('.'-delimited, before
/// normalization) until it fits max_len; falls back to hard truncation.
TokenSequence encode_truncated(std::string_view raw_report, const Vocabulary& vocab, std::size_t max_len);

}  // namespace prrg
