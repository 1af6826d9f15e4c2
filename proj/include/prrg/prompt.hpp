#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prrg/tensor.hpp"
#include "prrg/tokenizer.hpp"

namespace prrg {

inline constexpr std::size_t kNumCategories = 14;

/// Observation categories in fixed reading order of the labeler's table.
inline constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "Lung Opacity",     "Cardiomegaly",  "No Finding",     "Lung Lesion", "Consolidation",
    "Edema",            "Pneumothorax",  "Pneumonia",      "Atelectasis", "Pleural Effusion",
    "Pleural Other",    "Fracture",      "Support Devices", "Enlarged Cardiomediastinum"};

inline constexpr std::size_t kNoFindingIndex = 2;

std::optional<std::size_t> category_index(std::string_view name);

struct DiseaseLabelVector {
  std::array<bool, kNumCategories> present{};

  static DiseaseLabelVector from_names(const std::vector<std::string>& names);
  std::vector<std::string> names() const;
  bool any() const;
  bool operator==(const DiseaseLabelVector&) const = default;
};

struct PromptTemplate {
  std::string label;
  std::string text;
  bool has_class_slot = false;
};

struct PromptInstance {
  std::string source_label;
  std::string filled_text;
  TokenSequence tokens;  // role Prompt
};

using PromptRegistry = std::map<std::string, PromptTemplate>;

PromptTemplate make_template(std::string label, std::string text);

/// Built-in manual prompts (common, domain-related, disease-enriched and the
/// LLM-written disease-enriched set).
const PromptRegistry& registry();

/// Parses "label<TAB>template" lines; blank lines and '#' comments skipped.
PromptRegistry load_registry_file(const std::string& path);
/// Built-ins plus the file's entries; duplicate labels are an error.
PromptRegistry registry_with_file(const std::string& path);

/// Fills "[cn]" with the lowercase ", "-joined names of present categories in
/// table order ("no finding" when nothing is present) and resolves "a/an".
std::string instantiate_text(const PromptTemplate& tmpl, const DiseaseLabelVector& labels);
PromptInstance instantiate(const PromptTemplate& tmpl, const DiseaseLabelVector& labels, const Vocabulary& vocab);

/// prompt + SEP + report. The prompt is never truncated; when max_len > 0 the
/// report body is cut so that its EOS stays last. An empty prompt returns the
/// report unchanged.
TokenSequence prepend(const TokenSequence& prompt, const TokenSequence& report, std::size_t max_len = 0);

struct AutoPromptMatrix {
  Tensor weights;  // [n_p x d_t], trainable
  std::size_t length() const { return weights.rows(); }
};

/// Entries drawn i.i.d. from N(0, 0.02^2), deterministic per seed.
AutoPromptMatrix init_auto_prompt(std::size_t n_p, std::size_t d_t, std::uint64_t seed);

}  // namespace prrg
