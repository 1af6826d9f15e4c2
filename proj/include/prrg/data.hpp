#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prrg/prompt.hpp"
#include "prrg/tensor.hpp"

namespace prrg {

/// H x W x C post-extractor features, row-major over (h, w, c).
struct FeatureGrid {
  std::size_t h = 7, w = 7, c = 16;
  std::vector<double> values;

  double at(std::size_t r, std::size_t col, std::size_t ch) const { return values[(r * w + col) * c + ch]; }
  bool operator==(const FeatureGrid&) const = default;
};

/// Flattens a grid row-major into [H*W x C] visual tokens. Throws on
/// non-finite features.
Tensor extract_visual_tokens(const FeatureGrid& grid);

enum class Split { Train, Val, Test };
std::string split_name(Split s);
Split parse_split(const std::string& s);

struct Sample {
  std::string id;
  FeatureGrid grid;
  std::string report;
  DiseaseLabelVector labels;
  Split split = Split::Train;
  bool operator==(const Sample&) const = default;
};

struct GeneratorConfig {
  std::size_t grid_size = 7;
  std::size_t channels = 16;
  double noise_sigma = 1.0;
  double signature_amplitude = 1.0;
  /// Probability that a normal-findings sentence leads the report.
  double normal_sentence_prob = 0.5;
};

/// Sentence banks and grid signatures of the synthetic report grammar.
/// Each disease category owns a 2x2 cell tile and one half of the channel
/// axis; (cell, channel) sets are pairwise disjoint.
class Grammar {
 public:
  explicit Grammar(GeneratorConfig cfg = {});

  const GeneratorConfig& config() const { return cfg_; }
  const std::vector<std::string>& bank(std::size_t category) const { return banks_.at(category); }
  const std::vector<std::string>& normal_bank() const { return normal_bank_; }

  struct Signature {
    std::size_t row, col;          // top-left of the 2x2 tile
    std::size_t ch_begin, ch_end;  // channel range
  };
  /// Signature of a disease category; "No Finding" has none.
  std::optional<Signature> signature(std::size_t category) const;

  Sample generate(std::uint64_t seed, DiseaseLabelVector labels) const;
  /// Threshold detector over the signature tiles.
  DiseaseLabelVector detect(const FeatureGrid& grid) const;
  /// Categories whose bank has a sentence occurring in the report.
  DiseaseLabelVector labels_from_report(const std::string& report) const;

 private:
  GeneratorConfig cfg_;
  std::vector<std::vector<std::string>> banks_;
  std::vector<std::string> normal_bank_;
};

struct LabelDistribution {
  /// Fraction of samples drawn as "No Finding".
  double normal_fraction = 0.5;
  std::size_t max_diseases = 3;
};

struct SplitSizes {
  std::size_t train = 1600, val = 200, test = 200;
};

struct Dataset {
  std::vector<Sample> train, val, test;
};

Dataset generate_dataset(std::uint64_t seed, SplitSizes sizes, LabelDistribution dist = {},
                         const Grammar& grammar = Grammar());

/// One JSON object per line:
/// {"id", "grid": {"h","w","c","data"}, "report", "labels": [names], "split"}.
void save_jsonl(const std::vector<Sample>& samples, const std::string& path);
std::vector<Sample> load_jsonl(const std::string& path);

}  // namespace prrg
