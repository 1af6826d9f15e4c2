#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

namespace prrg {

using Words = std::vector<std::string>;

/// Whitespace split of already-normalized text.
Words split_words(const std::string& text);

using NGram = std::vector<std::string>;
/// Counts of every n-gram of order n.
std::map<NGram, double> ngram_counts(const Words& words, std::size_t n);

/// Clipped n-gram matches and totals, mergeable across shards.
struct BleuStats {
  std::array<double, 4> matches{};
  std::array<double, 4> totals{};
  double candidate_length = 0.0;
  double reference_length = 0.0;

  void add(const Words& candidate, const Words& reference);
  void merge(const BleuStats& other);
  /// BLEU-n x100 for n = 1..max_n (geometric mean of orders 1..n, brevity
  /// penalty e^{1-r/c} when c < r).
  std::vector<double> scores(std::size_t max_n = 4) const;
};

/// Corpus BLEU-1..max_n x100. Throws on an empty or mismatched corpus.
std::vector<double> corpus_bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                                std::size_t max_n = 4);

/// Sentence BLEU-4 in [0, 1] with add-one smoothing on orders above 1.
double sentence_bleu(const Words& candidate, const Words& reference);

/// Suffix stripper for the stem matching stage.
std::string stem(const std::string& word);

struct MeteorDetail {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0.0, recall = 0.0, fmean = 0.0, penalty = 0.0, score = 0.0;
};

/// Exact then stem unigram alignment; Fmean = 10PR/(R+9P),
/// penalty = 0.5 (chunks/matches)^3, score in [0, 1].
MeteorDetail meteor_sentence(const Words& candidate, const Words& reference);
/// Mean sentence score x100.
double meteor(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

struct CiderResult {
  double raw = 0.0;        // mean over samples of the per-order cosine mean, in [0, 1]
  double standard = 0.0;   // raw x10 (the metric's customary scale)
  double presented = 0.0;  // raw x100
  std::vector<double> per_sample;  // raw scale
};

/// TF-IDF n-gram cosine, n = 1..4, with idf = log(max(1, M / max(1, df)))
/// and df counted over the references.
CiderResult cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references);
CiderResult cider(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

struct MetricReport {
  std::vector<double> bleu;  // BLEU-1..4, x100
  double meteor = 0.0;       // x100
  CiderResult cider;

  /// metric,value_raw,value_presented rows.
  std::string to_csv() const;
};

MetricReport evaluate_corpus(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

}  // namespace prrg
