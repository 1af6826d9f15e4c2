#include "prrg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace prrg {

namespace {

void check_corpus(std::size_t candidates, std::size_t references) {
  if (candidates == 0) throw std::invalid_argument("metric over an empty corpus");
  if (candidates != references)
    throw std::invalid_argument("corpus has " + std::to_string(candidates) + " candidates but " +
                                std::to_string(references) + " references");
}

/// Order-independent sum.
double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return std::accumulate(v.begin(), v.end(), 0.0);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

Words split_words(const std::string& text) {
  Words out;
  std::istringstream ss(text);
  for (std::string w; ss >> w;) out.push_back(std::move(w));
  return out;
}

std::map<NGram, double> ngram_counts(const Words& words, std::size_t n) {
  std::map<NGram, double> out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) out[NGram(words.begin() + i, words.begin() + i + n)] += 1.0;
  return out;
}

// ---- BLEU -------------------------------------------------------------------

void BleuStats::add(const Words& candidate, const Words& reference) {
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto c = ngram_counts(candidate, n);
    const auto r = ngram_counts(reference, n);
    for (const auto& [g, cnt] : c) {
      auto it = r.find(g);
      if (it != r.end()) matches[n - 1] += std::min(cnt, it->second);
      totals[n - 1] += cnt;
    }
  }
  candidate_length += static_cast<double>(candidate.size());
  reference_length += static_cast<double>(reference.size());
}

void BleuStats::merge(const BleuStats& o) {
  for (std::size_t i = 0; i < 4; ++i) {
    matches[i] += o.matches[i];
    totals[i] += o.totals[i];
  }
  candidate_length += o.candidate_length;
  reference_length += o.reference_length;
}

std::vector<double> BleuStats::scores(std::size_t max_n) const {
  if (max_n < 1 || max_n > 4) throw std::invalid_argument("BLEU order must be in 1..4");
  std::vector<double> out;
  const double bp = candidate_length == 0.0         ? 0.0
                    : candidate_length < reference_length ? std::exp(1.0 - reference_length / candidate_length)
                                                          : 1.0;
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= max_n; ++n) {
    if (matches[n - 1] == 0.0 || totals[n - 1] == 0.0) zero = true;
    if (!zero) log_sum += std::log(matches[n - 1] / totals[n - 1]);
    out.push_back(zero ? 0.0 : 100.0 * bp * std::exp(log_sum / static_cast<double>(n)));
  }
  return out;
}

std::vector<double> corpus_bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                                std::size_t max_n) {
  check_corpus(candidates.size(), references.size());
  BleuStats stats;
  for (std::size_t i = 0; i < candidates.size(); ++i) stats.add(split_words(candidates[i]), split_words(references[i]));
  return stats.scores(max_n);
}

double sentence_bleu(const Words& candidate, const Words& reference) {
  if (candidate.empty()) return 0.0;
  BleuStats s;
  s.add(candidate, reference);
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const double smooth = n == 1 ? 0.0 : 1.0;
    const double m = s.matches[n - 1] + smooth, t = s.totals[n - 1] + smooth;
    if (m == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double c = s.candidate_length, r = s.reference_length;
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

// ---- METEOR -----------------------------------------------------------------

std::string stem(const std::string& word) {
  static const std::array<std::string, 6> suffixes = {"ment", "tion", "ing", "es", "ed", "s"};  // longest first
  std::string w = word;
  for (const auto& suf : suffixes) {
    if (w.size() >= suf.size() + 3 && w.compare(w.size() - suf.size(), suf.size(), suf) == 0) {
      w.resize(w.size() - suf.size());
      break;
    }
  }
  if (w.size() > 3 && w.back() == 'e') w.pop_back();
  return w;
}

MeteorDetail meteor_sentence(const Words& candidate, const Words& reference) {
  MeteorDetail d;
  if (candidate.empty() || reference.empty()) return d;
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> align(candidate.size(), kNone);
  std::vector<bool> used(reference.size(), false);

  auto stage = [&](auto&& key) {
    std::vector<std::string> rk(reference.size());
    for (std::size_t j = 0; j < reference.size(); ++j) rk[j] = key(reference[j]);
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (align[i] != kNone) continue;
      const std::string ck = key(candidate[i]);
      std::size_t pick = kNone;
      if (i > 0 && align[i - 1] != kNone) {
        const std::size_t next = align[i - 1] + 1;
        if (next < reference.size() && !used[next] && rk[next] == ck) pick = next;
      }
      for (std::size_t j = 0; pick == kNone && j < reference.size(); ++j)
        if (!used[j] && rk[j] == ck) pick = j;
      if (pick != kNone) {
        align[i] = pick;
        used[pick] = true;
      }
    }
  };
  stage([](const std::string& w) { return w; });
  stage([](const std::string& w) { return stem(w); });

  std::size_t prev_c = kNone, prev_r = kNone;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (align[i] == kNone) continue;
    ++d.matches;
    if (prev_c == kNone || i != prev_c + 1 || align[i] != prev_r + 1) ++d.chunks;
    prev_c = i;
    prev_r = align[i];
  }
  if (d.matches == 0) return d;
  const double m = static_cast<double>(d.matches);
  d.precision = m / static_cast<double>(candidate.size());
  d.recall = m / static_cast<double>(reference.size());
  d.fmean = 10.0 * d.precision * d.recall / (d.recall + 9.0 * d.precision);
  d.penalty = 0.5 * std::pow(static_cast<double>(d.chunks) / m, 3.0);
  d.score = d.fmean * (1.0 - d.penalty);
  return d;
}

double meteor(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
  check_corpus(candidates.size(), references.size());
  std::vector<double> s;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    s.push_back(meteor_sentence(split_words(candidates[i]), split_words(references[i])).score);
  return 100.0 * sorted_sum(std::move(s)) / static_cast<double>(candidates.size());
}

// ---- CIDEr ------------------------------------------------------------------

CiderResult cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references) {
  check_corpus(candidates.size(), references.size());
  const std::size_t m = candidates.size();
  const double big_m = static_cast<double>(m);
  std::vector<Words> cand_words;
  std::vector<std::vector<Words>> ref_words(m);
  for (std::size_t i = 0; i < m; ++i) {
    cand_words.push_back(split_words(candidates[i]));
    if (references[i].empty()) throw std::invalid_argument("sample without references");
    for (const auto& r : references[i]) ref_words[i].push_back(split_words(r));
  }

  std::vector<double> per_sample(m, 0.0);
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<NGram, double> df;
    for (std::size_t i = 0; i < m; ++i) {
      std::set<NGram> seen;
      for (const auto& r : ref_words[i])
        for (const auto& [g, c] : ngram_counts(r, n)) seen.insert(g);
      for (const auto& g : seen) df[g] += 1.0;
    }
    auto weights = [&](const Words& w) {
      std::map<NGram, double> v = ngram_counts(w, n);
      for (auto& [g, tf] : v) {
        auto it = df.find(g);
        const double d = it == df.end() ? 0.0 : it->second;
        tf *= std::log(std::max(1.0, big_m / std::max(1.0, d)));
      }
      return v;
    };
    auto norm2 = [](const std::map<NGram, double>& v) {
      double s = 0.0;
      for (const auto& [g, x] : v) s += x * x;
      return s;
    };
    for (std::size_t i = 0; i < m; ++i) {
      const auto cv = weights(cand_words[i]);
      const double cn = norm2(cv);
      double acc = 0.0;
      for (const auto& r : ref_words[i]) {
        const auto rv = weights(r);
        const double rn = norm2(rv);
        if (cn == 0.0 || rn == 0.0) continue;
        double dot = 0.0;
        for (const auto& [g, x] : cv) {
          auto it = rv.find(g);
          if (it != rv.end()) dot += x * it->second;
        }
        acc += dot / std::sqrt(cn * rn);
      }
      per_sample[i] += acc / static_cast<double>(ref_words[i].size()) / 4.0;
    }
  }
  CiderResult res;
  res.per_sample = per_sample;
  res.raw = sorted_sum(per_sample) / big_m;
  res.standard = 10.0 * res.raw;
  res.presented = 100.0 * res.raw;
  return res;
}

CiderResult cider(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
  std::vector<std::vector<std::string>> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back({r});
  return cider(candidates, refs);
}

MetricReport evaluate_corpus(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
  MetricReport r;
  r.bleu = corpus_bleu(candidates, references, 4);
  r.meteor = meteor(candidates, references);
  r.cider = cider(candidates, references);
  return r;
}

std::string MetricReport::to_csv() const {
  std::string out = "metric,value_raw,value_presented\n";
  for (std::size_t n = 0; n < bleu.size(); ++n)
    out += "BLEU-" + std::to_string(n + 1) + "," + fmt(bleu[n] / 100.0) + "," + fmt(bleu[n]) + "\n";
  out += "METEOR," + fmt(meteor / 100.0) + "," + fmt(meteor) + "\n";
  out += "CIDEr," + fmt(cider.raw) + "," + fmt(cider.presented) + "\n";
  return out;
}

}  // namespace prrg
