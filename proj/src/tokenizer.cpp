#include "prrg/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace prrg {

namespace {

const char* const kSpecialNames[special::kCount] = {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"};

// "no finding" -> {"no", " finding"}
std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < normalized.size()) {
    while (i < normalized.size() && normalized[i] == ' ') ++i;
    if (i >= normalized.size()) break;
    std::size_t j = i;
    while (j < normalized.size() && normalized[j] != ' ') ++j;
    std::string w = words.empty() ? std::string() : std::string(" ");
    w.append(normalized.substr(i, j - i));
    words.push_back(std::move(w));
    i = j;
  }
  return words;
}

std::vector<std::string> chars_of(const std::string& word) {
  std::vector<std::string> out;
  out.reserve(word.size());
  for (char c : word) out.emplace_back(1, c);
  return out;
}

}  // namespace

std::size_t TokenSequence::count(Role r) const {
  return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), r));
}

std::string normalize_report(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    char lc = (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
    const bool keep = (lc >= 'a' && lc <= 'z') || (lc >= '0' && lc <= '9');
    if (!keep) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(lc);
  }
  return out;
}

// ---- Vocabulary -------------------------------------------------------------

void Vocabulary::add_token(std::string tok) {
  if (token_to_id_.count(tok)) return;
  token_to_id_.emplace(tok, static_cast<TokenId>(id_to_token_.size()));
  id_to_token_.push_back(std::move(tok));
}

void Vocabulary::index_merges() {
  merge_rank_.clear();
  for (std::size_t i = 0; i < merges_.size(); ++i) merge_rank_.emplace(merges_[i], i);
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

Vocabulary Vocabulary::train(const std::vector<std::string>& corpus, std::size_t target_size,
                             std::string* warning) {
  if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
  std::map<std::string, std::size_t> word_freq;
  std::set<char> alphabet;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize_report(line))) {
      for (char c : w) alphabet.insert(c);
      ++word_freq[w];
    }
  }
  Vocabulary v;
  for (const char* s : kSpecialNames) v.add_token(s);
  for (char c : alphabet) v.add_token(std::string(1, c));
  v.base_count_ = alphabet.size();
  if (target_size <= v.size())
    throw std::invalid_argument("train_bpe: target size " + std::to_string(target_size) +
                                " does not exceed specials + base symbols (" + std::to_string(v.size()) + ")");

  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (auto& [w, f] : word_freq) words.emplace_back(chars_of(w), f);

  while (v.size() < target_size) {
    std::map<Merge, std::size_t> pair_count;
    for (const auto& [syms, f] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_count[{syms[i], syms[i + 1]}] += f;
    if (pair_count.empty()) {
      if (warning)
        *warning = "train_bpe: corpus exhausted at vocabulary size " + std::to_string(v.size()) +
                   " (target " + std::to_string(target_size) + ")";
      break;
    }
    // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
    auto best = pair_count.begin();
    for (auto it = pair_count.begin(); it != pair_count.end(); ++it)
      if (it->second > best->second) best = it;
    const Merge m = best->first;
    const std::string merged = m.first + m.second;
    v.merges_.push_back(m);
    v.add_token(merged);
    for (auto& [syms, f] : words) {
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == m.first && syms[i + 1] == m.second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
  }
  v.index_merges();
  return v;
}

std::vector<TokenId> Vocabulary::encode_ids(std::string_view normalized) const {
  std::vector<TokenId> out;
  for (const auto& w : split_words(normalized)) {
    std::vector<std::string> syms = chars_of(w);
    while (syms.size() > 1) {
      std::size_t best_rank = merges_.size(), best_i = 0;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = merge_rank_.find({syms[i], syms[i + 1]});
        if (it != merge_rank_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_i = i;
        }
      }
      if (best_rank == merges_.size()) break;
      syms[best_i] += syms[best_i + 1];
      syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(best_i) + 1);
    }
    for (const auto& s : syms) {
      auto id = find(s);
      out.push_back(id ? *id : special::kUnk);
    }
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::ostringstream os;
  os << "prrg-vocab 1 tokens=" << id_to_token_.size() << " merges=" << merges_.size()
     << " base=" << base_count_ << '\n';
  for (const auto& t : id_to_token_) os << t << '\n';
  for (const auto& [l, r] : merges_) os << l << '\t' << r << '\n';
  return os.str();
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string header;
  std::getline(is, header);
  std::size_t n_tok = 0, n_merge = 0, base = 0;
  if (std::sscanf(header.c_str(), "prrg-vocab 1 tokens=%zu merges=%zu base=%zu", &n_tok, &n_merge, &base) != 3)
    throw std::runtime_error("vocabulary: bad header '" + header + "'");
  Vocabulary v;
  std::string line;
  for (std::size_t i = 0; i < n_tok; ++i) {
    if (!std::getline(is, line)) throw std::runtime_error("vocabulary: truncated token list");
    v.add_token(line);
  }
  if (v.size() != n_tok) throw std::runtime_error("vocabulary: duplicate tokens");
  for (std::size_t i = 0; i < n_merge; ++i) {
    if (!std::getline(is, line)) throw std::runtime_error("vocabulary: truncated merge list");
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("vocabulary: malformed merge line " + std::to_string(i));
    v.merges_.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  v.base_count_ = base;
  v.index_merges();
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write vocabulary to " + path);
  f << serialize();
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read vocabulary from " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : serialize()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---- sequences --------------------------------------------------------------

TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<TokenId> body = vocab.encode_ids(normalize_report(text));
  if (max_len > 0) {
    if (max_len < 2) throw std::invalid_argument("encode: max_len must leave room for BOS and EOS");
    if (body.size() + 2 > max_len) body.resize(max_len - 2);
  }
  TokenSequence seq;
  seq.push(special::kBos, Role::Report);
  for (TokenId id : body) seq.push(id, Role::Report);
  seq.push(special::kEos, Role::Report);
  return seq;
}

TokenSequence encode_prompt(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq;
  for (TokenId id : vocab.encode_ids(normalize_report(text))) seq.push(id, Role::Prompt);
  return seq;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == special::kEos) break;
    if (id == special::kPad || id == special::kBos || id == special::kSep) continue;
    out += vocab.token(id);
  }
  const auto b = out.find_first_not_of(' ');
  if (b == std::string::npos) return {};
  const auto e = out.find_last_not_of(' ');
  return out.substr(b, e - b + 1);
}

TokenSequence encode_truncated(std::string_view raw_report, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<std::string_view> sentences;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= raw_report.size(); ++i) {
    if (i == raw_report.size() || raw_report[i] == '.') {
      const std::size_t end = i < raw_report.size() ? i + 1 : i;
      if (end > start) sentences.push_back(raw_report.substr(start, end - start));
      start = end;
    }
  }
  for (std::size_t keep = sentences.size(); keep >= 1; --keep) {
    std::string text;
    for (std::size_t i = 0; i < keep; ++i) text.append(sentences[i]);
    TokenSequence seq = encode(text, vocab);
    if (seq.size() <= max_len) return seq;
  }
  return encode(raw_report, vocab, max_len);
}

}  // namespace prrg
