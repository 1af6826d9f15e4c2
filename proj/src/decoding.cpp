#include "prrg/decoding.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace prrg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstRowMap = Eigen::Map<const Eigen::RowVectorXd>;

bool lex_less(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

bool is_banned(const DecodeConfig& cfg, TokenId t) {
  return std::find(cfg.banned.begin(), cfg.banned.end(), t) != cfg.banned.end();
}

std::vector<double> vec_mat(std::span<const double> x, const Tensor& w) {
  const std::size_t n = w.rows(), m = w.cols();
  if (x.size() != n) throw DimensionError("row of width " + std::to_string(x.size()) + " against " +
                                          shape_string(w.shape()));
  std::vector<double> y(m);
  Eigen::Map<Eigen::RowVectorXd>(y.data(), static_cast<Eigen::Index>(m)) =
      ConstRowMap(x.data(), static_cast<Eigen::Index>(n)) *
      ConstMatMap(w.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  return y;
}

std::vector<double> linear_row(std::span<const double> x, const Tensor& w, const Tensor& b) {
  std::vector<double> y = vec_mat(x, w);
  for (std::size_t j = 0; j < y.size(); ++j) y[j] += b.data()[j];
  return y;
}

std::vector<double> layer_norm_row(std::span<const double> x, const NormParams& p, double eps = 1e-5) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> y(d);
  for (std::size_t j = 0; j < d; ++j) y[j] = (x[j] - mean) * inv * p.gamma.data()[j] + p.beta.data()[j];
  return y;
}

void add_into(std::vector<double>& x, const std::vector<double>& y) {
  for (std::size_t j = 0; j < x.size(); ++j) x[j] += y[j];
}

std::vector<double> feed_forward_row(std::span<const double> x, const FeedForwardParams& p) {
  std::vector<double> h = linear_row(x, p.w1, p.b1);
  for (auto& v : h) v = std::max(v, 0.0);
  return linear_row(h, p.w2, p.b2);
}

/// One query row against `rows` cached keys/values of width w.
std::vector<double> attend(const std::vector<double>& q, const std::vector<double>& k, const std::vector<double>& v,
                           std::size_t rows, std::size_t n_heads) {
  const std::size_t w = q.size(), dh = w / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(w, 0.0), scores(rows);
  for (std::size_t h = 0; h < n_heads; ++h) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < dh; ++j) s += q[h * dh + j] * k[r * w + h * dh + j];
      scores[r] = s * inv_sqrt;
      mx = std::max(mx, scores[r]);
    }
    double z = 0.0;
    for (auto& s : scores) z += (s = std::exp(s - mx));
    for (std::size_t r = 0; r < rows; ++r) {
      const double a = scores[r] / z;
      for (std::size_t j = 0; j < dh; ++j) out[h * dh + j] += a * v[r * w + h * dh + j];
    }
  }
  return out;
}

}  // namespace

void DecodeConfig::validate() const {
  if (beam_size < 1) throw std::invalid_argument("beam_size must be at least 1");
  if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be at least 1");
  if (is_banned(*this, special::kEos)) throw std::invalid_argument("EOS cannot be banned");
}

double hypothesis_score(const BeamHypothesis& h, double alpha) {
  if (alpha == 0.0) return h.cumulative_logprob;
  return h.cumulative_logprob / std::pow(static_cast<double>(std::max<std::size_t>(1, h.generated())), alpha);
}

std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

std::vector<TokenId> greedy_decode(const NextTokenLogProbs& next, const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<TokenId> ids{special::kBos};
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const std::vector<double> lp = next(ids);
    TokenId best = -1;
    for (std::size_t t = 0; t < lp.size(); ++t) {
      const auto id = static_cast<TokenId>(t);
      if (is_banned(cfg, id)) continue;
      if (best < 0 || lp[t] > lp[static_cast<std::size_t>(best)]) best = id;
    }
    if (best < 0) throw std::invalid_argument("every token is banned");
    ids.push_back(best);
    if (best == special::kEos) break;
  }
  return ids;
}

std::vector<BeamHypothesis> beam_search(const NextTokenLogProbs& next, const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<BeamHypothesis> live{BeamHypothesis{{special::kBos}, 0.0, false}};
  std::vector<BeamHypothesis> done;
  std::size_t capacity = cfg.beam_size;
  for (std::size_t step = 0; step < cfg.max_new_tokens && capacity > 0 && !live.empty(); ++step) {
    std::vector<BeamHypothesis> cand;
    for (const auto& h : live) {
      const std::vector<double> lp = next(h.token_ids);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        const auto id = static_cast<TokenId>(t);
        if (is_banned(cfg, id)) continue;
        BeamHypothesis c{h.token_ids, h.cumulative_logprob + lp[t], false};
        c.token_ids.push_back(id);
        cand.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(capacity, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                      [](const BeamHypothesis& a, const BeamHypothesis& b) {
                        if (a.cumulative_logprob != b.cumulative_logprob)
                          return a.cumulative_logprob > b.cumulative_logprob;
                        return lex_less(a.token_ids, b.token_ids);
                      });
    const bool last_step = step + 1 == cfg.max_new_tokens;
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      BeamHypothesis& c = cand[i];
      if (c.token_ids.back() == special::kEos || last_step) {
        c.finished = true;
        done.push_back(std::move(c));
        --capacity;
      } else {
        live.push_back(std::move(c));
      }
    }
  }
  for (auto& h : live) {  // unreachable unless every candidate was banned
    h.finished = true;
    done.push_back(std::move(h));
  }
  std::sort(done.begin(), done.end(), [&](const BeamHypothesis& a, const BeamHypothesis& b) {
    const double sa = hypothesis_score(a, cfg.length_penalty_alpha);
    const double sb = hypothesis_score(b, cfg.length_penalty_alpha);
    if (sa != sb) return sa > sb;
    return lex_less(a.token_ids, b.token_ids);
  });
  return done;
}

// ---- incremental model path ---------------------------------------------------

IncrementalDecoder::IncrementalDecoder(const PromptRrgModel& model, const Tensor& visual_tokens)
    : m_(model), n_heads_(model.config().n_heads) {
  NoGradGuard guard;
  const Tensor memory = model.visual_memory(visual_tokens);
  memory_rows_ = memory.rows();
  for (const auto& l : model.decoder_layers_) {
    const Tensor k = add_row_bias(matmul(memory, l.cross_attn.wk), l.cross_attn.bk);
    const Tensor v = add_row_bias(matmul(memory, l.cross_attn.wv), l.cross_attn.bv);
    cross_.push_back(CrossKv{{k.data().begin(), k.data().end()}, {v.data().begin(), v.data().end()}});
  }
}

IncrementalDecoder::State IncrementalDecoder::initial_state() const {
  State s;
  s.text_k.resize(m_.text_layers_.size());
  s.text_v.resize(m_.text_layers_.size());
  s.dec_k.resize(m_.decoder_layers_.size());
  s.dec_v.resize(m_.decoder_layers_.size());
  return s;
}

std::vector<double> IncrementalDecoder::embed_row(std::span<const double> row, std::size_t position) const {
  const auto& cfg = m_.config();
  if (position >= cfg.max_positions)
    throw IndexError("position " + std::to_string(position) + " exceeds max_positions " +
                     std::to_string(cfg.max_positions));
  std::vector<double> x(row.begin(), row.end());
  const auto pos = m_.pos_emb_.data().subspan(position * cfg.d_t, cfg.d_t);
  for (std::size_t j = 0; j < x.size(); ++j) x[j] += pos[j];
  return layer_norm_row(x, m_.emb_ln_);
}

std::vector<double> IncrementalDecoder::run_row(State& s, std::vector<double> x) const {
  const bool pre = m_.config().pre_norm;
  const std::size_t rows = s.rows + 1;
  for (std::size_t i = 0; i < m_.text_layers_.size(); ++i) {
    const auto& l = m_.text_layers_[i];
    auto self_attention = [&](const std::vector<double>& h) {
      const auto k = linear_row(h, l.attn.wk, l.attn.bk);
      const auto v = linear_row(h, l.attn.wv, l.attn.bv);
      s.text_k[i].insert(s.text_k[i].end(), k.begin(), k.end());
      s.text_v[i].insert(s.text_v[i].end(), v.begin(), v.end());
      const auto a = attend(linear_row(h, l.attn.wq, l.attn.bq), s.text_k[i], s.text_v[i], rows, n_heads_);
      return linear_row(a, l.attn.wo, l.attn.bo);
    };
    if (pre) {
      add_into(x, self_attention(layer_norm_row(x, l.ln1)));
      add_into(x, feed_forward_row(layer_norm_row(x, l.ln2), l.ffn));
    } else {
      add_into(x, self_attention(x));
      x = layer_norm_row(x, l.ln1);
      add_into(x, feed_forward_row(x, l.ffn));
      x = layer_norm_row(x, l.ln2);
    }
  }
  if (pre && !m_.text_layers_.empty()) x = layer_norm_row(x, m_.text_final_);
  x = vec_mat(x, m_.w_t_);

  for (std::size_t i = 0; i < m_.decoder_layers_.size(); ++i) {
    const auto& l = m_.decoder_layers_[i];
    auto self_attention = [&](const std::vector<double>& h) {
      const auto k = linear_row(h, l.self_attn.wk, l.self_attn.bk);
      const auto v = linear_row(h, l.self_attn.wv, l.self_attn.bv);
      s.dec_k[i].insert(s.dec_k[i].end(), k.begin(), k.end());
      s.dec_v[i].insert(s.dec_v[i].end(), v.begin(), v.end());
      const auto a = attend(linear_row(h, l.self_attn.wq, l.self_attn.bq), s.dec_k[i], s.dec_v[i], rows, n_heads_);
      return linear_row(a, l.self_attn.wo, l.self_attn.bo);
    };
    auto cross_attention = [&](const std::vector<double>& h) {
      const auto a = attend(linear_row(h, l.cross_attn.wq, l.cross_attn.bq), cross_[i].k, cross_[i].v,
                            memory_rows_, n_heads_);
      return linear_row(a, l.cross_attn.wo, l.cross_attn.bo);
    };
    if (pre) {
      add_into(x, self_attention(layer_norm_row(x, l.ln1)));
      add_into(x, cross_attention(layer_norm_row(x, l.ln2)));
      add_into(x, feed_forward_row(layer_norm_row(x, l.ln3), l.ffn));
    } else {
      add_into(x, self_attention(x));
      x = layer_norm_row(x, l.ln1);
      add_into(x, cross_attention(x));
      x = layer_norm_row(x, l.ln2);
      add_into(x, feed_forward_row(x, l.ffn));
      x = layer_norm_row(x, l.ln3);
    }
  }
  if (pre && !m_.decoder_layers_.empty()) x = layer_norm_row(x, m_.decoder_final_);
  s.rows = rows;
  return vec_mat(x, m_.head_);
}

void IncrementalDecoder::feed_prefix(State& s, const PromptPrefix& prefix) const {
  const std::size_t d_t = m_.config().d_t;
  switch (prefix.kind) {
    case PromptKind::None:
      return;
    case PromptKind::Manual:
      if (prefix.manual.empty()) return;
      for (TokenId id : prefix.manual.ids) feed_token(s, id);
      feed_token(s, special::kSep);
      return;
    case PromptKind::AutoWord:
    case PromptKind::AutoAll: {
      if (!m_.auto_prompt()) return;
      const Tensor& p = m_.auto_prompt()->weights;
      for (std::size_t r = 0; r < p.rows(); ++r) {
        const auto row = p.data().subspan(r * d_t, d_t);
        if (prefix.kind == PromptKind::AutoWord) {
          run_row(s, embed_row(row, s.position++));
        } else {
          run_row(s, std::vector<double>(row.begin(), row.end()));
        }
      }
      return;
    }
  }
}

std::vector<double> IncrementalDecoder::feed_token(State& s, TokenId id) const {
  const std::size_t d_t = m_.config().d_t;
  if (id < 0 || static_cast<std::size_t>(id) >= m_.config().vocab_size)
    throw IndexError("token id " + std::to_string(id) + " outside the vocabulary");
  const auto word = m_.word_emb_.data().subspan(static_cast<std::size_t>(id) * d_t, d_t);
  return run_row(s, embed_row(word, s.position++));
}

NextTokenLogProbs IncrementalDecoder::scorer(const PromptPrefix& prefix) const {
  auto base = std::make_shared<State>(initial_state());
  feed_prefix(*base, prefix);
  auto cache = std::make_shared<std::map<std::vector<TokenId>, State>>();
  return [this, base, cache](std::span<const TokenId> ids) {
    if (ids.empty() || ids.front() != special::kBos) throw std::invalid_argument("prefix must start with BOS");
    const std::vector<TokenId> key(ids.begin(), ids.end());
    const std::size_t n = key.size();
    for (auto it = cache->begin(); it != cache->end();)
      it = it->first.size() + 1 < n ? cache->erase(it) : std::next(it);
    State s = *base;
    std::size_t fed = 0;
    if (n > 1) {
      auto parent = cache->find(std::vector<TokenId>(key.begin(), key.end() - 1));
      if (parent != cache->end()) {
        s = parent->second;
        fed = n - 1;
      }
    }
    std::vector<double> logits;
    for (std::size_t i = fed; i < n; ++i) logits = feed_token(s, key[i]);
    cache->insert_or_assign(key, std::move(s));
    return log_softmax(logits);
  };
}

std::vector<TokenId> generate_report(const PromptRrgModel& model, const Tensor& visual_tokens,
                                     const PromptPrefix& prefix, const DecodeConfig& cfg, bool greedy) {
  IncrementalDecoder dec(model, visual_tokens);
  const NextTokenLogProbs next = dec.scorer(prefix);
  std::vector<TokenId> ids = greedy ? greedy_decode(next, cfg) : beam_search(next, cfg).front().token_ids;
  if (!ids.empty() && ids.front() == special::kBos) ids.erase(ids.begin());
  if (!ids.empty() && ids.back() == special::kEos) ids.pop_back();
  return ids;
}

NextTokenLogProbs full_prefix_scorer(const PromptRrgModel& model, const Tensor& visual_tokens,
                                     const PromptPrefix& prefix) {
  Tensor memory;
  {
    NoGradGuard guard;
    memory = model.visual_memory(visual_tokens);
  }
  return [&model, memory, prefix](std::span<const TokenId> ids) {
    NoGradGuard guard;
    TokenSequence text;
    if (prefix.kind == PromptKind::Manual && !prefix.manual.empty()) {
      text = prefix.manual;
      text.push(special::kSep, Role::Special);
    }
    for (TokenId id : ids) text.push(id, Role::Report);
    DropoutRng rng;
    const Tensor logits = model.text_logits(memory, text, prefix.kind, Mode::Eval, rng);
    const std::size_t v = logits.cols();
    return log_softmax(logits.data().subspan((logits.rows() - 1) * v, v));
  };
}

}  // namespace prrg
