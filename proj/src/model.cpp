#include "prrg/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace prrg {

namespace {

std::size_t parse_size(const std::map<std::string, std::string>& kv, const std::string& key, std::size_t def) {
  auto it = kv.find(key);
  return it == kv.end() ? def : static_cast<std::size_t>(std::stoull(it->second));
}

double parse_double(const std::map<std::string, std::string>& kv, const std::string& key, double def) {
  auto it = kv.find(key);
  return it == kv.end() ? def : std::stod(it->second);
}

bool parse_bool(const std::map<std::string, std::string>& kv, const std::string& key, bool def) {
  auto it = kv.find(key);
  if (it == kv.end()) return def;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw std::invalid_argument("expected a boolean for " + key + ", got '" + it->second + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row_bias(matmul(x, w), b); }

Tensor feed_forward(const FeedForwardParams& p, const Tensor& x) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor norm(const NormParams& p, const Tensor& x) { return layer_norm(x, p.gamma, p.beta); }

}  // namespace

// ---- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (d_t == 0 || d == 0 || d_v == 0 || grid_channels == 0) fail("widths must be positive");
  if (n_heads == 0 || d % n_heads || d_t % n_heads) fail("d and d_t must be divisible by n_heads");
  if (vocab_size <= special::kCount) fail("vocab_size must exceed the special tokens");
  if (max_positions == 0) fail("max_positions must be positive");
  if (ffn_mult == 0) fail("ffn_mult must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {{"d_t", std::to_string(d_t)},
          {"d", std::to_string(d)},
          {"d_v", std::to_string(d_v)},
          {"grid_channels", std::to_string(grid_channels)},
          {"n_heads", std::to_string(n_heads)},
          {"text_layers", std::to_string(text_layers)},
          {"vision_layers", std::to_string(vision_layers)},
          {"decoder_layers", std::to_string(decoder_layers)},
          {"ffn_mult", std::to_string(ffn_mult)},
          {"vocab_size", std::to_string(vocab_size)},
          {"max_positions", std::to_string(max_positions)},
          {"auto_prompt_length", std::to_string(auto_prompt_length)},
          {"dropout", fmt_double(dropout)},
          {"init_std", fmt_double(init_std)},
          {"freeze_text_encoder", freeze_text_encoder ? "true" : "false"},
          {"pre_norm", pre_norm ? "true" : "false"}};
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.d_t = parse_size(kv, "d_t", c.d_t);
  c.d = parse_size(kv, "d", c.d);
  c.d_v = parse_size(kv, "d_v", c.d_v);
  c.grid_channels = parse_size(kv, "grid_channels", c.grid_channels);
  c.n_heads = parse_size(kv, "n_heads", c.n_heads);
  c.text_layers = parse_size(kv, "text_layers", c.text_layers);
  c.vision_layers = parse_size(kv, "vision_layers", c.vision_layers);
  c.decoder_layers = parse_size(kv, "decoder_layers", c.decoder_layers);
  c.ffn_mult = parse_size(kv, "ffn_mult", c.ffn_mult);
  c.vocab_size = parse_size(kv, "vocab_size", c.vocab_size);
  c.max_positions = parse_size(kv, "max_positions", c.max_positions);
  c.auto_prompt_length = parse_size(kv, "auto_prompt_length", c.auto_prompt_length);
  c.dropout = parse_double(kv, "dropout", c.dropout);
  c.init_std = parse_double(kv, "init_std", c.init_std);
  c.freeze_text_encoder = parse_bool(kv, "freeze_text_encoder", c.freeze_text_encoder);
  c.pre_norm = parse_bool(kv, "pre_norm", c.pre_norm);
  return c;
}

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Visual: return "visual";
    case ParamGroup::Decoder: return "decoder";
    case ParamGroup::Head: return "head";
  }
  return "?";
}

// ---- helpers ----------------------------------------------------------------

Tensor causal_mask(std::size_t rows) {
  std::vector<double> m(rows * rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = i + 1; j < rows; ++j) m[i * rows + j] = -1e9;
  return Tensor({rows, rows}, std::move(m));
}

Tensor multi_head_attention(const AttentionParams& p, const Tensor& queries, const Tensor& keys_values,
                            std::size_t n_heads, bool causal) {
  const Tensor q = linear(queries, p.wq, p.bq);
  const Tensor k = linear(keys_values, p.wk, p.bk);
  const Tensor v = linear(keys_values, p.wv, p.bv);
  const std::size_t width = q.cols(), dh = width / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::optional<Tensor> mask;
  if (causal) {
    if (queries.rows() != keys_values.rows()) throw DimensionError("causal attention needs square scores");
    mask = causal_mask(queries.rows());
  }
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor qh = slice(q, 1, h * dh, dh);
    const Tensor kh = slice(k, 1, h * dh, dh);
    const Tensor vh = slice(v, 1, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (mask) scores = add(scores, *mask);
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  return linear(n_heads == 1 ? heads.front() : concat(heads, 1), p.wo, p.bo);
}

void report_targets(const TokenSequence& text, std::size_t offset, std::vector<int>& targets,
                    std::vector<bool>& include) {
  const std::size_t rows = offset + text.size();
  targets.assign(rows, 0);
  include.assign(rows, false);
  for (std::size_t r = 0; r + 1 < rows; ++r) {
    if (r + 1 < offset) continue;
    const std::size_t next = r + 1 - offset;
    if (text.roles[next] != Role::Report) continue;
    if (next == 0 || text.roles[next - 1] != Role::Report) continue;  // the report's BOS
    targets[r] = text.ids[next];
    include[r] = true;
  }
}

// ---- construction -------------------------------------------------------------

Tensor PromptRrgModel::new_param(const std::string& name, Shape shape, ParamGroup group, bool text_encoder,
                                 double init) {
  Tensor t = Tensor::full(std::move(shape), init, true);
  params_.push_back(NamedParam{name, t, group, text_encoder});
  return t;
}

Tensor PromptRrgModel::new_normal(const std::string& name, Shape shape, ParamGroup group, bool text_encoder) {
  Tensor t = new_param(name, std::move(shape), group, text_encoder, 0.0);
  std::mt19937_64 gen(splitmix64(init_seed_ + 0x1000 * ++init_counter_));
  std::normal_distribution<double> dist(0.0, cfg_.init_std);
  for (auto& v : t.mutable_data()) v = dist(gen);
  return t;
}

AttentionParams PromptRrgModel::new_attention(const std::string& pre, std::size_t w, ParamGroup g, bool text) {
  return AttentionParams{new_normal(pre + ".wq", {w, w}, g, text), new_param(pre + ".bq", {w}, g, text, 0.0),
                         new_normal(pre + ".wk", {w, w}, g, text), new_param(pre + ".bk", {w}, g, text, 0.0),
                         new_normal(pre + ".wv", {w, w}, g, text), new_param(pre + ".bv", {w}, g, text, 0.0),
                         new_normal(pre + ".wo", {w, w}, g, text), new_param(pre + ".bo", {w}, g, text, 0.0)};
}

FeedForwardParams PromptRrgModel::new_ffn(const std::string& pre, std::size_t w, ParamGroup g, bool text) {
  const std::size_t h = w * cfg_.ffn_mult;
  return FeedForwardParams{new_normal(pre + ".w1", {w, h}, g, text), new_param(pre + ".b1", {h}, g, text, 0.0),
                           new_normal(pre + ".w2", {h, w}, g, text), new_param(pre + ".b2", {w}, g, text, 0.0)};
}

NormParams PromptRrgModel::new_norm(const std::string& pre, std::size_t w, ParamGroup g, bool text) {
  return NormParams{new_param(pre + ".gamma", {w}, g, text, 1.0), new_param(pre + ".beta", {w}, g, text, 0.0)};
}

PromptRrgModel::PromptRrgModel(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), init_seed_(seed), bn_state_(cfg_.d_v) {
  cfg_.validate();
  const auto dec = ParamGroup::Decoder;
  word_emb_ = new_normal("embed.word", {cfg_.vocab_size, cfg_.d_t}, dec, true);
  pos_emb_ = new_normal("embed.pos", {cfg_.max_positions, cfg_.d_t}, dec, true);
  emb_ln_ = new_norm("embed.ln", cfg_.d_t, dec, true);
  for (std::size_t i = 0; i < cfg_.text_layers; ++i) {
    const std::string p = "text." + std::to_string(i);
    EncoderLayer l;
    l.attn = new_attention(p + ".attn", cfg_.d_t, dec, true);
    l.ffn = new_ffn(p + ".ffn", cfg_.d_t, dec, true);
    l.ln1 = new_norm(p + ".ln1", cfg_.d_t, dec, true);
    l.ln2 = new_norm(p + ".ln2", cfg_.d_t, dec, true);
    text_layers_.push_back(std::move(l));
  }
  if (cfg_.text_layers > 0 && cfg_.pre_norm) text_final_ = new_norm("text.final", cfg_.d_t, dec, true);
  w_t_ = new_normal("text_proj.w", {cfg_.d_t, cfg_.d}, dec, false);

  const auto vis = ParamGroup::Visual;
  patch_w_ = new_normal("vis.patch.w", {cfg_.grid_channels, cfg_.d_v}, vis, false);
  patch_b_ = new_param("vis.patch.b", {cfg_.d_v}, vis, false, 0.0);
  vis_bn_ = new_norm("vis.bn", cfg_.d_v, vis, false);
  w_s_ = new_normal("vis.proj.w", {cfg_.d_v, cfg_.d}, vis, false);
  for (std::size_t i = 0; i < cfg_.vision_layers; ++i) {
    const std::string p = "vis.enc." + std::to_string(i);
    EncoderLayer l;
    l.attn = new_attention(p + ".attn", cfg_.d, vis, false);
    l.ffn = new_ffn(p + ".ffn", cfg_.d, vis, false);
    l.ln1 = new_norm(p + ".ln1", cfg_.d, vis, false);
    l.ln2 = new_norm(p + ".ln2", cfg_.d, vis, false);
    vision_layers_.push_back(std::move(l));
  }
  if (cfg_.vision_layers > 0 && cfg_.pre_norm) vision_final_ = new_norm("vis.enc.final", cfg_.d, vis, false);

  for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    DecoderLayer l;
    l.self_attn = new_attention(p + ".self", cfg_.d, dec, false);
    l.cross_attn = new_attention(p + ".cross", cfg_.d, dec, false);
    l.ffn = new_ffn(p + ".ffn", cfg_.d, dec, false);
    l.ln1 = new_norm(p + ".ln1", cfg_.d, dec, false);
    l.ln2 = new_norm(p + ".ln2", cfg_.d, dec, false);
    l.ln3 = new_norm(p + ".ln3", cfg_.d, dec, false);
    decoder_layers_.push_back(std::move(l));
  }
  if (cfg_.decoder_layers > 0 && cfg_.pre_norm) decoder_final_ = new_norm("dec.final", cfg_.d, dec, false);
  head_ = new_normal("head.w", {cfg_.d, cfg_.vocab_size}, ParamGroup::Head, false);

  if (cfg_.auto_prompt_length > 0) {
    auto_prompt_ = init_auto_prompt(cfg_.auto_prompt_length, cfg_.d_t, splitmix64(seed ^ 0xA070ULL));
    params_.push_back(NamedParam{"prompt.P", auto_prompt_->weights, ParamGroup::Decoder, false});
  }
  for (auto& p : params_)
    if (p.text_encoder && cfg_.freeze_text_encoder) p.tensor.set_requires_grad(false);
}

const Tensor& PromptRrgModel::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("no parameter named " + name);
}

std::size_t PromptRrgModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t PromptRrgModel::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.tensor.requires_grad()) n += p.tensor.numel();
  return n;
}

void PromptRrgModel::rebind() {
  auto get = [&](const std::string& n) { return parameter(n); };
  auto att = [&](const std::string& p) {
    return AttentionParams{get(p + ".wq"), get(p + ".bq"), get(p + ".wk"), get(p + ".bk"),
                           get(p + ".wv"), get(p + ".bv"), get(p + ".wo"), get(p + ".bo")};
  };
  auto ffn = [&](const std::string& p) {
    return FeedForwardParams{get(p + ".w1"), get(p + ".b1"), get(p + ".w2"), get(p + ".b2")};
  };
  auto nrm = [&](const std::string& p) { return NormParams{get(p + ".gamma"), get(p + ".beta")}; };
  word_emb_ = get("embed.word");
  pos_emb_ = get("embed.pos");
  emb_ln_ = nrm("embed.ln");
  for (std::size_t i = 0; i < text_layers_.size(); ++i) {
    const std::string p = "text." + std::to_string(i);
    text_layers_[i] = EncoderLayer{att(p + ".attn"), ffn(p + ".ffn"), nrm(p + ".ln1"), nrm(p + ".ln2")};
  }
  if (cfg_.text_layers > 0 && cfg_.pre_norm) text_final_ = nrm("text.final");
  w_t_ = get("text_proj.w");
  patch_w_ = get("vis.patch.w");
  patch_b_ = get("vis.patch.b");
  vis_bn_ = nrm("vis.bn");
  w_s_ = get("vis.proj.w");
  for (std::size_t i = 0; i < vision_layers_.size(); ++i) {
    const std::string p = "vis.enc." + std::to_string(i);
    vision_layers_[i] = EncoderLayer{att(p + ".attn"), ffn(p + ".ffn"), nrm(p + ".ln1"), nrm(p + ".ln2")};
  }
  if (cfg_.vision_layers > 0 && cfg_.pre_norm) vision_final_ = nrm("vis.enc.final");
  for (std::size_t i = 0; i < decoder_layers_.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    decoder_layers_[i] = DecoderLayer{att(p + ".self"), att(p + ".cross"), ffn(p + ".ffn"),
                                      nrm(p + ".ln1"),  nrm(p + ".ln2"),   nrm(p + ".ln3")};
  }
  if (cfg_.decoder_layers > 0 && cfg_.pre_norm) decoder_final_ = nrm("dec.final");
  head_ = get("head.w");
  if (auto_prompt_) auto_prompt_->weights = get("prompt.P");
}

PromptRrgModel PromptRrgModel::clone() const {
  PromptRrgModel copy = *this;
  for (auto& p : copy.params_) p.tensor = p.tensor.clone();
  copy.rebind();
  return copy;
}

// ---- embedding ----------------------------------------------------------------

Tensor PromptRrgModel::embed_rows(const Tensor& rows, std::size_t first_position, Mode mode, DropoutRng& rng) const {
  const std::size_t n = rows.rows();
  if (first_position + n > cfg_.max_positions)
    throw IndexError("sequence of " + std::to_string(first_position + n) + " positions exceeds max_positions " +
                     std::to_string(cfg_.max_positions));
  std::vector<int> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(first_position + i);
  const Tensor summed = add(rows, embedding_gather(pos_emb_, positions));
  return dropout(norm(emb_ln_, summed), cfg_.dropout, mode, rng);
}

Tensor PromptRrgModel::embed_tokens(const TokenSequence& seq, Mode mode, DropoutRng& rng) const {
  return embed_rows(embedding_gather(word_emb_, seq.ids), 0, mode, rng);
}

Tensor PromptRrgModel::embed_with_auto_prompt(const TokenSequence& seq, const AutoPromptMatrix& prompt, Mode mode,
                                              DropoutRng& rng) const {
  const Tensor words = embedding_gather(word_emb_, seq.ids);
  return embed_rows(concat({prompt.weights, words}, 0), 0, mode, rng);
}

Tensor PromptRrgModel::embed_auto_all(const TokenSequence& seq, const AutoPromptMatrix& prompt, Mode mode,
                                      DropoutRng& rng) const {
  return concat({prompt.weights, embed_tokens(seq, mode, rng)}, 0);
}

// ---- encoders -----------------------------------------------------------------

Tensor PromptRrgModel::encoder_stack(const std::vector<EncoderLayer>& layers, const NormParams* final_norm,
                                     const Tensor& input, bool causal, Mode mode, DropoutRng& rng) const {
  Tensor x = input;
  const double p = cfg_.dropout;
  for (const auto& l : layers) {
    if (cfg_.pre_norm) {
      const Tensor h = norm(l.ln1, x);
      x = add(x, dropout(multi_head_attention(l.attn, h, h, cfg_.n_heads, causal), p, mode, rng));
      x = add(x, dropout(feed_forward(l.ffn, norm(l.ln2, x)), p, mode, rng));
    } else {
      x = norm(l.ln1, add(x, dropout(multi_head_attention(l.attn, x, x, cfg_.n_heads, causal), p, mode, rng)));
      x = norm(l.ln2, add(x, dropout(feed_forward(l.ffn, x), p, mode, rng)));
    }
  }
  if (final_norm && !layers.empty() && cfg_.pre_norm) x = norm(*final_norm, x);
  return x;
}

Tensor PromptRrgModel::encode_text(const Tensor& embedded, Mode mode, DropoutRng& rng) const {
  return encoder_stack(text_layers_, &text_final_, embedded, /*causal=*/true, mode, rng);
}

Tensor PromptRrgModel::project_text(const Tensor& encoded) const { return matmul(encoded, w_t_); }

Tensor PromptRrgModel::patch_embed(const Tensor& visual_tokens) const {
  return linear(visual_tokens, patch_w_, patch_b_);
}

std::vector<Tensor> PromptRrgModel::project_vision(const std::vector<Tensor>& visual_tokens, Mode mode,
                                                   DropoutRng& rng) {
  if (visual_tokens.empty()) throw DimensionError("project_vision: empty batch");
  if (mode == Mode::Train && visual_tokens.size() < 2)
    throw DimensionError("project_vision: batch normalization in training mode needs at least 2 samples");
  std::vector<std::size_t> sizes;
  for (const auto& t : visual_tokens) sizes.push_back(t.rows());
  const Tensor stacked = visual_tokens.size() == 1 ? visual_tokens.front() : concat(visual_tokens, 0);
  const Tensor normed = batch_norm_1d(patch_embed(stacked), vis_bn_.gamma, vis_bn_.beta, bn_state_, mode);
  const Tensor projected = dropout(relu(matmul(normed, w_s_)), cfg_.dropout, mode, rng);
  if (sizes.size() == 1) return {projected};
  return split(projected, 0, sizes);
}

Tensor PromptRrgModel::project_vision_eval(const Tensor& visual_tokens) const {
  BatchNormState frozen = bn_state_;
  DropoutRng rng;
  const Tensor normed = batch_norm_1d(patch_embed(visual_tokens), vis_bn_.gamma, vis_bn_.beta, frozen, Mode::Eval);
  return relu(matmul(normed, w_s_));
}

Tensor PromptRrgModel::encode_vision(const Tensor& projected, Mode mode, DropoutRng& rng) const {
  return encoder_stack(vision_layers_, &vision_final_, projected, /*causal=*/false, mode, rng);
}

Tensor PromptRrgModel::visual_memory(const Tensor& visual_tokens) const {
  DropoutRng rng;
  return encode_vision(project_vision_eval(visual_tokens), Mode::Eval, rng);
}

// ---- decoder ------------------------------------------------------------------

Tensor PromptRrgModel::decode_logits(const Tensor& memory, const Tensor& text_latent, Mode mode,
                                     DropoutRng& rng) const {
  if (text_latent.rows() == 0) throw DimensionError("decode_logits: empty textual prefix (BOS required)");
  Tensor x = text_latent;
  const double p = cfg_.dropout;
  const std::size_t h = cfg_.n_heads;
  for (const auto& l : decoder_layers_) {
    if (cfg_.pre_norm) {
      const Tensor a = norm(l.ln1, x);
      x = add(x, dropout(multi_head_attention(l.self_attn, a, a, h, true), p, mode, rng));
      x = add(x, dropout(multi_head_attention(l.cross_attn, norm(l.ln2, x), memory, h, false), p, mode, rng));
      x = add(x, dropout(feed_forward(l.ffn, norm(l.ln3, x)), p, mode, rng));
    } else {
      x = norm(l.ln1, add(x, dropout(multi_head_attention(l.self_attn, x, x, h, true), p, mode, rng)));
      x = norm(l.ln2, add(x, dropout(multi_head_attention(l.cross_attn, x, memory, h, false), p, mode, rng)));
      x = norm(l.ln3, add(x, dropout(feed_forward(l.ffn, x), p, mode, rng)));
    }
  }
  if (!decoder_layers_.empty() && cfg_.pre_norm) x = norm(decoder_final_, x);
  return matmul(x, head_);
}

Tensor PromptRrgModel::text_logits(const Tensor& memory, const TokenSequence& text, PromptKind kind, Mode mode,
                                   DropoutRng& rng) const {
  Tensor embedded;
  switch (kind) {
    case PromptKind::None:
    case PromptKind::Manual:
      embedded = embed_tokens(text, mode, rng);
      break;
    case PromptKind::AutoWord:
    case PromptKind::AutoAll: {
      const AutoPromptMatrix empty{Tensor::zeros({0, cfg_.d_t})};
      const AutoPromptMatrix& p = auto_prompt_ ? *auto_prompt_ : empty;
      embedded = kind == PromptKind::AutoWord ? embed_with_auto_prompt(text, p, mode, rng)
                                              : embed_auto_all(text, p, mode, rng);
      break;
    }
  }
  return decode_logits(memory, project_text(encode_text(embedded, mode, rng)), mode, rng);
}

Tensor PromptRrgModel::batch_loss(std::span<const Example> batch, PromptKind kind, Mode mode, DropoutRng& rng) {
  std::vector<Tensor> visual;
  visual.reserve(batch.size());
  for (const auto& ex : batch) visual.push_back(ex.visual_tokens);
  const std::vector<Tensor> projected = project_vision(visual, mode, rng);
  const bool automatic = kind == PromptKind::AutoWord || kind == PromptKind::AutoAll;
  const std::size_t offset = automatic && auto_prompt_ ? auto_prompt_->length() : 0;

  std::vector<Tensor> logits;
  std::vector<int> targets;
  std::vector<bool> include;
  std::vector<int> t;
  std::vector<bool> inc;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor memory = encode_vision(projected[i], mode, rng);
    logits.push_back(text_logits(memory, batch[i].text, kind, mode, rng));
    report_targets(batch[i].text, offset, t, inc);
    targets.insert(targets.end(), t.begin(), t.end());
    include.insert(include.end(), inc.begin(), inc.end());
  }
  const Tensor all = logits.size() == 1 ? logits.front() : concat(logits, 0);
  return cross_entropy(all, targets, include);
}

}  // namespace prrg
