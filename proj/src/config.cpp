#include "prrg/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace prrg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_floating_point_v<T>) {
      out = static_cast<T>(std::stod(v, &used));
    } else {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<T>(std::stoull(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<TokenId> parse_ids(const std::string& key, const std::string& v) {
  std::vector<TokenId> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<TokenId>(parse_number<std::size_t>(key, item)));
  }
  return out;
}

std::string join_ids(const std::vector<TokenId>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + std::to_string(ids[i]);
  return out;
}

/// Binds every config key to a field for both parsing and printing.
struct Binding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::map<std::string, Binding> bindings(ExperimentConfig& c) {
  std::map<std::string, Binding> b;
  auto size = [&](const std::string& k, std::size_t& f) {
    b[k] = {[&f, k](const std::string& v) { f = parse_number<std::size_t>(k, v); }, [&f] { return std::to_string(f); }};
  };
  auto u64 = [&](const std::string& k, std::uint64_t& f) {
    b[k] = {[&f, k](const std::string& v) { f = parse_number<std::uint64_t>(k, v); },
            [&f] { return std::to_string(f); }};
  };
  auto real = [&](const std::string& k, double& f) {
    b[k] = {[&f, k](const std::string& v) { f = parse_number<double>(k, v); }, [&f] { return fmt_double(f); }};
  };
  auto flag = [&](const std::string& k, bool& f) {
    b[k] = {[&f, k](const std::string& v) { f = parse_flag(k, v); }, [&f] { return std::string(f ? "true" : "false"); }};
  };
  auto text = [&](const std::string& k, std::string& f) {
    b[k] = {[&f](const std::string& v) { f = v; }, [&f] { return f; }};
  };
  size("model.d_t", c.model.d_t);
  size("model.d", c.model.d);
  size("model.d_v", c.model.d_v);
  size("model.n_heads", c.model.n_heads);
  size("model.text_layers", c.model.text_layers);
  size("model.vision_layers", c.model.vision_layers);
  size("model.decoder_layers", c.model.decoder_layers);
  size("model.ffn_mult", c.model.ffn_mult);
  size("model.max_positions", c.model.max_positions);
  real("model.dropout", c.model.dropout);
  real("model.init_std", c.model.init_std);
  flag("model.freeze_text_encoder", c.model.freeze_text_encoder);
  flag("model.pre_norm", c.model.pre_norm);
  real("optim.lr_visual", c.optim.lr_visual);
  real("optim.lr_decoder", c.optim.lr_decoder);
  real("optim.lr_head", c.optim.lr_head);
  real("optim.beta1", c.optim.beta1);
  real("optim.beta2", c.optim.beta2);
  real("optim.eps", c.optim.eps);
  real("optim.weight_decay", c.optim.weight_decay);
  real("optim.clip_norm", c.optim.clip_norm);
  b["prompt_mode"] = {[&c](const std::string& v) { c.prompt = PromptMode::parse(v); }, [&c] { return c.prompt.str(); }};
  size("n_p", c.n_p);
  size("batch_size", c.batch_size);
  size("epochs", c.epochs);
  size("patience", c.patience);
  u64("seed", c.seed);
  size("vocab_size", c.vocab_size);
  size("max_len", c.max_len);
  u64("data.seed", c.data_seed);
  size("data.train_size", c.split_sizes.train);
  size("data.val_size", c.split_sizes.val);
  size("data.test_size", c.split_sizes.test);
  real("data.normal_fraction", c.labels.normal_fraction);
  size("data.max_diseases", c.labels.max_diseases);
  size("data.grid_size", c.generator.grid_size);
  size("data.channels", c.generator.channels);
  real("data.noise_sigma", c.generator.noise_sigma);
  real("data.signature_amplitude", c.generator.signature_amplitude);
  real("data.normal_sentence_prob", c.generator.normal_sentence_prob);
  text("data.train_path", c.train_path);
  text("data.val_path", c.val_path);
  text("data.test_path", c.test_path);
  text("prompt_file", c.prompt_file);
  size("decode.beam_size", c.decode.beam_size);
  size("decode.max_new_tokens", c.decode.max_new_tokens);
  real("decode.length_penalty_alpha", c.decode.length_penalty_alpha);
  b["decode.banned"] = {[&c](const std::string& v) { c.decode.banned = parse_ids("decode.banned", v); },
                        [&c] { return join_ids(c.decode.banned); }};
  text("output_dir", c.output_dir);
  return b;
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str(), path);
}

void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    kv[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
  }
}

double OptimConfig::lr(ParamGroup g) const {
  switch (g) {
    case ParamGroup::Visual: return lr_visual;
    case ParamGroup::Decoder: return lr_decoder;
    case ParamGroup::Head: return lr_head;
  }
  return 0.0;
}

PromptMode PromptMode::parse(const std::string& text) {
  if (text == "none") return {PromptKind::None, ""};
  if (text == "auto:word") return {PromptKind::AutoWord, ""};
  if (text == "auto:all") return {PromptKind::AutoAll, ""};
  if (text.rfind("manual:", 0) == 0 && text.size() > 7) return {PromptKind::Manual, text.substr(7)};
  throw ConfigError("unknown prompt mode '" + text + "' (none | manual:<label> | auto:word | auto:all)");
}

std::string PromptMode::str() const {
  switch (kind) {
    case PromptKind::None: return "none";
    case PromptKind::Manual: return "manual:" + manual_label;
    case PromptKind::AutoWord: return "auto:word";
    case PromptKind::AutoAll: return "auto:all";
  }
  return "none";
}

ExperimentConfig ExperimentConfig::profile_defaults(const std::string& name) {
  ExperimentConfig c;
  c.profile = name;
  if (name == "desk") {
    // Trained from scratch, so the fine-tuning rates are scaled up 4x.
    c.optim.lr_visual = 2e-4;
    c.optim.lr_decoder = 1e-3;
    c.optim.lr_head = 2e-3;
    c.epochs = 15;
    return c;
  }
  if (name == "paper") {
    c.model.d = 512;
    c.model.d_t = 768;
    c.model.d_v = 1024;
    c.model.n_heads = 8;
    c.model.vision_layers = 6;
    c.model.decoder_layers = 3;
    c.model.text_layers = 3;
    c.model.ffn_mult = 4;
    c.model.max_positions = 512;
    c.batch_size = 64;
    c.vocab_size = 4300;
    return c;
  }
  throw ConfigError("unknown profile '" + name + "' (desk | paper)");
}

ExperimentConfig ExperimentConfig::from_key_values(const KeyValues& kv) {
  auto it = kv.find("profile");
  ExperimentConfig c = profile_defaults(it == kv.end() ? "desk" : it->second);
  auto b = bindings(c);
  for (const auto& [k, v] : kv) {
    if (k == "profile") continue;
    auto bit = b.find(k);
    if (bit == b.end()) throw ConfigError("unknown config key '" + k + "'");
    bit->second.set(v);
  }
  return c;
}

KeyValues ExperimentConfig::to_key_values() const {
  ExperimentConfig copy = *this;
  KeyValues kv{{"profile", profile}};
  for (const auto& [k, bnd] : bindings(copy)) kv[k] = bnd.get();
  return kv;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (batch_size < 2) fail("batch_size must be at least 2 (batch normalization in training mode)");
  if (epochs < 1) fail("epochs must be at least 1");
  if (max_len < 3) fail("max_len must leave room for BOS, one token and EOS");
  if (optim.lr_visual <= 0 || optim.lr_decoder <= 0 || optim.lr_head <= 0) fail("learning rates must be positive");
  if (prompt.kind == PromptKind::AutoWord || prompt.kind == PromptKind::AutoAll) {
    if (n_p < 1) fail("automatic prompt modes need n_p >= 1");
  }
  if (prompt.kind == PromptKind::Manual) {
    const PromptRegistry reg = prompt_file.empty() ? registry() : registry_with_file(prompt_file);
    if (!reg.count(prompt.manual_label)) fail("manual prompt label '" + prompt.manual_label + "' is not registered");
  }
  if (split_sizes.train < 2 || split_sizes.val < 1 || split_sizes.test < 1) fail("split sizes too small");
  try {
    ModelConfig m = model;
    m.vocab_size = std::max<std::size_t>(m.vocab_size, special::kCount + 1);
    m.validate();
    decode.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv = path.empty() ? KeyValues{} : read_key_values(path);
  apply_overrides(kv, overrides);
  ExperimentConfig c = ExperimentConfig::from_key_values(kv);
  if (const char* env = std::getenv("PRRG_OUTPUT_DIR"); env && *env) c.output_dir = env;
  c.validate();
  return c;
}

}  // namespace prrg
