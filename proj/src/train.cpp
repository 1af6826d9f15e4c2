#include "prrg/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace prrg {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v, int digits = 10) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b + 0x51ED2701ULL)); }

/// Fisher-Yates with an explicit generator so the order is library-independent.
std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 gen(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(gen() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Consecutive batches; a trailing batch of one joins its predecessor
/// because batch normalization needs two rows in training mode.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

std::vector<Example> gather(const std::vector<Example>& all, const std::vector<std::size_t>& idx) {
  std::vector<Example> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

std::vector<Example> examples_for(const std::vector<Sample>& samples, const Vocabulary& vocab, const PromptMode& mode,
                                  const PromptRegistry& reg, std::size_t max_len) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_example(s, vocab, mode, reg, max_len));
  return out;
}

double greedy_bleu4(const PromptRrgModel& model, const Vocabulary& vocab, const std::vector<Sample>& samples,
                    const PromptMode& mode, const PromptRegistry& reg, const DecodeConfig& decode) {
  BleuStats stats;
  DecodeConfig greedy = decode;
  greedy.beam_size = 1;
  for (const auto& s : samples) {
    const auto ids = generate_report(model, extract_visual_tokens(s.grid), make_prefix(s, vocab, mode, reg), greedy,
                                     /*greedy=*/true);
    stats.add(split_words(decode_ids_text(ids, vocab)), split_words(normalize_report(s.report)));
  }
  return stats.scores(4)[3];
}

std::map<std::string, std::string> run_meta(const ExperimentConfig& cfg, const Vocabulary& vocab) {
  return {{"prompt_mode", cfg.prompt.str()},
          {"vocab_fingerprint", hex64(vocab.fingerprint())},
          {"seed", std::to_string(cfg.seed)},
          {"profile", cfg.profile}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

std::string config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg.to_key_values()) out += k + "=" + v + "\n";
  return out;
}

struct ResumeState {
  std::size_t epoch = 0, step = 0, bad_epochs = 0, best_epoch = 0;
  double best = -1.0;
};

Checkpoint optimizer_checkpoint(const AdamW& opt, const ResumeState& rs) {
  Checkpoint c;
  c.meta = {{"epoch", std::to_string(rs.epoch)},   {"step", std::to_string(rs.step)},
            {"adam_t", std::to_string(opt.steps())}, {"best", fmt(rs.best, 17)},
            {"best_epoch", std::to_string(rs.best_epoch)}, {"bad_epochs", std::to_string(rs.bad_epochs)}};
  for (const auto& [name, mom] : opt.moments()) {
    c.tensors.emplace_back(name + "#m", Tensor({mom.m.size()}, mom.m));
    c.tensors.emplace_back(name + "#v", Tensor({mom.v.size()}, mom.v));
  }
  return c;
}

ResumeState restore_optimizer(AdamW& opt, const Checkpoint& c) {
  ResumeState rs;
  rs.epoch = std::stoull(c.meta.at("epoch"));
  rs.step = std::stoull(c.meta.at("step"));
  rs.best = std::stod(c.meta.at("best"));
  rs.best_epoch = std::stoull(c.meta.at("best_epoch"));
  rs.bad_epochs = std::stoull(c.meta.at("bad_epochs"));
  std::map<std::string, AdamMoments> moments;
  for (const auto& [name, t] : c.tensors) {
    const auto hash = name.rfind('#');
    auto& mom = moments[name.substr(0, hash)];
    (name.substr(hash + 1) == "m" ? mom.m : mom.v).assign(t.data().begin(), t.data().end());
  }
  opt.set_state(std::stoull(c.meta.at("adam_t")), std::move(moments));
  return rs;
}

}  // namespace

std::string decode_ids_text(std::span<const TokenId> ids, const Vocabulary& vocab) { return decode(ids, vocab); }

Dataset load_or_generate(const ExperimentConfig& cfg) {
  if (cfg.train_path.empty() && cfg.val_path.empty() && cfg.test_path.empty())
    return generate_dataset(cfg.data_seed, cfg.split_sizes, cfg.labels, Grammar(cfg.generator));
  if (cfg.train_path.empty() || cfg.val_path.empty() || cfg.test_path.empty())
    throw ConfigError("data.train_path, data.val_path and data.test_path must be given together");
  return Dataset{load_jsonl(cfg.train_path), load_jsonl(cfg.val_path), load_jsonl(cfg.test_path)};
}

Vocabulary build_vocabulary(const std::vector<Sample>& train, const PromptRegistry& reg, std::size_t target_size) {
  std::vector<std::string> corpus;
  corpus.reserve(train.size() + reg.size() + kNumCategories);
  for (const auto& s : train) corpus.push_back(normalize_report(s.report));
  for (const auto& [label, t] : reg) {
    std::string text = t.text;
    if (auto pos = text.find("[cn]"); pos != std::string::npos) text.replace(pos, 4, " ");
    corpus.push_back(normalize_report(text));
  }
  for (auto name : kCategoryNames) corpus.push_back(normalize_report(name));
  return Vocabulary::train(corpus, target_size);
}

PromptRegistry registry_for(const ExperimentConfig& cfg) {
  return cfg.prompt_file.empty() ? registry() : registry_with_file(cfg.prompt_file);
}

ModelConfig model_config_for(const ExperimentConfig& cfg, const Vocabulary& vocab) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  m.grid_channels = cfg.generator.channels;
  const bool automatic = cfg.prompt.kind == PromptKind::AutoWord || cfg.prompt.kind == PromptKind::AutoAll;
  m.auto_prompt_length = automatic ? cfg.n_p : 0;
  return m;
}

Example make_example(const Sample& s, const Vocabulary& vocab, const PromptMode& mode, const PromptRegistry& reg,
                     std::size_t max_len) {
  Example ex{extract_visual_tokens(s.grid), encode_truncated(s.report, vocab, max_len)};
  if (mode.kind == PromptKind::Manual) {
    const PromptPrefix p = make_prefix(s, vocab, mode, reg);
    ex.text = prepend(p.manual, ex.text);
  }
  return ex;
}

PromptPrefix make_prefix(const Sample& s, const Vocabulary& vocab, const PromptMode& mode, const PromptRegistry& reg) {
  PromptPrefix p;
  p.kind = mode.kind;
  if (mode.kind == PromptKind::Manual) {
    auto it = reg.find(mode.manual_label);
    if (it == reg.end()) throw ConfigError("manual prompt label '" + mode.manual_label + "' is not registered");
    p.manual = instantiate(it->second, s.labels, vocab).tokens;
  }
  return p;
}

std::string EpochLog::json() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["train_loss"] = train_loss;
  j["val_loss"] = val_loss;
  j["val_bleu4"] = val_bleu4;
  return j.dump();
}

double evaluation_loss(PromptRrgModel& model, const std::vector<Example>& examples, PromptKind kind,
                       std::size_t batch_size) {
  NoGradGuard guard;
  double total = 0.0, weight = 0.0;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& idx : make_batches(order, batch_size)) {
    const auto batch = gather(examples, idx);
    DropoutRng rng;
    const double l = model.batch_loss(batch, kind, Mode::Eval, rng).item();
    total += l * static_cast<double>(idx.size());
    weight += static_cast<double>(idx.size());
  }
  return total / weight;
}

TrainResult train(const ExperimentConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  Dataset owned;
  if (!opts.data) owned = load_or_generate(cfg);
  const Dataset& data = opts.data ? *opts.data : owned;
  const PromptRegistry reg = registry_for(cfg);

  TrainResult result;
  result.vocab_path = (dir / "vocab.txt").string();
  result.best_checkpoint = (dir / "best.ckpt").string();
  result.last_checkpoint = (dir / "last.ckpt").string();
  const std::string state_path = (dir / "state.ckpt").string();
  const std::string log_path = (dir / "metrics.jsonl").string();

  const Vocabulary vocab = build_vocabulary(data.train, reg, cfg.vocab_size);
  vocab.save(result.vocab_path);
  write_text((dir / "config.cfg").string(), config_text(cfg));
  const auto meta = run_meta(cfg, vocab);

  PromptRrgModel model(model_config_for(cfg, vocab), cfg.seed);
  AdamW opt(cfg.optim);
  ResumeState rs;

  const bool resuming = opts.resume && fs::exists(state_path) && fs::exists(result.last_checkpoint);
  if (resuming) {
    const Checkpoint last = read_checkpoint(result.last_checkpoint);
    if (last.meta.at("vocab_fingerprint") != meta.at("vocab_fingerprint"))
      throw CheckpointError("cannot resume: vocabulary changed since the checkpoint was written");
    load_into(model, last);
    rs = restore_optimizer(opt, read_checkpoint(state_path));
    std::ifstream in(log_path);
    for (std::string line; result.epochs.size() < rs.epoch && std::getline(in, line);) {
      const auto j = nlohmann::json::parse(line);
      result.epochs.push_back(
          EpochLog{j["epoch"].get<std::size_t>(), j["train_loss"], j["val_loss"], j["val_bleu4"]});
    }
  }
  {
    std::ofstream log(log_path, std::ios::trunc);
    for (const auto& e : result.epochs) log << e.json() << '\n';
  }

  const std::vector<Example> train_ex = examples_for(data.train, vocab, cfg.prompt, reg, cfg.max_len);
  const std::vector<Example> val_ex = examples_for(data.val, vocab, cfg.prompt, reg, cfg.max_len);
  const PromptKind kind = cfg.prompt.kind;
  const std::size_t limit = std::min(cfg.epochs, opts.stop_after_epochs.value_or(cfg.epochs));

  if (rs.bad_epochs >= cfg.patience && rs.epoch > 0) result.stopped_early = true;
  while (rs.epoch < limit && !result.stopped_early) {
    const auto batches = make_batches(shuffled(train_ex.size(), mix(cfg.seed, rs.epoch)), cfg.batch_size);
    double loss_sum = 0.0, loss_weight = 0.0;
    for (const auto& idx : batches) {
      const auto batch = gather(train_ex, idx);
      DropoutRng rng(mix(cfg.seed ^ 0xD50ULL, rs.step));
      Tape::active().clear();
      const Tensor loss = model.batch_loss(batch, kind, Mode::Train, rng);
      if (!std::isfinite(loss.item()))
        throw NumericalError("non-finite training loss at epoch " + std::to_string(rs.epoch + 1) + ", step " +
                             std::to_string(rs.step));
      backward(loss);
      Tape::active().clear();
      opt.step(model.parameters());
      zero_grads(model.parameters());
      loss_sum += loss.item() * static_cast<double>(idx.size());
      loss_weight += static_cast<double>(idx.size());
      ++rs.step;
    }
    ++rs.epoch;
    EpochLog e;
    e.epoch = rs.epoch;
    e.train_loss = loss_sum / loss_weight;
    e.val_loss = evaluation_loss(model, val_ex, kind, cfg.batch_size);
    e.val_bleu4 = greedy_bleu4(model, vocab, data.val, cfg.prompt, reg, cfg.decode);
    if (!std::isfinite(e.val_loss)) throw NumericalError("non-finite validation loss at epoch " + std::to_string(rs.epoch));
    result.epochs.push_back(e);
    {
      std::ofstream log(log_path, std::ios::app);
      log << e.json() << '\n';
    }
    if (opts.log) *opts.log << e.json() << std::endl;

    if (e.val_bleu4 > rs.best) {
      rs.best = e.val_bleu4;
      rs.best_epoch = rs.epoch;
      rs.bad_epochs = 0;
      save_model(model, result.best_checkpoint, meta);
    } else {
      ++rs.bad_epochs;
    }
    save_model(model, result.last_checkpoint, meta);
    write_checkpoint(optimizer_checkpoint(opt, rs), state_path);
    if (rs.bad_epochs >= cfg.patience) result.stopped_early = true;
  }
  result.best_val_bleu4 = rs.best;
  result.best_epoch = rs.best_epoch;
  return result;
}

// ---- evaluation ---------------------------------------------------------------

EvalResult evaluate(const PromptRrgModel& model, const Vocabulary& vocab, const std::vector<Sample>& samples,
                    const PromptMode& mode, const PromptRegistry& reg, const DecodeConfig& decode,
                    const EvalOptions& opts) {
  EvalResult out;
  std::vector<std::string> cands, refs;
  for (const auto& s : samples) {
    SampleResult r;
    r.id = s.id;
    r.reference = normalize_report(s.report);
    if (opts.oracle) {
      r.candidate = r.reference;
    } else {
      const auto ids =
          generate_report(model, extract_visual_tokens(s.grid), make_prefix(s, vocab, mode, reg), decode, opts.greedy);
      r.candidate = decode_ids_text(ids, vocab);
    }
    const Words c = split_words(r.candidate), ref = split_words(r.reference);
    r.bleu4 = sentence_bleu(c, ref);
    r.meteor = meteor_sentence(c, ref).score;
    cands.push_back(r.candidate);
    refs.push_back(r.reference);
    out.samples.push_back(std::move(r));
  }
  out.report = evaluate_corpus(cands, refs);
  return out;
}

std::string EvalResult::metrics_csv() const { return report.to_csv(); }

std::string EvalResult::per_sample_csv() const {
  std::string out = "id,bleu4,meteor\n";
  for (const auto& s : samples) out += s.id + "," + fmt(s.bleu4) + "," + fmt(s.meteor) + "\n";
  return out;
}

LoadedRun load_run(const std::string& checkpoint_path, const std::string& vocab_path) {
  const Checkpoint ckpt = read_checkpoint(checkpoint_path);
  Vocabulary vocab = Vocabulary::load(vocab_path);
  auto it = ckpt.meta.find("vocab_fingerprint");
  if (it == ckpt.meta.end() || it->second != hex64(vocab.fingerprint()))
    throw CheckpointError("vocabulary " + vocab_path + " does not match the one the checkpoint was trained with");
  LoadedRun run{restore_model(ckpt), std::move(vocab), PromptMode::parse(ckpt.meta.at("prompt_mode")), ckpt.meta};
  return run;
}

// ---- prompt comparison --------------------------------------------------------

Comparison compare_prompts(const ExperimentConfig& base, const std::vector<std::string>& modes,
                           const std::vector<std::uint64_t>& seeds, std::ostream* log) {
  if (modes.empty() || seeds.empty()) throw ConfigError("compare-prompts needs at least one mode and one seed");
  const Dataset data = load_or_generate(base);
  Comparison cmp;
  for (const auto& spec : modes) {
    ExperimentConfig cfg = base;
    std::string mode_text = spec;
    if (auto at = spec.find('@'); at != std::string::npos) {
      mode_text = spec.substr(0, at);
      try {
        cfg.n_p = std::stoull(spec.substr(at + 1));
      } catch (const std::exception&) {
        throw ConfigError("bad prompt length in '" + spec + "'");
      }
    }
    cfg.prompt = PromptMode::parse(mode_text);
    std::string dir_name = spec;
    std::replace(dir_name.begin(), dir_name.end(), ':', '_');
    std::replace(dir_name.begin(), dir_name.end(), '@', '_');
    ComparisonRow mean{spec, 0, std::vector<double>(4, 0.0), 0.0, 0.0};
    for (auto seed : seeds) {
      cfg.seed = seed;
      cfg.output_dir = (fs::path(base.output_dir) / dir_name / ("seed-" + std::to_string(seed))).string();
      if (log) *log << "# " << spec << " seed " << seed << std::endl;
      TrainOptions topts;
      topts.log = log;
      topts.data = &data;
      const TrainResult tr = train(cfg, topts);
      const LoadedRun run = load_run(tr.best_checkpoint, tr.vocab_path);
      const EvalResult ev = evaluate(run.model, run.vocab, data.test, cfg.prompt, registry_for(cfg), cfg.decode);
      write_text((fs::path(cfg.output_dir) / "test_metrics.csv").string(), ev.metrics_csv());
      write_text((fs::path(cfg.output_dir) / "test_per_sample.csv").string(), ev.per_sample_csv());
      ComparisonRow row{spec, seed, ev.report.bleu, ev.report.meteor, ev.report.cider.presented};
      for (std::size_t n = 0; n < 4; ++n) mean.bleu[n] += row.bleu[n] / static_cast<double>(seeds.size());
      mean.meteor += row.meteor / static_cast<double>(seeds.size());
      mean.cider += row.cider / static_cast<double>(seeds.size());
      cmp.seed_rows.push_back(std::move(row));
    }
    cmp.mean_rows.push_back(std::move(mean));
  }
  fs::create_directories(base.output_dir);
  write_text((fs::path(base.output_dir) / "comparison.csv").string(), cmp.csv());
  write_text((fs::path(base.output_dir) / "comparison.md").string(), cmp.table());
  return cmp;
}

std::string Comparison::csv() const {
  std::string out = "method,seed,bleu1,bleu2,bleu3,bleu4,meteor,cider\n";
  auto emit = [&](const ComparisonRow& r, const std::string& seed) {
    out += r.mode + "," + seed;
    for (double b : r.bleu) out += "," + fmt(b);
    out += "," + fmt(r.meteor) + "," + fmt(r.cider) + "\n";
  };
  for (const auto& r : mean_rows) emit(r, "mean");
  for (const auto& r : seed_rows) emit(r, std::to_string(r.seed));
  return out;
}

std::string Comparison::table() const {
  std::ostringstream out;
  out << "| Method | Seed | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | METEOR | CIDEr |\n"
      << "|---|---|---|---|---|---|---|---|\n";
  auto emit = [&](const ComparisonRow& r, const std::string& seed) {
    out << "| " << r.mode << " | " << seed;
    for (double b : r.bleu) out << " | " << fmt(b, 4);
    out << " | " << fmt(r.meteor, 4) << " | " << fmt(r.cider, 4) << " |\n";
  };
  for (const auto& r : mean_rows) emit(r, "mean");
  for (const auto& r : seed_rows) emit(r, std::to_string(r.seed));
  out << "\nScores x100 on the synthetic test split. Epochs, widths and learning rates are artifact defaults, "
         "not values from the original study.\n";
  return out.str();
}

}  // namespace prrg
