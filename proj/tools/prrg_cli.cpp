// Command-line front end: data generation, training, evaluation, single
// sample generation, prompt comparison and the gradient suite.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "prrg/checkpoint.hpp"
#include "prrg/config.hpp"
#include "prrg/gradcheck.hpp"
#include "prrg/optim.hpp"
#include "prrg/train.hpp"

namespace fs = std::filesystem;
using namespace prrg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "flat key=value config file");
  cmd->add_option("--set", c.overrides, "key=value override (repeatable)");
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

const std::vector<Sample>& pick_split(const Dataset& d, const std::string& split) {
  switch (parse_split(split)) {
    case Split::Train: return d.train;
    case Split::Val: return d.val;
    case Split::Test: return d.test;
  }
  return d.test;
}

template <typename T>
std::vector<T> split_list(const std::string& text, T (*conv)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(conv(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prompt-conditioned report generation on synthetic data"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, generate_c, cmp_c;
  auto* gen = app.add_subcommand("gen-data", "write train/val/test JSONL splits");
  add_common(gen, gen_c);

  bool resume = false;
  auto* tr = app.add_subcommand("train", "train one run");
  add_common(tr, train_c);
  tr->add_flag("--resume", resume, "continue from the run directory's last state");

  std::string ckpt, vocab, split = "test";
  bool greedy = false, oracle = false;
  auto* ev = app.add_subcommand("evaluate", "beam-search a split and score it");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--vocab", vocab)->required();
  ev->add_option("--split", split);
  ev->add_flag("--greedy", greedy, "greedy decoding instead of beam search");
  ev->add_flag("--oracle", oracle, "score the references against themselves");

  std::string sample_id;
  std::size_t index = 0;
  auto* ge = app.add_subcommand("generate", "print the report generated for one sample");
  add_common(ge, generate_c);
  ge->add_option("--checkpoint", ckpt)->required();
  ge->add_option("--vocab", vocab)->required();
  ge->add_option("--split", split);
  ge->add_option("--id", sample_id, "sample id (default: --index)");
  ge->add_option("--index", index, "sample position within the split");

  std::string modes = "none,manual:de1,auto:word,auto:all", seeds = "1,2,3";
  auto* cmp = app.add_subcommand("compare-prompts", "train and test one run per prompt mode and seed");
  add_common(cmp, cmp_c);
  cmp->add_option("--modes", modes, "comma-separated prompt modes; auto modes accept @<n_p>");
  cmp->add_option("--seeds", seeds, "comma-separated seeds");

  GradcheckOptions gopts;
  bool no_e2e = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--trials", gopts.trials, "random trials per op");
  gc->add_flag("--corrupt", gopts.corrupt, "include an op with a wrong backward (must fail)");
  gc->add_flag("--no-end-to-end", no_e2e, "skip the model-level check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      const ExperimentConfig cfg = load_config(gen_c.config, gen_c.overrides);
      const Dataset d = generate_dataset(cfg.data_seed, cfg.split_sizes, cfg.labels, Grammar(cfg.generator));
      fs::create_directories(cfg.output_dir);
      save_jsonl(d.train, (fs::path(cfg.output_dir) / "train.jsonl").string());
      save_jsonl(d.val, (fs::path(cfg.output_dir) / "val.jsonl").string());
      save_jsonl(d.test, (fs::path(cfg.output_dir) / "test.jsonl").string());
      std::cout << "wrote " << d.train.size() << "/" << d.val.size() << "/" << d.test.size() << " samples to "
                << cfg.output_dir << "\n";
    } else if (tr->parsed()) {
      const ExperimentConfig cfg = load_config(train_c.config, train_c.overrides);
      TrainOptions opts;
      opts.resume = resume;
      opts.log = &std::cout;
      const TrainResult r = train(cfg, opts);
      std::cout << "best val BLEU-4 " << r.best_val_bleu4 << " at epoch " << r.best_epoch
                << (r.stopped_early ? " (early stop)" : "") << "\ncheckpoint " << r.best_checkpoint << "\n";
    } else if (ev->parsed()) {
      const ExperimentConfig cfg = load_config(eval_c.config, eval_c.overrides);
      const LoadedRun run = load_run(ckpt, vocab);
      const Dataset d = load_or_generate(cfg);
      EvalOptions eo;
      eo.greedy = greedy;
      eo.oracle = oracle;
      const EvalResult r = evaluate(run.model, run.vocab, pick_split(d, split), run.mode, registry_for(cfg),
                                    cfg.decode, eo);
      fs::create_directories(cfg.output_dir);
      write_file(fs::path(cfg.output_dir) / ("eval_" + split + "_metrics.csv"), r.metrics_csv());
      write_file(fs::path(cfg.output_dir) / ("eval_" + split + "_per_sample.csv"), r.per_sample_csv());
      std::cout << r.metrics_csv();
    } else if (ge->parsed()) {
      const ExperimentConfig cfg = load_config(generate_c.config, generate_c.overrides);
      const LoadedRun run = load_run(ckpt, vocab);
      const Dataset d = load_or_generate(cfg);
      const auto& samples = pick_split(d, split);
      const Sample* s = nullptr;
      if (!sample_id.empty()) {
        for (const auto& x : samples)
          if (x.id == sample_id) s = &x;
        if (!s) throw ConfigError("no sample with id " + sample_id + " in split " + split);
      } else {
        if (index >= samples.size()) throw ConfigError("index out of range for split " + split);
        s = &samples[index];
      }
      const auto ids = generate_report(run.model, extract_visual_tokens(s->grid),
                                       make_prefix(*s, run.vocab, run.mode, registry_for(cfg)), cfg.decode);
      std::cout << decode_ids_text(ids, run.vocab) << "\n";
    } else if (cmp->parsed()) {
      const ExperimentConfig cfg = load_config(cmp_c.config, cmp_c.overrides);
      const auto mode_list = split_list<std::string>(modes, [](const std::string& s) { return s; });
      const auto seed_list = split_list<std::uint64_t>(
          seeds, [](const std::string& s) { return static_cast<std::uint64_t>(std::stoull(s)); });
      const Comparison c = compare_prompts(cfg, mode_list, seed_list, &std::cerr);
      std::cout << c.table();
    } else if (gc->parsed()) {
      gopts.end_to_end = !no_e2e;
      const GradcheckReport r = run_gradcheck(gopts);
      std::cout << r.text();
      return r.passed() ? kExitOk : kExitError;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
