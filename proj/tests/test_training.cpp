#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "prrg/train.hpp"

using namespace prrg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("prrg_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_run(const std::string& dir, const std::string& mode = "none") {
  KeyValues kv = {{"model.d", "16"},          {"model.d_t", "16"},         {"model.d_v", "8"},
                  {"model.n_heads", "2"},     {"model.text_layers", "1"},  {"model.vision_layers", "1"},
                  {"model.decoder_layers", "1"}, {"vocab_size", "120"},    {"batch_size", "8"},
                  {"epochs", "3"},            {"n_p", "2"},                {"data.train_size", "33"},
                  {"data.val_size", "6"},     {"data.test_size", "6"},
                  {"decode.max_new_tokens", "20"}, {"prompt_mode", mode},  {"output_dir", dir}};
  ExperimentConfig c = ExperimentConfig::from_key_values(kv);
  c.validate();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PRRG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("adamw hand fixtures") {
  OptimConfig oc;
  oc.weight_decay = 0.0;
  AdamW opt(oc);
  std::vector<double> w{1.0}, g{1.0};
  opt.begin_step();
  opt.update("w", w, g, 0.1, 1.0);
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-14));
  CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-7));

  oc.weight_decay = 0.1;
  AdamW decay(oc);
  std::vector<double> w2{1.0}, zero{0.0};
  decay.begin_step();
  decay.update("w", w2, zero, 0.1, 1.0);
  CHECK(w2[0] == doctest::Approx(0.99).epsilon(1e-14));
}

TEST_CASE("adamw step: clipping, frozen and missing gradients, NaN abort") {
  OptimConfig oc;
  oc.weight_decay = 0.0;
  oc.lr_head = 0.1;
  std::vector<NamedParam> ps = {{"a", Tensor::full({2}, 1.0, true), ParamGroup::Head, false},
                                {"frozen", Tensor::full({2}, 1.0, false), ParamGroup::Head, true},
                                {"nograd", Tensor::full({1}, 1.0, true), ParamGroup::Head, false}};
  ps[0].tensor.mutable_grad()[0] = 3.0;
  ps[0].tensor.mutable_grad()[1] = 4.0;
  AdamW opt(oc);
  CHECK(opt.step(ps) == doctest::Approx(5.0));
  CHECK(ps[0].tensor.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(ps[1].tensor.data()[0] == 1.0);
  CHECK(ps[2].tensor.data()[0] == 1.0);
  CHECK(opt.moments().count("frozen") == 0);

  ps[0].tensor.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(opt.step(ps), doctest::Contains("a"), NumericalError);
}

TEST_CASE("learning rates per group") {
  const OptimConfig oc;
  CHECK(oc.lr(ParamGroup::Visual) == 5e-5);
  CHECK(oc.lr(ParamGroup::Decoder) == 2.5e-4);
  CHECK(oc.lr(ParamGroup::Head) == 5e-4);
}

TEST_CASE("config parsing") {
  const KeyValues kv = parse_key_values("# c\nepochs = 4\n\nprompt_mode=manual:de1  # tail\n");
  CHECK(kv.at("epochs") == "4");
  const ExperimentConfig c = ExperimentConfig::from_key_values(kv);
  CHECK(c.epochs == 4);
  CHECK(c.prompt.kind == PromptKind::Manual);
  CHECK(c.prompt.manual_label == "de1");
  CHECK(ExperimentConfig::from_key_values(c.to_key_values()).to_key_values() == c.to_key_values());
  CHECK(ExperimentConfig::profile_defaults("paper").batch_size == 64);
  CHECK(ExperimentConfig::profile_defaults("desk").batch_size == 16);

  CHECK_THROWS_AS(parse_key_values("no equals sign"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_key_values({{"bogus", "1"}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_key_values({{"epochs", "many"}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_key_values({{"profile", "huge"}}), ConfigError);
  CHECK_THROWS_AS(PromptMode::parse("auto:half"), ConfigError);
  ExperimentConfig bad = c;
  bad.decode.beam_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.prompt = PromptMode::parse("manual:zzz");
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  KeyValues o = kv;
  apply_overrides(o, {"epochs=9"});
  CHECK(o.at("epochs") == "9");
  CHECK_THROWS_AS(apply_overrides(o, {"epochs"}), ConfigError);
}

TEST_CASE("checkpoint roundtrip is bit exact") {
  ModelConfig mc;
  mc.d = mc.d_t = 16;
  mc.d_v = 8;
  mc.n_heads = 2;
  mc.vocab_size = 50;
  mc.auto_prompt_length = 3;
  PromptRrgModel m(mc, 77);
  m.vision_bn_state().running_mean[0] = 0.123456789;
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  save_model(m, (dir / "m.ckpt").string(), {{"note", "x"}});
  const Checkpoint ck = read_checkpoint((dir / "m.ckpt").string());
  CHECK(ck.meta.at("note") == "x");
  const PromptRrgModel r = restore_model(ck);
  CHECK(r.config() == m.config());
  REQUIRE(r.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto a = m.parameters()[i].tensor.data(), b = r.parameters()[i].tensor.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    CHECK(m.parameters()[i].tensor.requires_grad() == r.parameters()[i].tensor.requires_grad());
  }
  CHECK(r.vision_bn_state().running_mean == m.vision_bn_state().running_mean);

  std::ofstream(dir / "bad.ckpt") << "PRRG-CHECKPOINT 9\n";
  CHECK_THROWS_AS(read_checkpoint((dir / "bad.ckpt").string()), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("make_example builds prompt, SEP and report") {
  const Dataset d = generate_dataset(3, {5, 1, 1});
  const PromptRegistry& reg = registry();
  const Vocabulary v = build_vocabulary(d.train, reg, 150);
  const Sample& s = d.train[0];
  const Example none = make_example(s, v, PromptMode::parse("none"), reg, 100);
  const Example man = make_example(s, v, PromptMode::parse("manual:de1"), reg, 100);
  CHECK(none.text.count(Role::Prompt) == 0);
  CHECK(none.text.ids.front() == special::kBos);
  const std::size_t np = man.text.count(Role::Prompt);
  CHECK(np > 0);
  CHECK(man.text.ids[np] == special::kSep);
  CHECK(std::equal(none.text.ids.begin(), none.text.ids.end(), man.text.ids.begin() + np + 1));
  CHECK(decode(std::span<const TokenId>(man.text.ids.data(), np), v) ==
        normalize_report(instantiate_text(reg.at("de1"), s.labels)));
  CHECK(none.visual_tokens.shape() == Shape{49, 16});
}

TEST_CASE("training is deterministic and resumes exactly") {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  const Dataset data = generate_dataset(5, {33, 6, 6});
  TrainOptions opts;
  opts.data = &data;
  const TrainResult full = train(tiny_run(a.string(), "auto:word"), opts);
  REQUIRE(full.epochs.size() == 3);
  CHECK(fs::exists(a / "best.ckpt"));
  CHECK(fs::exists(a / "vocab.txt"));
  CHECK(fs::exists(a / "config.cfg"));
  CHECK(full.epochs[2].train_loss < full.epochs[0].train_loss);

  TrainOptions part = opts;
  part.stop_after_epochs = 1;
  train(tiny_run(b.string(), "auto:word"), part);
  TrainOptions rest = opts;
  rest.resume = true;
  const TrainResult resumed = train(tiny_run(b.string(), "auto:word"), rest);
  CHECK(slurp(a / "last.ckpt") == slurp(b / "last.ckpt"));
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  REQUIRE(resumed.epochs.size() == 3);
  CHECK(resumed.epochs[2].val_loss == full.epochs[2].val_loss);

  // metrics.jsonl: one object per epoch
  std::istringstream lines(slurp(a / "metrics.jsonl"));
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) CHECK(line.find("\"val_bleu4\"") != std::string::npos);
  CHECK(n == 3);

  // reopen, evaluate
  const LoadedRun run = load_run((a / "best.ckpt").string(), (a / "vocab.txt").string());
  CHECK(run.mode.kind == PromptKind::AutoWord);
  const auto reg = registry();
  DecodeConfig dc;
  dc.max_new_tokens = 20;
  const EvalResult oracle = evaluate(run.model, run.vocab, data.test, run.mode, reg, dc, {false, true});
  CHECK(oracle.report.bleu[0] == 100.0);
  dc.beam_size = 1;
  const EvalResult beam1 = evaluate(run.model, run.vocab, data.test, run.mode, reg, dc);
  const EvalResult greedy = evaluate(run.model, run.vocab, data.test, run.mode, reg, dc, {true, false});
  for (std::size_t i = 0; i < beam1.samples.size(); ++i) CHECK(beam1.samples[i].candidate == greedy.samples[i].candidate);
  CHECK(beam1.per_sample_csv().rfind("id,bleu4,meteor\n", 0) == 0);
  CHECK(beam1.metrics_csv().rfind("metric,value_raw,value_presented\n", 0) == 0);

  // a vocabulary from another run is rejected
  Vocabulary other = build_vocabulary(generate_dataset(9, {20, 1, 1}).train, reg, 110);
  other.save((b / "other_vocab.txt").string());
  CHECK_THROWS_AS(load_run((a / "best.ckpt").string(), (b / "other_vocab.txt").string()), CheckpointError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("cli exit codes") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  CHECK(run_cli("--bogus") == 2);
  CHECK(run_cli("train --set bogus=1") == 2);
  CHECK(run_cli("train --config " + (dir / "absent.cfg").string()) == 2);
  CHECK(run_cli("train --set epochs=0") == 2);
  CHECK(run_cli("evaluate --checkpoint " + (dir / "none.ckpt").string() + " --vocab " + (dir / "v.txt").string()) == 1);
  const std::string out = "--set output_dir=" + dir.string() + " --set data.train_size=8 --set data.val_size=2 --set data.test_size=2";
  CHECK(run_cli("gen-data " + out) == 0);
  CHECK(fs::exists(dir / "train.jsonl"));
  CHECK(fs::exists(dir / "test.jsonl"));
  CHECK(run_cli("gradcheck --trials 2 --no-end-to-end") == 0);
  CHECK(run_cli("gradcheck --trials 2 --no-end-to-end --corrupt") == 1);
  fs::remove_all(dir);
}
