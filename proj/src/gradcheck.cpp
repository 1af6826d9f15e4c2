#include "prrg/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "prrg/model.hpp"
#include "prrg/prompt.hpp"
#include "prrg/tokenizer.hpp"

namespace prrg {

namespace {

/// Entries bounded away from zero so relu and friends stay off their kinks.
Tensor random_tensor(std::mt19937_64& gen, Shape shape, bool requires_grad = true) {
  std::uniform_real_distribution<double> mag(0.1, 1.5);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = sign(gen) ? mag(gen) : -mag(gen);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

std::size_t dim(std::mt19937_64& gen, std::size_t lo = 1, std::size_t hi = 3) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
}

/// Scalar projection with fixed random weights so every output element
/// contributes a distinct coefficient.
Tensor project(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

struct OpCase {
  const char* name;
  std::function<void(std::mt19937_64&, double&)> trial;  // updates the max error
};

}  // namespace

double relative_error(std::span<const double> a, std::span<const double> n, double floor) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

double max_gradient_error(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double h) {
  Tape::active().clear();
  for (auto& t : inputs) t.zero_grad();
  const Tensor l = loss();
  backward(l);
  Tape::active().clear();
  // Central differences carry roundoff proportional to the magnitude of the
  // computation, so a tensor whose true gradient vanishes (a key bias under
  // softmax, say) is compared against the scale of the whole gradient.
  double total = 0.0;
  for (const auto& t : inputs)
    for (double g : t.grad()) total += g * g;
  const double floor = 1e-6 * std::max({1.0, std::abs(l.item()), std::sqrt(total)});
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    NoGradGuard guard;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss().item();
      data[i] = orig - h;
      const double down = loss().item();
      data[i] = orig;
      numeric[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric, floor));
  }
  for (auto& t : inputs) t.zero_grad();
  return worst;
}

bool GradcheckReport::passed() const {
  for (const auto& e : entries)
    if (!e.passed()) return false;
  return !entries.empty();
}

std::string GradcheckReport::text() const {
  std::string out;
  char buf[256];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-4s %-24s max_rel_err=%.3e threshold=%.0e trials=%zu\n",
                  e.passed() ? "ok" : "FAIL", e.name.c_str(), e.max_rel_error, e.threshold, e.trials);
    out += buf;
  }
  out += passed() ? "gradcheck: PASS\n" : "gradcheck: FAIL\n";
  return out;
}

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
  std::vector<OpCase> cases;
  auto unary = [&](const char* name, std::function<Tensor(const Tensor&)> f) {
    cases.push_back({name, [f](std::mt19937_64& g, double& worst) {
                       const Tensor x = random_tensor(g, {dim(g), dim(g, 2, 4)});
                       const Tensor w = random_tensor(g, f(x).shape(), false);
                       worst = std::max(worst, max_gradient_error([&] { return project(f(x), w); }, {x}));
                     }});
  };
  auto binary = [&](const char* name, std::function<Tensor(const Tensor&, const Tensor&)> f) {
    cases.push_back({name, [f](std::mt19937_64& g, double& worst) {
                       const Shape s{dim(g), dim(g, 2, 4)};
                       const Tensor a = random_tensor(g, s), b = random_tensor(g, s);
                       const Tensor w = random_tensor(g, f(a, b).shape(), false);
                       worst = std::max(worst, max_gradient_error([&] { return project(f(a, b), w); }, {a, b}));
                     }});
  };
  cases.push_back({"matmul", [](std::mt19937_64& g, double& worst) {
                     const std::size_t m = dim(g), k = dim(g, 1, 4), n = dim(g);
                     const Tensor a = random_tensor(g, {m, k}), b = random_tensor(g, {k, n});
                     const Tensor w = random_tensor(g, {m, n}, false);
                     worst = std::max(worst, max_gradient_error([&] { return project(matmul(a, b), w); }, {a, b}));
                   }});
  unary("transpose", [](const Tensor& x) { return transpose(x); });
  unary("reshape", [](const Tensor& x) { return reshape(x, {x.numel()}); });
  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); });
  cases.push_back({"add_row_bias", [](std::mt19937_64& g, double& worst) {
                     const std::size_t m = dim(g), n = dim(g, 2, 4);
                     const Tensor x = random_tensor(g, {m, n}), b = random_tensor(g, {n});
                     const Tensor w = random_tensor(g, {m, n}, false);
                     worst = std::max(worst, max_gradient_error([&] { return project(add_row_bias(x, b), w); }, {x, b}));
                   }});
  unary("relu", [](const Tensor& x) { return relu(x); });
  unary("map_elementwise(tanh)", [](const Tensor& x) {
    return map_elementwise(
        x, [](double v) { return std::tanh(v); }, [](double v) { return 1.0 - std::tanh(v) * std::tanh(v); }, "tanh");
  });
  if (opts.corrupt) {
    unary("corrupted(tanh)", [](const Tensor& x) {
      return map_elementwise(
          x, [](double v) { return std::tanh(v); }, [](double v) { return 1.0 + std::tanh(v); }, "bad_tanh");
    });
  }
  unary("sum", [](const Tensor& x) { return sum(x); });
  unary("mean", [](const Tensor& x) { return mean(x); });
  unary("softmax(axis 1)", [](const Tensor& x) { return softmax(x, 1); });
  unary("softmax(axis 0)", [](const Tensor& x) { return softmax(x, 0); });
  cases.push_back({"layer_norm", [](std::mt19937_64& g, double& worst) {
                     const std::size_t m = dim(g), n = dim(g, 2, 4);
                     const Tensor x = random_tensor(g, {m, n}), ga = random_tensor(g, {n}), be = random_tensor(g, {n});
                     const Tensor w = random_tensor(g, {m, n}, false);
                     worst = std::max(
                         worst, max_gradient_error([&] { return project(layer_norm(x, ga, be), w); }, {x, ga, be}));
                   }});
  cases.push_back({"batch_norm_1d", [](std::mt19937_64& g, double& worst) {
                     const std::size_t m = dim(g, 2, 4), n = dim(g, 1, 2);
                     const Tensor x = random_tensor(g, {m, n}), ga = random_tensor(g, {n}), be = random_tensor(g, {n});
                     const Tensor w = random_tensor(g, {m, n}, false);
                     BatchNormState st(n);
                     worst = std::max(worst, max_gradient_error(
                                                 [&] { return project(batch_norm_1d(x, ga, be, st, Mode::Train), w); },
                                                 {x, ga, be}));
                   }});
  cases.push_back({"dropout", [](std::mt19937_64& g, double& worst) {
                     const Tensor x = random_tensor(g, {dim(g), dim(g, 2, 4)});
                     const Tensor w = random_tensor(g, x.shape(), false);
                     const std::uint64_t seed = g();
                     worst = std::max(worst, max_gradient_error(
                                                 [&] {
                                                   DropoutRng rng(seed);
                                                   return project(dropout(x, 0.3, Mode::Train, rng), w);
                                                 },
                                                 {x}));
                   }});
  cases.push_back({"embedding_gather", [](std::mt19937_64& g, double& worst) {
                     const std::size_t v = dim(g, 2, 4), d = dim(g, 1, 2);
                     const Tensor table = random_tensor(g, {v, d});
                     std::vector<int> ids(dim(g, 1, 4));
                     for (auto& i : ids) i = static_cast<int>(g() % v);
                     const Tensor w = random_tensor(g, {ids.size(), d}, false);
                     worst = std::max(worst,
                                      max_gradient_error([&] { return project(embedding_gather(table, ids), w); }, {table}));
                   }});
  cases.push_back({"cross_entropy", [](std::mt19937_64& g, double& worst) {
                     const std::size_t t = dim(g, 1, 3), v = dim(g, 2, 4);
                     const Tensor logits = random_tensor(g, {t, v});
                     std::vector<int> targets(t);
                     std::vector<bool> include(t, true);
                     for (auto& y : targets) y = static_cast<int>(g() % v);
                     if (t > 1) include[g() % t] = false;
                     worst = std::max(worst,
                                      max_gradient_error([&] { return cross_entropy(logits, targets, include); }, {logits}));
                   }});
  cases.push_back({"concat", [](std::mt19937_64& g, double& worst) {
                     const std::size_t n = dim(g, 1, 3);
                     const Tensor a = random_tensor(g, {dim(g), n}), b = random_tensor(g, {dim(g), n});
                     const Tensor w = random_tensor(g, {a.rows() + b.rows(), n}, false);
                     const Tensor c1 = random_tensor(g, {n, dim(g)}), c2 = random_tensor(g, {n, dim(g)});
                     const Tensor w2 = random_tensor(g, {n, c1.cols() + c2.cols()}, false);
                     worst = std::max(worst, max_gradient_error([&] { return project(concat({a, b}, 0), w); }, {a, b}));
                     worst = std::max(worst,
                                      max_gradient_error([&] { return project(concat({c1, c2}, 1), w2); }, {c1, c2}));
                   }});
  cases.push_back({"slice/split", [](std::mt19937_64& g, double& worst) {
                     const Tensor x = random_tensor(g, {3, 4});
                     const Tensor w = random_tensor(g, {3, 2}, false);
                     const Tensor w2 = random_tensor(g, {1, 4}, false);
                     worst = std::max(worst, max_gradient_error([&] { return project(slice(x, 1, 1, 2), w); }, {x}));
                     worst = std::max(worst, max_gradient_error(
                                                 [&] { return project(split(x, 0, {2, 1})[1], w2); }, {x}));
                   }});
  cases.push_back({"attention (composite)", [](std::mt19937_64& g, double& worst) {
                     const std::size_t rows = dim(g, 2, 3), width = 4;
                     AttentionParams p{random_tensor(g, {width, width}), random_tensor(g, {width}),
                                       random_tensor(g, {width, width}), random_tensor(g, {width}),
                                       random_tensor(g, {width, width}), random_tensor(g, {width}),
                                       random_tensor(g, {width, width}), random_tensor(g, {width})};
                     const Tensor x = random_tensor(g, {rows, width});
                     const Tensor w = random_tensor(g, {rows, width}, false);
                     worst = std::max(worst, max_gradient_error(
                                                 [&] { return project(multi_head_attention(p, x, x, 2, true), w); },
                                                 {x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo}));
                   }});

  GradcheckReport report;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    std::mt19937_64 gen(opts.seed + 1000003ULL * c);
    GradcheckEntry e{cases[c].name, 0.0, opts.op_threshold, opts.trials};
    for (std::size_t t = 0; t < opts.trials; ++t) cases[c].trial(gen, e.max_rel_error);
    report.entries.push_back(e);
  }
  if (opts.end_to_end) report.entries.push_back(end_to_end_gradcheck(opts.end_to_end_threshold, opts.seed));
  return report;
}

GradcheckEntry end_to_end_gradcheck(double threshold, std::uint64_t seed) {
  const Vocabulary vocab = Vocabulary::train({"the heart is normal", "small left effusion", "a picture of edema"}, 40);
  ModelConfig cfg;
  cfg.d_t = 16;
  cfg.d = 16;
  cfg.d_v = 8;
  cfg.grid_channels = 4;
  cfg.n_heads = 2;
  cfg.text_layers = 2;
  cfg.vision_layers = 2;
  cfg.decoder_layers = 2;
  cfg.ffn_mult = 2;
  cfg.vocab_size = vocab.size();
  cfg.max_positions = 32;
  cfg.auto_prompt_length = 2;
  cfg.dropout = 0.0;
  cfg.init_std = 0.3;  // at 0.02 the deepest gradients sink toward finite-difference noise
  cfg.freeze_text_encoder = false;
  PromptRrgModel model(cfg, seed);

  std::mt19937_64 gen(seed);
  std::vector<Example> batch;
  for (const char* report : {"the heart is normal", "small left effusion"})
    batch.push_back(Example{random_tensor(gen, {9, 4}, false), encode(report, vocab)});

  std::vector<Tensor> inputs;
  for (const auto& p : model.parameters()) inputs.push_back(p.tensor);
  auto loss = [&] {
    DropoutRng rng(1);
    return model.batch_loss(batch, PromptKind::AutoWord, Mode::Train, rng);
  };
  GradcheckEntry e{"end-to-end (auto:word)", max_gradient_error(loss, inputs), threshold, 1};

  // Manual-prompt path through the same parameters.
  const TokenSequence prompt = encode_prompt("a picture of edema", vocab);
  std::vector<Example> manual = batch;
  for (auto& ex : manual) ex.text = prepend(prompt, ex.text);
  auto loss_manual = [&] {
    DropoutRng rng(1);
    return model.batch_loss(manual, PromptKind::Manual, Mode::Train, rng);
  };
  e.max_rel_error = std::max(e.max_rel_error, max_gradient_error(loss_manual, inputs));
  e.name = "end-to-end model";
  e.trials = 2;
  return e;
}

}  // namespace prrg
