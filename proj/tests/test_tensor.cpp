#include <doctest.h>

#include <cmath>
#include <random>

#include "prrg/gradcheck.hpp"
#include "prrg/tensor.hpp"

using namespace prrg;

namespace {

// Independent finite-difference oracle, kept separate from the library's
// gradcheck so the two can catch each other.
std::vector<double> central_difference(const std::function<double()>& f, Tensor& x, double h = 1e-5) {
  std::vector<double> out(x.numel());
  auto d = x.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double o = d[i];
    d[i] = o + h;
    const double up = f();
    d[i] = o - h;
    const double down = f();
    d[i] = o;
    out[i] = (up - down) / (2 * h);
  }
  return out;
}

void require_values(const Tensor& t, std::vector<double> expected, double tol = 1e-12) {
  REQUIRE(t.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(t.data()[i] == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul: identity and hand dot products") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor m({2, 2}, {1, 2, 3, 4});
  require_values(matmul(eye, m), {1, 2, 3, 4});
  require_values(matmul(m, Tensor({2, 1}, {5, 6})), {1 * 5 + 2 * 6, 3 * 5 + 4 * 6});
}

TEST_CASE("matmul: gradient of sum(AB) w.r.t. A is B^T broadcast") {
  Tensor a({2, 2}, {1, 1, 1, 1}, true);
  const Tensor b({2, 1}, {2, 3});
  Tape::active().clear();
  backward(sum(matmul(a, b)));
  require_values(Tensor({2, 2}, std::vector<double>(a.grad().begin(), a.grad().end())), {2, 3, 2, 3});
  auto fd = central_difference(
      [&] {
        NoGradGuard g;
        return sum(matmul(a, b)).item();
      },
      a);
  for (std::size_t i = 0; i < 4; ++i) CHECK(fd[i] == doctest::Approx(a.grad()[i]).epsilon(1e-8));
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected a DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("softmax fixtures") {
  require_values(softmax(Tensor({1, 2}, {0, 0}), 1), {0.5, 0.5});
  require_values(softmax(Tensor({1, 2}, {1000, 1000}), 1), {0.5, 0.5});
  require_values(softmax(Tensor({1, 2}, {0, std::log(3.0)}), 1), {0.25, 0.75});
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 0}), 1), DimensionError);
}

TEST_CASE("softmax rows sum to one and ignore constant shifts") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> d(0, 5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(3 * 5), shifted(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = d(gen);
    const double c = d(gen) * 10;
    for (std::size_t i = 0; i < v.size(); ++i) shifted[i] = v[i] + c;
    const Tensor s = softmax(Tensor({3, 5}, v), 1), t = softmax(Tensor({3, 5}, shifted), 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        total += s.at(r, j);
        CHECK(s.at(r, j) >= 0.0);
        CHECK(std::abs(s.at(r, j) - t.at(r, j)) < 1e-12);
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm fixtures") {
  const Tensor one({2}, {1, 1}), zero({2}, {0, 0});
  require_values(layer_norm(Tensor({1, 3}, {5, 5, 5}), Tensor::full({3}, 1.0), Tensor::zeros({3})), {0, 0, 0});
  const Tensor y = layer_norm(Tensor({1, 2}, {0, 2}), one, zero);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-3));
  require_values(layer_norm(Tensor({1, 2}, {3, -8}), zero, Tensor({2}, {7, 7})), {7, 7});
}

TEST_CASE("batch_norm_1d fixtures") {
  const Tensor g({1}, {1.0}), b({1}, {0.0});
  BatchNormState st(1);
  const Tensor y = batch_norm_1d(Tensor({2, 1}, {1, 3}), g, b, st, Mode::Train);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-4));
  // running stats: momentum 0.1 toward mean 2 and unbiased variance 2
  CHECK(st.running_mean[0] == doctest::Approx(0.2));
  CHECK(st.running_var[0] == doctest::Approx(0.9 + 0.1 * 2.0));

  BatchNormState fresh(2);
  const Tensor x({3, 2}, {0.3, -1, 2, 4, 5, 6});
  require_values(batch_norm_1d(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), fresh, Mode::Eval, 0.0),
                 {0.3, -1, 2, 4, 5, 6});

  BatchNormState c(1);
  require_values(batch_norm_1d(Tensor({3, 1}, {4, 4, 4}), g, b, c, Mode::Train), {0, 0, 0});

  BatchNormState one_row(1);
  CHECK_THROWS_AS(batch_norm_1d(Tensor({1, 1}, {4}), g, b, one_row, Mode::Train), DimensionError);
}

TEST_CASE("embedding_gather fixtures") {
  Tensor table({2, 2}, {1, 2, 3, 4}, true);
  const std::vector<int> ids{1, 0, 1};
  require_values(embedding_gather(table, ids), {3, 4, 1, 2, 3, 4});

  Tape::active().clear();
  const std::vector<int> twice{0, 0};
  backward(sum(embedding_gather(table, twice)));
  require_values(Tensor({4}, std::vector<double>(table.grad().begin(), table.grad().end())), {2, 2, 0, 0});
  table.zero_grad();

  const Tensor empty = embedding_gather(table, std::vector<int>{});
  CHECK(empty.shape() == Shape{0, 2});
  CHECK_THROWS_AS(embedding_gather(table, std::vector<int>{2}), IndexError);
}

TEST_CASE("cross_entropy fixtures") {
  const std::vector<int> t0{3};
  CHECK(cross_entropy(Tensor::zeros({1, 4}), t0, {true}).item() == doctest::Approx(std::log(4.0)));
  CHECK(cross_entropy(Tensor({1, 3}, {0, 1e4, 0}), std::vector<int>{1}, {true}).item() == doctest::Approx(0.0));
  CHECK(cross_entropy(Tensor({1, 2}, {0, std::log(3.0)}), std::vector<int>{1}, {true}).item() ==
        doctest::Approx(-std::log(0.75)));
  CHECK_THROWS(cross_entropy(Tensor::zeros({2, 2}), std::vector<int>{0, 1}, {false, false}));
}

TEST_CASE("cross_entropy averages only included rows") {
  const Tensor logits({2, 2}, {0, 0, 0, std::log(3.0)});
  const double l = cross_entropy(logits, std::vector<int>{0, 1}, {false, true}).item();
  CHECK(l == doctest::Approx(-std::log(0.75)));
}

TEST_CASE("backward fixtures") {
  Tensor x({3}, {1, 2, 3}, true);
  Tape::active().clear();
  backward(sum(x));
  require_values(Tensor({3}, std::vector<double>(x.grad().begin(), x.grad().end())), {1, 1, 1});

  Tensor y = Tensor::scalar(3.0, true);
  Tape::active().clear();
  backward(mul(y, y));
  CHECK(y.grad()[0] == doctest::Approx(6.0));

  // repeated calls accumulate
  Tape::active().clear();
  backward(mul(y, y));
  CHECK(y.grad()[0] == doctest::Approx(12.0));
  CHECK_THROWS_AS(backward(x), DimensionError);
}

TEST_CASE("composite MLP gradient matches finite differences") {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> d(0, 1);
  auto rnd = [&](Shape s) {
    std::vector<double> v(shape_numel(s));
    for (auto& e : v) e = d(gen);
    return Tensor(s, v, true);
  };
  Tensor x = rnd({3, 4}), w1 = rnd({4, 5}), b1 = rnd({5}), w2 = rnd({5, 2});
  auto loss = [&] { return mean(mul(matmul(relu(add_row_bias(matmul(x, w1), b1)), w2), matmul(x, Tensor::full({4, 2}, 0.3)))); };
  Tape::active().clear();
  backward(loss());
  for (Tensor* t : {&x, &w1, &b1, &w2}) {
    const auto fd = central_difference(
        [&] {
          NoGradGuard g;
          return loss().item();
        },
        *t);
    CHECK(relative_error(t->grad(), fd) < 1e-4);
    t->zero_grad();
  }
}

TEST_CASE("dropout: eval identity, train zeroes and rescales") {
  DropoutRng rng(9);
  const Tensor x = Tensor::full({4, 4}, 2.0);
  require_values(dropout(x, 0.5, Mode::Eval, rng), std::vector<double>(16, 2.0));
  const Tensor y = dropout(x, 0.25, Mode::Train, rng);
  for (double v : y.data()) CHECK((v == 0.0 || std::abs(v - 2.0 / 0.75) < 1e-12));
}

TEST_CASE("dropout preserves the expectation (3 sigma over 1e5 draws)") {
  const double p = 0.3;
  const std::size_t n = 100000;
  DropoutRng rng(2024);
  const Tensor y = dropout(Tensor::full({n}, 1.0), p, Mode::Train, rng);
  double mean = 0;
  for (double v : y.data()) mean += v;
  mean /= static_cast<double>(n);
  // each draw is 1/(1-p) with probability 1-p, else 0
  const double sd = std::sqrt(p / (1 - p)) / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(mean - 1.0) < 3 * sd);
}

TEST_CASE("dropout masks replay for an identical generator") {
  DropoutRng a(5), b(5);
  const Tensor x = Tensor::full({50}, 1.0);
  const Tensor ya = dropout(x, 0.5, Mode::Train, a), yb = dropout(x, 0.5, Mode::Train, b);
  CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
}

TEST_CASE("concat then split recovers inputs bit-exactly") {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t axis : {0u, 1u}) {
    std::vector<Tensor> parts;
    std::vector<std::size_t> sizes;
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t n = k + 1;
      Shape s = axis == 0 ? Shape{n, 3} : Shape{3, n};
      std::vector<double> v(shape_numel(s));
      for (auto& e : v) e = u(gen);
      parts.emplace_back(s, v);
      sizes.push_back(n);
    }
    const auto back = split(concat(parts, axis), axis, sizes);
    REQUIRE(back.size() == parts.size());
    for (std::size_t k = 0; k < parts.size(); ++k) {
      CHECK(back[k].shape() == parts[k].shape());
      CHECK(std::equal(back[k].data().begin(), back[k].data().end(), parts[k].data().begin()));
    }
  }
}

TEST_CASE("transpose and reshape") {
  const Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
  require_values(transpose(m), {1, 4, 2, 5, 3, 6});
  CHECK(reshape(m, {3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(reshape(m, {4, 2}), DimensionError);
}

TEST_CASE("NoGradGuard records nothing") {
  Tensor x({2}, {1, 2}, true);
  Tape::active().clear();
  {
    NoGradGuard g;
    (void)sum(mul(x, x));
  }
  CHECK(Tape::active().size() == 0);
}
