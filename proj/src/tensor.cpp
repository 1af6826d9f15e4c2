#include "prrg/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace prrg {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) { impl_->shape = {0}; }

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor({1}, {v}, requires_grad); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_string(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_string(shape()));
  return impl_->shape[1];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return impl_->data.at(r * cols() + c); }

void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }

std::span<double> Tensor::mutable_grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

// ---- tape -------------------------------------------------------------------

namespace {
thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;
}  // namespace

Tape& Tape::active() { return g_tape; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void Tape::record(const char* op, const Tensor& out,
                  std::function<void(const TensorImpl&)> backward) {
  nodes_.push_back(Node{op, out.impl(), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward() requires a scalar loss, got " + shape_string(loss.shape()));
  for (auto& n : nodes_) n.out->grad.clear();
  auto& l = *loss.impl();
  if (!l.requires_grad) return;
  l.ensure_grad();
  l.grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->backward(*it->out);
  }
}

void backward(const Tensor& loss) { Tape::active().backward(loss); }

// ---- rng --------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double keyed_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(stream ^ splitmix64(index)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// ---- helpers ----------------------------------------------------------------

namespace {

bool tracks(std::initializer_list<const Tensor*> ins) {
  if (!g_grad_enabled) return false;
  return std::any_of(ins.begin(), ins.end(), [](const Tensor* t) { return t->requires_grad(); });
}

bool tracks(const std::vector<Tensor>& ins) {
  if (!g_grad_enabled) return false;
  return std::any_of(ins.begin(), ins.end(), [](const Tensor& t) { return t.requires_grad(); });
}

Tensor make_out(Shape shape, std::vector<double> data, bool rg) {
  Tensor t(std::move(shape), std::move(data), rg);
  t.impl()->is_leaf = false;
  return t;
}

// Accumulate into an input's gradient if it participates.
template <typename F>
void accum(const ImplPtr& in, F&& f) {
  if (!in->requires_grad) return;
  in->ensure_grad();
  f(in->grad);
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2)
    throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() = CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
  const bool rg = tracks({&a, &b});
  Tensor c = make_out({m, n}, std::move(out), rg);
  if (rg) {
    Tape::active().record("matmul", c, [ai = a.impl(), bi = b.impl(), m, k, n](const TensorImpl& o) {
      CMapMat dc(o.grad.data(), m, n);
      accum(ai, [&](std::vector<double>& g) {
        MapMat(g.data(), m, k).noalias() += dc * CMapMat(bi->data.data(), k, n).transpose();
      });
      accum(bi, [&](std::vector<double>& g) {
        MapMat(g.data(), k, n).noalias() += CMapMat(ai->data.data(), m, k).transpose() * dc;
      });
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto d = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = d[i * n + j];
  const bool rg = tracks({&a});
  Tensor t = make_out({n, m}, std::move(out), rg);
  if (rg) {
    Tape::active().record("transpose", t, [ai = a.impl(), m, n](const TensorImpl& o) {
      accum(ai, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
      });
    });
  }
  return t;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  const bool rg = tracks({&a});
  Tensor t = make_out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), rg);
  if (rg) {
    Tape::active().record("reshape", t, [ai = a.impl()](const TensorImpl& o) {
      accum(ai, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
    });
  }
  return t;
}

// ---- elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const bool rg = tracks({&a, &b});
  Tensor t = make_out(a.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("add", t, [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
      for (const auto& in : {ai, bi})
        accum(in, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        });
    });
  }
  return t;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  const bool rg = tracks({&a, &b});
  Tensor t = make_out(a.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("sub", t, [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
      accum(ai, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
      accum(bi, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
      });
    });
  }
  return t;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  const bool rg = tracks({&a, &b});
  Tensor t = make_out(a.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("mul", t, [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
      accum(ai, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
      });
      accum(bi, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
      });
    });
  }
  return t;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  const bool rg = tracks({&a});
  Tensor t = make_out(a.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("scale", t, [ai = a.impl(), s](const TensorImpl& o) {
      accum(ai, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
      });
    });
  }
  return t;
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  require_matrix(x, "add_row_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (b.numel() != n)
    throw DimensionError("add_row_bias: bias " + shape_string(b.shape()) + " does not fit " +
                         shape_string(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bd[j];
  const bool rg = tracks({&x, &b});
  Tensor t = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("add_row_bias", t, [xi = x.impl(), bi = b.impl(), m, n](const TensorImpl& o) {
      accum(xi, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
      accum(bi, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
      });
    });
  }
  return t;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  const bool rg = tracks({&x});
  Tensor t = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("relu", t, [xi = x.impl()](const TensorImpl& o) {
      accum(xi, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xi->data[i] > 0.0) g[i] += o.grad[i];
      });
    });
  }
  return t;
}

Tensor map_elementwise(const Tensor& x, std::function<double(double)> f,
                       std::function<double(double)> df, const char* name) {
  std::vector<double> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
  const bool rg = tracks({&x});
  Tensor t = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record(name, t, [xi = x.impl(), df = std::move(df)](const TensorImpl& o) {
      accum(xi, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(xi->data[i]);
      });
    });
  }
  return t;
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool rg = tracks({&x});
  Tensor t = make_out({1}, {s}, rg);
  if (rg) {
    Tape::active().record("sum", t, [xi = x.impl()](const TensorImpl& o) {
      accum(xi, [&](std::vector<double>& g) {
        for (auto& v : g) v += o.grad[0];
      });
    });
  }
  return t;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- normalisation / probability -------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto [outer, n, inner] = split_axis(x.shape(), axis);
  if (n == 0) throw DimensionError("softmax over empty axis of " + shape_string(x.shape()));
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = d[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, d[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(d[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  const bool rg = tracks({&x});
  Tensor t = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("softmax", t, [xi = x.impl(), outer, n, inner](const TensorImpl& o) {
      accum(xi, [&](std::vector<double>& g) {
        for (std::size_t a = 0; a < outer; ++a) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = a * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * o.data[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t k = base + j * inner;
              g[k] += o.data[k] * (o.grad[k] - dot);
            }
          }
        }
      });
    });
  }
  return t;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm over empty axis");
  const std::size_t d = x.shape().back();
  const std::size_t m = x.numel() / d;
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: affine params " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match width " + std::to_string(d));
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv_std[i];
      xhat[i * d + j] = h;
      out[i * d + j] = h * gd[j] + bd[j];
    }
  }
  const bool rg = tracks({&x, &gamma, &beta});
  Tensor t = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("layer_norm", t,
                          [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
                           inv_std = std::move(inv_std), m, d](const TensorImpl& o) {
                            accum(gi, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j] * xhat[i * d + j];
                            });
                            accum(bi, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j];
                            });
                            accum(xi, [&](std::vector<double>& g) {
                              const double dd = static_cast<double>(d);
                              for (std::size_t i = 0; i < m; ++i) {
                                double s1 = 0.0, s2 = 0.0;
                                for (std::size_t j = 0; j < d; ++j) {
                                  const double dh = o.grad[i * d + j] * gi->data[j];
                                  s1 += dh;
                                  s2 += dh * xhat[i * d + j];
                                }
                                for (std::size_t j = 0; j < d; ++j) {
                                  const double dh = o.grad[i * d + j] * gi->data[j];
                                  g[i * d + j] += inv_std[i] / dd * (dd * dh - s1 - xhat[i * d + j] * s2);
                                }
                              }
                            });
                          });
  }
  return t;
}

Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                     Mode mode, double eps) {
  require_matrix(x, "batch_norm_1d");
  const std::size_t b = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d || state.running_mean.size() != d)
    throw DimensionError("batch_norm_1d: parameters do not match feature width " + std::to_string(d));
  if (mode == Mode::Train && b < 2)
    throw DimensionError("batch_norm_1d: training mode needs at least 2 rows, got " + std::to_string(b));
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  std::vector<double> mu(d, 0.0), inv_std(d);
  if (mode == Mode::Train) {
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) mu[j] += xd[i * d + j];
    for (auto& v : mu) v /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) var[j] += (xd[i * d + j] - mu[j]) * (xd[i * d + j] - mu[j]);
    for (std::size_t j = 0; j < d; ++j) {
      const double biased = var[j] / static_cast<double>(b);
      inv_std[j] = 1.0 / std::sqrt(biased + eps);
      const double unbiased = var[j] / static_cast<double>(b - 1);
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    }
  } else {
    mu = state.running_mean;
    for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + eps);
  }
  std::vector<double> out(b * d), xhat(b * d);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xd[i * d + j] - mu[j]) * inv_std[j];
      xhat[i * d + j] = h;
      out[i * d + j] = h * gd[j] + bd[j];
    }
  const bool rg = tracks({&x, &gamma, &beta});
  Tensor t = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    const bool train = mode == Mode::Train;
    Tape::active().record("batch_norm_1d", t,
                          [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
                           inv_std = std::move(inv_std), b, d, train](const TensorImpl& o) {
                            accum(gi, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < b; ++i)
                                for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j] * xhat[i * d + j];
                            });
                            accum(bi, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < b; ++i)
                                for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j];
                            });
                            accum(xi, [&](std::vector<double>& g) {
                              if (!train) {
                                for (std::size_t i = 0; i < b; ++i)
                                  for (std::size_t j = 0; j < d; ++j)
                                    g[i * d + j] += o.grad[i * d + j] * gi->data[j] * inv_std[j];
                                return;
                              }
                              const double bb = static_cast<double>(b);
                              for (std::size_t j = 0; j < d; ++j) {
                                double s1 = 0.0, s2 = 0.0;
                                for (std::size_t i = 0; i < b; ++i) {
                                  s1 += o.grad[i * d + j];
                                  s2 += o.grad[i * d + j] * xhat[i * d + j];
                                }
                                const double k = gi->data[j] * inv_std[j] / bb;
                                for (std::size_t i = 0; i < b; ++i)
                                  g[i * d + j] += k * (bb * o.grad[i * d + j] - s1 - xhat[i * d + j] * s2);
                              }
                            });
                          });
  }
  return t;
}

Tensor dropout(const Tensor& x, double p, Mode mode, DropoutRng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout probability must be in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  const std::uint64_t stream = rng.next_stream();
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  std::vector<double> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = keyed_uniform(rng.seed(), stream, i) < p ? 0.0 : keep_scale;
    out[i] = d[i] * mask[i];
  }
  const bool rg = tracks({&x});
  Tensor t = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Tape::active().record("dropout", t, [xi = x.impl(), mask = std::move(mask)](const TensorImpl& o) {
      accum(xi, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
      });
    });
  }
  return t;
}

// ---- indexing ---------------------------------------------------------------

Tensor embedding_gather(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding_gather");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw IndexError("embedding_gather: id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(v));
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const bool rg = tracks({&table});
  Tensor t = make_out({ids.size(), d}, std::move(out), rg);
  if (rg) {
    Tape::active().record("embedding_gather", t,
                          [ti = table.impl(), idv = std::vector<int>(ids.begin(), ids.end()), d](const TensorImpl& o) {
                            accum(ti, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < idv.size(); ++i)
                                for (std::size_t j = 0; j < d; ++j)
                                  g[static_cast<std::size_t>(idv[i]) * d + j] += o.grad[i * d + j];
                            });
                          });
  }
  return t;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, const std::vector<bool>& include) {
  require_matrix(logits, "cross_entropy");
  const std::size_t t_len = logits.rows(), v = logits.cols();
  if (targets.size() != t_len || include.size() != t_len)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(include.size()) + " mask entries for " + shape_string(logits.shape()));
  const std::size_t count = static_cast<std::size_t>(std::count(include.begin(), include.end(), true));
  if (count == 0) throw std::invalid_argument("cross_entropy: every position is masked; loss is empty");
  const auto ld = logits.data();
  std::vector<double> probs(t_len * v, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!include[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v)
      throw IndexError("cross_entropy: target " + std::to_string(targets[t]) + " outside vocabulary");
    const double* row = ld.data() + t * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[t * v + j] = std::exp(row[j] - mx);
      z += probs[t * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[t * v + j] /= z;
    total -= row[targets[t]] - mx - std::log(z);
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  const bool rg = tracks({&logits});
  Tensor out = make_out({1}, {total * inv_count}, rg);
  if (rg) {
    Tape::active().record("cross_entropy", out,
                          [li = logits.impl(), probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()),
                           include, t_len, v, inv_count](const TensorImpl& o) {
                            accum(li, [&](std::vector<double>& g) {
                              const double s = o.grad[0] * inv_count;
                              for (std::size_t t = 0; t < t_len; ++t) {
                                if (!include[t]) continue;
                                for (std::size_t j = 0; j < v; ++j) g[t * v + j] += s * probs[t * v + j];
                                g[t * v + static_cast<std::size_t>(tg[t])] -= s;
                              }
                            });
                          });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw DimensionError("concat: shapes " + shape_string(ref) + " and " + shape_string(p.shape()) +
                             " disagree off axis " + std::to_string(axis));
    total += p.shape().at(axis);
  }
  Shape shape = ref;
  shape[axis] = total;
  const auto [outer, n_total, inner] = split_axis(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.shape()[axis];
    const auto d = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.data() + o * n * inner, n * inner, out.data() + (o * n_total + off) * inner);
    offsets.push_back(off);
    off += n;
  }
  const bool rg = tracks(parts);
  Tensor t = make_out(std::move(shape), std::move(out), rg);
  if (rg) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape::active().record("concat", t,
                          [impls = std::move(impls), offsets = std::move(offsets), axis, outer = outer,
                           n_total = n_total, inner = inner](const TensorImpl& o) {
                            for (std::size_t k = 0; k < impls.size(); ++k) {
                              const std::size_t n = impls[k]->shape[axis];
                              accum(impls[k], [&](std::vector<double>& g) {
                                for (std::size_t a = 0; a < outer; ++a)
                                  for (std::size_t i = 0; i < n * inner; ++i)
                                    g[a * n * inner + i] += o.grad[(a * n_total + offsets[k]) * inner + i];
                              });
                            }
                          });
  }
  return t;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto [outer, n, inner] = split_axis(x.shape(), axis);
  if (start + len > n)
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for " + shape_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<double> out(shape_numel(shape));
  const auto d = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(d.data() + (o * n + start) * inner, len * inner, out.data() + o * len * inner);
  const bool rg = tracks({&x});
  Tensor t = make_out(std::move(shape), std::move(out), rg);
  if (rg) {
    Tape::active().record("slice", t,
                          [xi = x.impl(), outer = outer, n = n, inner = inner, start, len](const TensorImpl& o) {
                            accum(xi, [&](std::vector<double>& g) {
                              for (std::size_t a = 0; a < outer; ++a)
                                for (std::size_t i = 0; i < len * inner; ++i)
                                  g[(a * n + start) * inner + i] += o.grad[a * len * inner + i];
                            });
                          });
  }
  return t;
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (axis >= x.rank() || total != x.shape()[axis])
    throw DimensionError("split sizes do not cover axis " + std::to_string(axis) + " of " +
                         shape_string(x.shape()));
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (std::size_t s : sizes) {
    out.push_back(slice(x, axis, off, s));
    off += s;
  }
  return out;
}

}  // namespace prrg
