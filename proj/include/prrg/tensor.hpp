#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prrg {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Copies share storage (handle semantics). Values are immutable once an op
/// has produced them; parameters are the exception and are updated in place
/// by the optimizer through mutable_data().
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy with fresh storage and no gradient; requires_grad preserved.
  Tensor clone() const;
  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Append-only record of differentiable ops executed on this thread.
/// Inputs of every node are recorded before the node itself, so a reverse
/// sweep is a valid topological order.
class Tape {
 public:
  struct Node {
    const char* op;
    std::shared_ptr<detail::TensorImpl> out;
    std::function<void(const detail::TensorImpl& out)> backward;
  };

  static Tape& active();

  void record(const char* op, const Tensor& out,
              std::function<void(const detail::TensorImpl&)> backward);
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  void clear() { nodes_.clear(); }

  /// Reverse sweep from a scalar. Leaf gradients accumulate across calls;
  /// interior gradients are reset at the start of every sweep.
  void backward(const Tensor& loss);

 private:
  std::vector<Node> nodes_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

void backward(const Tensor& loss);

/// Counter-based stream for dropout masks: mask bits are a pure function of
/// (seed, stream, element index), so identical calls replay identically.
class DropoutRng {
 public:
  explicit DropoutRng(std::uint64_t seed = 0) : seed_(seed) {}
  std::uint64_t next_stream() { return counter_++; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);
/// Uniform double in [0, 1) keyed by (seed, stream, index).
double keyed_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;

  explicit BatchNormState(std::size_t d = 0)
      : running_mean(d, 0.0), running_var(d, 1.0) {}
};

enum class Mode { Train, Eval };

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// x[m×n] + b[n], broadcasting b over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
Tensor relu(const Tensor& x);
/// Elementwise map with caller-supplied derivative.
Tensor map_elementwise(const Tensor& x, std::function<double(double)> f,
                       std::function<double(double)> df, const char* name = "map");

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     BatchNormState& state, Mode mode, double eps = 1e-5);
Tensor dropout(const Tensor& x, double p, Mode mode, DropoutRng& rng);

Tensor embedding_gather(const Tensor& table, std::span<const int> ids);
/// Mean negative log-likelihood over rows where include[t] is true.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     const std::vector<bool>& include);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
std::vector<Tensor> split(const Tensor& x, std::size_t axis,
                          const std::vector<std::size_t>& sizes);

}  // namespace prrg
