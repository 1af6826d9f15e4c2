#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "prrg/config.hpp"
#include "prrg/model.hpp"

namespace prrg {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamMoments {
  std::vector<double> m, v;
};

/// Decoupled-weight-decay Adam over the trainable parameters of a model.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

  /// One update. Parameters without a gradient are treated as having a zero
  /// gradient; frozen parameters are skipped. Throws NumericalError naming
  /// the first parameter with a non-finite gradient. Returns the global
  /// gradient norm before clipping.
  double step(std::vector<NamedParam>& params);

  /// Raw single-tensor update used by step() and exposed for tests.
  void update(const std::string& name, std::span<double> w, std::span<const double> g, double lr, double grad_scale);

  std::size_t steps() const { return t_; }
  const OptimConfig& config() const { return cfg_; }
  const std::map<std::string, AdamMoments>& moments() const { return moments_; }

  void set_state(std::size_t t, std::map<std::string, AdamMoments> moments) {
    t_ = t;
    moments_ = std::move(moments);
  }
  /// Advances the bias-correction counter; step() does this itself.
  void begin_step() { ++t_; }

 private:
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, AdamMoments> moments_;
};

void zero_grads(std::vector<NamedParam>& params);

}  // namespace prrg
