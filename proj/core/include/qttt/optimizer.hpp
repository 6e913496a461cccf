#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qttt/numeric.hpp"

namespace qttt {

enum class OptimizerKind { Sgd, AdamW };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled
  double grad_clip = 1.0;      // global L2 norm; <= 0 disables
};

/// Owns moment buffers for one fixed list of tensors.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::span<Matrix* const> params);

  /// Clips (if enabled) and applies one update. Returns the pre-clip global norm.
  double step(std::span<const Matrix> grads);

  std::size_t steps_taken() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
};

double global_norm(std::span<const Matrix> grads);

}  // namespace qttt
