#include "qttt/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace qttt {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adamw"; }

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adamw" || name == "adam") return OptimizerKind::AdamW;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(OptimizerConfig config, std::span<Matrix* const> params)
    : cfg_(config), params_(params.begin(), params.end()) {
  if (!(cfg_.lr > 0.0)) throw std::invalid_argument("Optimizer: lr must be > 0");
  if (cfg_.kind == OptimizerKind::AdamW) {
    for (const Matrix* p : params_) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
}

double global_norm(std::span<const Matrix> grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

double Optimizer::step(std::span<const Matrix> grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("Optimizer::step: grad count");
  const double norm = global_norm(grads);
  const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i]->values();
    auto g = grads[i].values();
    if (g.size() != p.size()) throw std::invalid_argument("Optimizer::step: grad shape");
    if (cfg_.kind == OptimizerKind::Sgd) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] -= cfg_.lr * (clip * g[j] + cfg_.weight_decay * p[j]);
      }
      continue;
    }
    auto m = m_[i].values();
    auto v = v_[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = clip * g[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      p[j] -= cfg_.lr * (update + cfg_.weight_decay * p[j]);
    }
  }
  return norm;
}

}  // namespace qttt
