#include "qttt/query_update.hpp"

#include <cmath>
#include <stdexcept>

namespace qttt {

std::vector<double> query_gradient_closed_form(const AttentionBlockState& state) {
  const std::size_t dk = state.head_dim();
  const auto& a = state.weights();
  std::vector<double> g(dk, 0.0);
  for (std::size_t j = 0; j < state.length(); ++j) {
    auto k = state.keys().row(j);
    for (std::size_t c = 0; c < dk; ++c) g[c] += a[j] * k[c];
  }
  auto ks = state.keys().row(state.needle());
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t c = 0; c < dk; ++c) g[c] = (g[c] - ks[c]) * inv;
  return g;
}

AttentionBlockState query_descent_step(const AttentionBlockState& state, double eta) {
  if (!(eta >= 0.0)) throw std::invalid_argument("query_descent_step: eta must be >= 0");
  const auto g = query_gradient_closed_form(state);
  std::vector<double> q = state.query();
  for (std::size_t c = 0; c < q.size(); ++c) q[c] -= eta * g[c];
  return state.with_query(std::move(q));
}

MarginGain margin_gain_check(const AttentionBlockState& state, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("margin_gain_check: eta must be > 0");
  const auto g = query_gradient_closed_form(state);
  MarginGain r;
  for (double v : g) r.grad_norm_sq += v * v;
  if (r.grad_norm_sq == 0.0) throw std::domain_error("margin_gain_check: zero gradient");
  r.predicted = eta * r.grad_norm_sq;

  // log a*(q') - log a*(q) = -log Σ_j a_j exp(Δz_j - Δz*), with
  // Δz_j - Δz* = -eta <g, k_j - k*> / sqrt(d_k) formed directly.
  const double inv = 1.0 / std::sqrt(static_cast<double>(state.head_dim()));
  const auto& a = state.weights();
  auto ks = state.keys().row(state.needle());
  double acc = 0.0;
  for (std::size_t j = 0; j < state.length(); ++j) {
    if (j == state.needle()) continue;
    auto k = state.keys().row(j);
    double proj = 0.0;
    for (std::size_t c = 0; c < g.size(); ++c) proj += g[c] * (k[c] - ks[c]);
    acc += a[j] * std::expm1(-eta * proj * inv);
  }
  r.actual = -std::log1p(acc);

  const auto next = query_descent_step(state, eta);
  if (state.length() >= 2) r.gamma_gain = margin(next, 0.5).gamma - margin(state, 0.5).gamma;
  return r;
}

}  // namespace qttt
