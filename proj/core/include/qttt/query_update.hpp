#pragma once

// Closed-form single-head query update: the gradient of -log a* with respect
// to the query, one descent step along it, and the first-order margin gain.

#include <vector>

#include "qttt/attention.hpp"

namespace qttt {

/// (mu - k*) / sqrt(d_k), mu = Σ_j a_j k_j. Gradient of -log a* w.r.t. q.
std::vector<double> query_gradient_closed_form(const AttentionBlockState& state);

/// State with q' = q - eta * grad; eta >= 0.
AttentionBlockState query_descent_step(const AttentionBlockState& state, double eta);

struct MarginGain {
  double predicted = 0.0;     // eta * ||grad||^2
  double actual = 0.0;        // log a*(q') - log a*(q)
  double grad_norm_sq = 0.0;
  double gamma_gain = 0.0;    // gamma(q') - gamma(q), for reference
};

/// Throws std::domain_error when the gradient is exactly zero. `actual` is
/// evaluated from logit differences via log1p/expm1, so it stays accurate
/// when the gain is far below the magnitude of the logits.
MarginGain margin_gain_check(const AttentionBlockState& state, double eta);

}  // namespace qttt
