#pragma once

// Single-query softmax attention and the retrieval quantities defined on it:
// logit margin, score-dilution bound, logarithmic margin requirement and the
// needle-signal bounds for any token whose output is an attention average.

#include <cstddef>
#include <span>
#include <vector>

#include "qttt/numeric.hpp"

namespace qttt {

struct AttentionOutput {
  std::vector<double> logits;   // z_j = q·k_j / sqrt(d_k)
  std::vector<double> weights;  // softmax(z)
  std::vector<double> output;   // Σ_j weights_j v_j
};

AttentionOutput attention_forward(std::span<const double> query, const Matrix& keys,
                                  const Matrix& values);

/// One query against T keys/values with a designated needle index.
/// Logits and weights are derived at construction and stay consistent with
/// the query; use with_query() to move the query.
class AttentionBlockState {
 public:
  AttentionBlockState(std::vector<double> query, Matrix keys, Matrix values, std::size_t needle);

  /// d_k = 1 state whose logits are exactly `logits` (q = [1], k_j = [z_j]).
  static AttentionBlockState from_logits(std::span<const double> logits, Matrix values,
                                         std::size_t needle);

  const std::vector<double>& query() const { return query_; }
  const Matrix& keys() const { return keys_; }
  const Matrix& values() const { return values_; }
  std::size_t needle() const { return needle_; }
  std::size_t head_dim() const { return query_.size(); }
  std::size_t length() const { return keys_.rows(); }

  const std::vector<double>& logits() const { return out_.logits; }
  const std::vector<double>& weights() const { return out_.weights; }
  const std::vector<double>& output() const { return out_.output; }

  double needle_logit() const { return out_.logits[needle_]; }
  /// exp(z_{j*} - lse(z)); accurate even when the mass underflows a plain softmax.
  double needle_mass() const;
  /// log of needle_mass(), i.e. -(per-query retrieval loss).
  double log_needle_mass() const;

  AttentionBlockState with_query(std::vector<double> query) const;

 private:
  std::vector<double> query_;
  Matrix keys_;
  Matrix values_;
  std::size_t needle_;
  AttentionOutput out_;
};

struct MarginReport {
  double gamma = 0.0;             // z_{j*} - lse(distractor logits)
  double needle_mass = 0.0;       // from the softmax
  double mass_from_margin = 0.0;  // 1 / (1 + e^{-gamma})
  double tau = 0.0;
  bool success = false;           // needle_mass >= tau
  bool margin_success = false;    // gamma >= ln(tau / (1 - tau))
};

/// Requires T >= 2 and tau in (0, 1).
MarginReport margin(const AttentionBlockState& state, double tau);

/// Number of distractors j != j* with z_j >= z_{j*} - delta.
std::size_t count_near_ties(const AttentionBlockState& state, double delta);

/// 1 / (1 + m e^{-delta}); throws if the state has fewer than m distractors
/// within delta of the needle logit.
double dilution_bound(const AttentionBlockState& state, std::size_t m, double delta);

/// ln((T-1)(1-eps)/eps): the gap every distractor needs for needle mass >= 1-eps.
double required_margin(std::size_t context_length, double eps);

struct BoundCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds(double slack = 0.0) const { return lhs <= rhs + slack; }
};

/// lhs = <u, o>, rhs = a*<u, v*> + (1 - a*) max_{j != j*} <u, v_j>.
BoundCheck needle_signal_bound(const AttentionBlockState& state, std::span<const double> u);

struct SpecializationCheck : BoundCheck {
  /// <u, v*> >= max_{j != j*} <u, v_j>. Substituting eps >= a* only loosens the
  /// bound in this regime; otherwise lhs <= rhs is not implied.
  bool needle_aligned = false;
};

/// Same bound with eps substituted for the needle mass. Requires the margin to
/// certify a* <= eps, i.e. gamma <= ln(eps / (1 - eps)) (1e-12 slack).
SpecializationCheck specialization_bound(const AttentionBlockState& state,
                                         std::span<const double> u, double eps);

}  // namespace qttt
