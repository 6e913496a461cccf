#include "qttt/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qttt {

AttentionOutput attention_forward(std::span<const double> query, const Matrix& keys,
                                  const Matrix& values) {
  const std::size_t T = keys.rows();
  if (T == 0) throw std::invalid_argument("attention_forward: empty context");
  if (values.rows() != T) throw std::invalid_argument("attention_forward: K/V row mismatch");
  if (query.size() != keys.cols()) throw std::invalid_argument("attention_forward: d_k mismatch");

  AttentionOutput out;
  const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
  out.logits.resize(T);
  for (std::size_t j = 0; j < T; ++j) out.logits[j] = dot(query, keys.row(j)) * scale;
  out.weights = softmax_row(out.logits);
  out.output.assign(values.cols(), 0.0);
  for (std::size_t j = 0; j < T; ++j) {
    auto v = values.row(j);
    for (std::size_t c = 0; c < v.size(); ++c) out.output[c] += out.weights[j] * v[c];
  }
  return out;
}

AttentionBlockState::AttentionBlockState(std::vector<double> query, Matrix keys, Matrix values,
                                         std::size_t needle)
    : query_(std::move(query)), keys_(std::move(keys)), values_(std::move(values)), needle_(needle) {
  if (needle_ >= keys_.rows()) {
    throw std::invalid_argument("AttentionBlockState: needle " + std::to_string(needle_) +
                                " outside [0, " + std::to_string(keys_.rows()) + ")");
  }
  out_ = attention_forward(query_, keys_, values_);
}

AttentionBlockState AttentionBlockState::from_logits(std::span<const double> logits,
                                                     Matrix values, std::size_t needle) {
  Matrix keys(logits.size(), 1);
  for (std::size_t j = 0; j < logits.size(); ++j) keys(j, 0) = logits[j];
  return AttentionBlockState({1.0}, std::move(keys), std::move(values), needle);
}

double AttentionBlockState::log_needle_mass() const {
  return out_.logits[needle_] - log_sum_exp(out_.logits);
}

double AttentionBlockState::needle_mass() const { return std::exp(log_needle_mass()); }

AttentionBlockState AttentionBlockState::with_query(std::vector<double> query) const {
  return AttentionBlockState(std::move(query), keys_, values_, needle_);
}

namespace {

std::vector<double> distractor_logits(const AttentionBlockState& state) {
  std::vector<double> z;
  z.reserve(state.length() - 1);
  for (std::size_t j = 0; j < state.length(); ++j)
    if (j != state.needle()) z.push_back(state.logits()[j]);
  return z;
}

double max_distractor_projection(const AttentionBlockState& state, std::span<const double> u) {
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < state.length(); ++j)
    if (j != state.needle()) best = std::max(best, dot(u, state.values().row(j)));
  return best;
}

}  // namespace

MarginReport margin(const AttentionBlockState& state, double tau) {
  if (state.length() < 2) throw std::invalid_argument("margin: needs at least one distractor");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("margin: tau must lie in (0, 1)");
  MarginReport r;
  r.tau = tau;
  r.gamma = state.needle_logit() - log_sum_exp(distractor_logits(state));
  r.needle_mass = state.weights()[state.needle()];
  r.mass_from_margin = 1.0 / (1.0 + std::exp(-r.gamma));
  r.success = r.needle_mass >= tau;
  r.margin_success = r.gamma >= std::log(tau / (1.0 - tau));
  return r;
}

std::size_t count_near_ties(const AttentionBlockState& state, double delta) {
  const double floor = state.needle_logit() - delta;
  std::size_t m = 0;
  for (std::size_t j = 0; j < state.length(); ++j)
    if (j != state.needle() && state.logits()[j] >= floor) ++m;
  return m;
}

double dilution_bound(const AttentionBlockState& state, std::size_t m, double delta) {
  if (m < 1) throw std::invalid_argument("dilution_bound: m must be >= 1");
  if (!(delta >= 0.0)) throw std::invalid_argument("dilution_bound: delta must be >= 0");
  const std::size_t have = count_near_ties(state, delta);
  if (have < m) {
    throw std::invalid_argument("dilution_bound: only " + std::to_string(have) +
                                " distractors within delta, need " + std::to_string(m));
  }
  return 1.0 / (1.0 + static_cast<double>(m) * std::exp(-delta));
}

double required_margin(std::size_t context_length, double eps) {
  if (context_length < 2) throw std::invalid_argument("required_margin: T must be >= 2");
  if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("required_margin: eps outside (0, 1)");
  return std::log(static_cast<double>(context_length - 1) * (1.0 - eps) / eps);
}

BoundCheck needle_signal_bound(const AttentionBlockState& state, std::span<const double> u) {
  if (u.size() != state.values().cols()) {
    throw std::invalid_argument("needle_signal_bound: u length != d_v");
  }
  BoundCheck b;
  b.lhs = dot(u, state.output());
  const double a = state.weights()[state.needle()];
  const double needle_term = dot(u, state.values().row(state.needle()));
  // With a single key there are no distractors and the output is v*.
  const double rest = state.length() > 1 ? max_distractor_projection(state, u) : 0.0;
  b.rhs = a * needle_term + (1.0 - a) * rest;
  return b;
}

SpecializationCheck specialization_bound(const AttentionBlockState& state,
                                         std::span<const double> u, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) {
    throw std::invalid_argument("specialization_bound: eps outside (0, 1)");
  }
  if (u.size() != state.values().cols()) {
    throw std::invalid_argument("specialization_bound: u length != d_v");
  }
  if (state.length() < 2) throw std::invalid_argument("specialization_bound: needs distractors");
  const double gamma = margin(state, 0.5).gamma;
  if (gamma > std::log(eps / (1.0 - eps)) + 1e-12) {
    throw std::invalid_argument("specialization_bound: needle mass exceeds eps");
  }
  SpecializationCheck b;
  const double needle_term = dot(u, state.values().row(state.needle()));
  const double rest = max_distractor_projection(state, u);
  b.lhs = dot(u, state.output());
  b.rhs = eps * needle_term + (1.0 - eps) * rest;
  b.needle_aligned = needle_term >= rest;
  return b;
}

}  // namespace qttt
