#pragma once

// Randomized attention states and the inequality suites run by
// `qttt theory-check` and the acceptance tests.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qttt/attention.hpp"
#include "qttt/numeric.hpp"

namespace qttt {

enum class LogitDistribution {
  Uniform,   // q entries uniform in [-s, s]
  Gaussian,  // q entries N(0, s^2)
  NearTie,   // m distractors within delta below the needle, the rest far below
};

std::string to_string(LogitDistribution dist);

/// Keys/values N(0, 1) and a query scaled so logits spread over a few units.
/// NearTie states place at least one distractor within [0, 2] of the needle.
AttentionBlockState random_state(Rng& rng, LogitDistribution dist, std::size_t T,
                                 std::size_t d_k, std::size_t d_v);

/// Random T, d_k, d_v and distribution; T in [2, max_T].
AttentionBlockState random_state(Rng& rng, std::size_t max_T = 64);

/// Keys built so that q·k_j/sqrt(d_k) equals logits[j] exactly (up to
/// rounding): random keys with their q-component replaced.
AttentionBlockState state_with_logits(Rng& rng, std::span<const double> logits,
                                      std::size_t d_k, std::size_t d_v, std::size_t needle);

/// Needle at logit 0, `m` distractors at -delta + 1e-9, T-1-m at -(delta + 30).
AttentionBlockState near_tie_state(Rng& rng, std::size_t T, std::size_t m, double delta,
                                   std::size_t d_k = 4, std::size_t d_v = 4);

struct CheckSummary {
  std::string name;
  std::size_t trials = 0;
  std::size_t violations = 0;
  double worst = 0.0;    // largest violation excess (or error), for the report
  double seconds = 0.0;
  std::string note;
  bool passed() const { return violations == 0; }
};

struct TheoryOptions {
  std::size_t trials = 10000;
  std::uint64_t seed = 0;
  double slack = 1e-12;
};

CheckSummary check_margin_identity(const TheoryOptions& opt);
CheckSummary check_dilution(const TheoryOptions& opt);
CheckSummary check_required_margin(const TheoryOptions& opt);
CheckSummary check_needle_signal(const TheoryOptions& opt);
/// Instances are filtered to a needle-aligned direction u; misaligned draws
/// are counted in `note` but are outside the bound's regime.
CheckSummary check_specialization(const TheoryOptions& opt);
/// Closed-form query gradient vs central differences, rel. err <= 1e-7.
CheckSummary check_query_gradient(const TheoryOptions& opt);
/// Positive gain for eta <= 1e-4; ratio in [0.99, 1.01] at eta = 1e-6.
CheckSummary check_margin_gain(const TheoryOptions& opt);
/// Needle mass under ceil(cT) near ties at T = 10^1..10^4 stays under the
/// bound, decreases in T and drops below 0.01 by T = 1000.
CheckSummary check_dilution_asymptotic(const TheoryOptions& opt);

std::vector<CheckSummary> run_theory_suite(const TheoryOptions& opt);

struct DilutionPoint {
  std::size_t T = 0;
  std::size_t m = 0;
  double mass_mean = 0.0;
  double mass_max = 0.0;
  double bound = 0.0;
};

/// For each T: `trials` states with m = min(ceil(cT), T-1) distractors at
/// logit gaps drawn uniformly from [0, delta] below the needle.
std::vector<DilutionPoint> dilution_sweep(std::span<const std::size_t> T_values, double c,
                                          double delta, std::size_t trials, std::uint64_t seed);

}  // namespace qttt
