#pragma once

// Inference and adaptation cost model. All arithmetic is exact unsigned
// 128-bit integer arithmetic; budgets at L=32, d=4096, T=1e5 reach ~1e19.

#include <cstddef>
#include <cstdint>
#include <string>

namespace qttt {

__extension__ typedef unsigned __int128 u128;

std::string to_string_u128(u128 v);
/// Parses a non-negative decimal string; throws on junk or overflow.
u128 parse_u128(const std::string& text);

struct FlopModel {
  std::uint64_t n_layers = 1;
  std::uint64_t d_model = 1;
  std::uint64_t mlp_ratio = 4;

  u128 c_quad() const { return u128{2} * n_layers * d_model; }
  u128 c_tok() const { return (u128{4} + 2 * u128{mlp_ratio}) * n_layers * d_model * d_model; }
  /// Throws std::invalid_argument unless n_layers and d_model are positive.
  void validate() const;
};

struct Budget {
  u128 flops = 0;
  std::string provenance;
};

/// C_quad T^2 + C_tok T.
Budget prefill_flops(const FlopModel& m, std::uint64_t T);

/// Σ_{i<n} [C_quad (T + i) + C_tok], in closed form.
Budget gen_flops(const FlopModel& m, std::uint64_t T_think, std::uint64_t T);

/// n_steps · 2 · (C_quad k T + (2 + 2r) L k d^2); `in_span` adds the
/// C_quad k^2 + 2 L k d^2 terms that the k << T form drops.
Budget qttt_partial_flops(const FlopModel& m, std::uint64_t k, std::uint64_t T,
                          std::uint64_t n_steps, bool in_span = false);

enum class MatchMode { RuleOfThumb, Exact };

/// RuleOfThumb: 2 N k. Exact: the largest T_think with gen_flops <= the qTTT
/// budget, found by bisection, so the leftover is below one token's cost.
std::uint64_t matched_thinking_tokens(const FlopModel& m, std::uint64_t k, std::uint64_t n_steps,
                                      std::uint64_t T, MatchMode mode, bool in_span = false);

/// floor(budget / gen_flops(per_traj_tokens, T)), at least 1.
std::uint64_t matched_bon_trajectories(const FlopModel& m, const Budget& budget,
                                       std::uint64_t per_traj_tokens, std::uint64_t T);

/// Decode tokens costing the same as one full-parameter step over T tokens,
/// taken as forward + backward = 3 · prefill_flops(T).
std::uint64_t full_ttt_equivalent_tokens(const FlopModel& m, std::uint64_t T);

}  // namespace qttt
