#include "qttt/flops.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace qttt {

std::string to_string_u128(u128 v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  std::reverse(s.begin(), s.end());
  return s;
}

u128 parse_u128(const std::string& text) {
  if (text.empty()) throw std::invalid_argument("parse_u128: empty");
  const u128 max = ~u128{0};
  u128 v = 0;
  for (char c : text) {
    if (c < '0' || c > '9') throw std::invalid_argument("parse_u128: not a number: " + text);
    const unsigned digit = static_cast<unsigned>(c - '0');
    if (v > (max - digit) / 10) throw std::overflow_error("parse_u128: overflow");
    v = v * 10 + digit;
  }
  return v;
}

void FlopModel::validate() const {
  if (n_layers < 1 || d_model < 1) throw std::invalid_argument("FlopModel: n_layers and d_model must be >= 1");
}

namespace {

// Largest n with gen_flops(n, T) <= target; invariant gen(lo) <= target < gen(hi).
std::uint64_t tokens_within(const FlopModel& m, std::uint64_t T, u128 target) {
  std::uint64_t lo = 0, hi = 1;
  while (gen_flops(m, hi, T).flops <= target) {
    lo = hi;
    hi *= 2;
  }
  while (hi - lo > 1) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    if (gen_flops(m, mid, T).flops <= target) lo = mid;
    else hi = mid;
  }
  return lo;
}

}  // namespace

Budget prefill_flops(const FlopModel& m, std::uint64_t T) {
  m.validate();
  if (T < 1) throw std::invalid_argument("prefill_flops: T must be >= 1");
  const u128 t = T;
  return {m.c_quad() * t * t + m.c_tok() * t, "prefill T=" + std::to_string(T)};
}

Budget gen_flops(const FlopModel& m, std::uint64_t T_think, std::uint64_t T) {
  m.validate();
  const u128 n = T_think;
  // n(n-1)/2 with the even factor divided first.
  const u128 tri = n == 0 ? 0 : (n % 2 == 0 ? (n / 2) * (n - 1) : n * ((n - 1) / 2));
  return {m.c_quad() * (n * T + tri) + m.c_tok() * n,
          "generate " + std::to_string(T_think) + " tokens after T=" + std::to_string(T)};
}

Budget qttt_partial_flops(const FlopModel& m, std::uint64_t k, std::uint64_t T,
                          std::uint64_t n_steps, bool in_span) {
  m.validate();
  if (k < 1) throw std::invalid_argument("qttt_partial_flops: k must be >= 1");
  if (k > T) throw std::invalid_argument("qttt_partial_flops: k exceeds T");
  const u128 L = m.n_layers, d = m.d_model, r = m.mlp_ratio, kk = k;
  u128 step = m.c_quad() * kk * T + (2 + 2 * r) * L * kk * d * d;
  if (in_span) step += m.c_quad() * kk * kk + 2 * L * kk * d * d;
  return {u128{n_steps} * 2 * step, "qttt k=" + std::to_string(k) + " N=" + std::to_string(n_steps) +
                                         " T=" + std::to_string(T) + (in_span ? " +in-span" : "")};
}

std::uint64_t matched_thinking_tokens(const FlopModel& m, std::uint64_t k, std::uint64_t n_steps,
                                      std::uint64_t T, MatchMode mode, bool in_span) {
  m.validate();
  if (k < 1) throw std::invalid_argument("matched_thinking_tokens: k must be >= 1");
  if (mode == MatchMode::RuleOfThumb) return 2 * n_steps * k;
  const u128 target = qttt_partial_flops(m, k, T, n_steps, in_span).flops;
  return tokens_within(m, T, target);
}

std::uint64_t matched_bon_trajectories(const FlopModel& m, const Budget& budget,
                                       std::uint64_t per_traj_tokens, std::uint64_t T) {
  if (per_traj_tokens < 1) throw std::invalid_argument("matched_bon_trajectories: per_traj_tokens must be >= 1");
  const u128 per = gen_flops(m, per_traj_tokens, T).flops;
  const u128 n = budget.flops / per;
  if (n > std::numeric_limits<std::uint64_t>::max()) throw std::overflow_error("matched_bon_trajectories");
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(n));
}

std::uint64_t full_ttt_equivalent_tokens(const FlopModel& m, std::uint64_t T) {
  const u128 target = 3 * prefill_flops(m, T).flops;
  return tokens_within(m, T, target);
}

}  // namespace qttt
