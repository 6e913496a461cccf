#include "qttt/theory.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "qttt/query_update.hpp"

namespace qttt {

std::string to_string(LogitDistribution dist) {
  switch (dist) {
    case LogitDistribution::Uniform: return "uniform";
    case LogitDistribution::Gaussian: return "gaussian";
    case LogitDistribution::NearTie: return "near-tie";
  }
  return "?";
}

namespace {

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo),
                                                  static_cast<std::int64_t>(hi)));
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

CheckSummary start(std::string name, std::size_t trials) {
  CheckSummary s;
  s.name = std::move(name);
  s.trials = trials;
  return s;
}

void record(CheckSummary& s, double excess) {
  if (excess > 0.0) ++s.violations;
  s.worst = std::max(s.worst, excess);
}

// f(q) = -log a*(q) = log Σ_j exp(<q, k_j - k*> / sqrt(d)), formed from
// logit differences so it keeps full relative precision when a* -> 1.
double neg_log_needle_mass(std::span<const double> q, const AttentionBlockState& s) {
  const std::size_t dk = s.head_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  auto ks = s.keys().row(s.needle());
  std::vector<double> diff(s.length(), 0.0);
  double top = 0.0;
  for (std::size_t j = 0; j < s.length(); ++j) {
    if (j == s.needle()) continue;
    auto k = s.keys().row(j);
    double acc = 0.0;
    for (std::size_t c = 0; c < dk; ++c) acc += q[c] * (k[c] - ks[c]);
    diff[j] = acc * inv;
    top = std::max(top, diff[j]);
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < s.length(); ++j) {
    if (j != s.needle()) sum += std::exp(diff[j] - top);
  }
  return top == 0.0 ? std::log1p(sum) : top + std::log(std::exp(-top) + sum);
}

}  // namespace

AttentionBlockState state_with_logits(Rng& rng, std::span<const double> logits, std::size_t d_k,
                                      std::size_t d_v, std::size_t needle) {
  if (d_k < 1) throw std::invalid_argument("state_with_logits: d_k must be >= 1");
  std::vector<double> q(d_k);
  double qq = 0.0;
  while (qq < 1e-3) {
    qq = 0.0;
    for (double& v : q) {
      v = rng.normal();
      qq += v * v;
    }
  }
  const double sd = std::sqrt(static_cast<double>(d_k));
  Matrix keys = gaussian_matrix(rng, logits.size(), d_k);
  for (std::size_t j = 0; j < logits.size(); ++j) {
    auto k = keys.row(j);
    const double shift = (logits[j] * sd - dot(q, k)) / qq;
    for (std::size_t c = 0; c < d_k; ++c) k[c] += shift * q[c];
  }
  return AttentionBlockState(std::move(q), std::move(keys), gaussian_matrix(rng, logits.size(), d_v),
                             needle);
}

AttentionBlockState random_state(Rng& rng, LogitDistribution dist, std::size_t T, std::size_t d_k,
                                 std::size_t d_v) {
  if (T < 1) throw std::invalid_argument("random_state: T must be >= 1");
  const std::size_t needle = pick(rng, 0, T - 1);
  switch (dist) {
    case LogitDistribution::Uniform: {
      const double s = rng.uniform(0.5, 6.0);
      std::vector<double> q(d_k);
      for (double& v : q) v = rng.uniform(-s, s);
      return AttentionBlockState(std::move(q), gaussian_matrix(rng, T, d_k),
                                 gaussian_matrix(rng, T, d_v), needle);
    }
    case LogitDistribution::Gaussian: {
      const double s = rng.uniform(0.3, 4.0);
      std::vector<double> q(d_k);
      for (double& v : q) v = rng.normal(0.0, s);
      return AttentionBlockState(std::move(q), gaussian_matrix(rng, T, d_k),
                                 gaussian_matrix(rng, T, d_v), needle);
    }
    case LogitDistribution::NearTie: {
      std::vector<double> z(T);
      const double base = rng.uniform(-5.0, 5.0);
      const std::size_t m = T > 1 ? pick(rng, 1, T - 1) : 0;
      // The first m distractors (in index order, skipping the needle) are near ties.
      std::size_t placed = 0;
      for (std::size_t j = 0; j < T; ++j) {
        if (j == needle) {
          z[j] = base;
        } else if (placed++ < m) {
          z[j] = base - rng.uniform(0.0, 2.0);
        } else {
          z[j] = base - rng.uniform(2.0, 12.0);
        }
      }
      return state_with_logits(rng, z, d_k, d_v, needle);
    }
  }
  throw std::logic_error("random_state: bad distribution");
}

AttentionBlockState random_state(Rng& rng, std::size_t max_T) {
  if (max_T < 2) throw std::invalid_argument("random_state: max_T must be >= 2");
  const auto dist = static_cast<LogitDistribution>(rng.uniform_int(0, 2));
  const std::size_t T = pick(rng, 2, max_T);
  return random_state(rng, dist, T, pick(rng, 1, 16), pick(rng, 1, 8));
}

AttentionBlockState near_tie_state(Rng& rng, std::size_t T, std::size_t m, double delta,
                                   std::size_t d_k, std::size_t d_v) {
  if (m > T - 1) throw std::invalid_argument("near_tie_state: m exceeds T - 1");
  std::vector<double> z(T, -(delta + 30.0));
  z[0] = 0.0;
  // 1e-9 inside the window so key construction round-off cannot push a
  // near tie outside it.
  for (std::size_t j = 1; j <= m; ++j) z[j] = -delta + 1e-9;
  return state_with_logits(rng, z, d_k, d_v, 0);
}

CheckSummary check_margin_identity(const TheoryOptions& opt) {
  Stopwatch sw;
  CheckSummary s = start("margin identity: a* == 1/(1+e^-gamma)", opt.trials);
  Rng rng = Rng(opt.seed).fork(11);
  std::size_t flag_mismatch = 0;
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const auto st = random_state(rng);
    const double tau = rng.uniform(0.01, 0.99);
    const auto r = margin(st, tau);
    record(s, std::abs(r.needle_mass - r.mass_from_margin) - opt.slack);
    // Flags may legitimately disagree only within rounding of the threshold.
    const bool near = std::abs(r.gamma - std::log(tau / (1.0 - tau))) < 1e-9;
    if (!near && r.success != r.margin_success) {
      ++flag_mismatch;
      ++s.violations;
    }
  }
  s.note = "success/margin flag mismatches: " + std::to_string(flag_mismatch);
  s.seconds = sw.seconds();
  return s;
}

CheckSummary check_dilution(const TheoryOptions& opt) {
  Stopwatch sw;
  CheckSummary s = start("dilution bound: a* <= 1/(1+m e^-delta)", opt.trials);
  Rng rng = Rng(opt.seed).fork(12);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const auto st = random_state(rng);
    // delta reaches at least one distractor, so m >= 1.
    std::size_t j = pick(rng, 0, st.length() - 2);
    if (j >= st.needle()) ++j;
    const double delta = std::max(0.0, st.needle_logit() - st.logits()[j]) + rng.uniform(0.0, 1.0);
    const std::size_t m = count_near_ties(st, delta);
    record(s, st.needle_mass() - dilution_bound(st, m, delta) - opt.slack);
  }
  s.seconds = sw.seconds();
  return s;
}

CheckSummary check_required_margin(const TheoryOptions& opt) {
  Stopwatch sw;
  CheckSummary s = start("required margin: gap ln((T-1)(1-eps)/eps) gives a* >= 1-eps", 0);
  Rng rng = Rng(opt.seed).fork(13);
  auto one = [&](std::size_t T, double eps) {
    const double gap = required_margin(T, eps);
    std::vector<double> z(T, -gap);
    z[0] = 0.0;
    const auto tie = AttentionBlockState::from_logits(z, Matrix(T, 1), 0);
    // Constructive case is an equality; it must also clear the lower bound.
    record(s, std::max(std::abs(tie.needle_mass() - (1.0 - eps)), (1.0 - eps) - tie.needle_mass()) -
                  opt.slack);
    std::fill(z.begin() + 1, z.end(), -(gap + 0.1));
    const auto wide = AttentionBlockState::from_logits(z, Matrix(T, 1), 0);
    if (!(wide.needle_mass() > 1.0 - eps)) record(s, 1.0 - eps - wide.needle_mass() + 1e-300);
    ++s.trials;
  };
  for (std::size_t T : {2u, 10u, 100u, 1000u})
    for (double eps : {0.01, 0.1, 0.5}) one(T, eps);
  while (s.trials < opt.trials) {
    const auto T = static_cast<std::size_t>(std::exp(rng.uniform(std::log(2.0), std::log(2000.0))));
    one(std::max<std::size_t>(T, 2), rng.uniform(1e-3, 0.999));
  }
  s.seconds = sw.seconds();
  return s;
}

CheckSummary check_needle_signal(const TheoryOptions& opt) {
  Stopwatch sw;
  CheckSummary s = start("needle signal: <u,o> <= a*<u,v*> + (1-a*) max <u,v_j>", opt.trials);
  Rng rng = Rng(opt.seed).fork(14);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const auto st = random_state(rng);
    std::vector<double> u(st.values().cols());
    for (double& v : u) v = rng.normal();
    const auto b = needle_signal_bound(st, u);
    record(s, b.lhs - b.rhs - opt.slack);
  }
  s.seconds = sw.seconds();
  return s;
}

CheckSummary check_specialization(const TheoryOptions& opt) {
  Stopwatch sw;
  CheckSummary s = start("specialization: a* <= eps => <u,o> <= eps<u,v*> + (1-eps) max <u,v_j>", 0);
  Rng rng = Rng(opt.seed).fork(15);
  std::size_t misaligned = 0, misaligned_fail = 0, dilution_regime = 0;
  while (s.trials < opt.trials) {
    const auto st = random_state(rng);
    const double a = st.needle_mass();
    double eps;
    if (rng.uniform() < 0.25) {
      // Dilution regime: eps is the dilution bound itself.
      const double delta = rng.uniform(0.0, 3.0);
      const std::size_t m = count_near_ties(st, delta);
      if (m == 0) continue;
      eps = dilution_bound(st, m, delta);
      ++dilution_regime;
    } else {
      eps = a + rng.uniform() * (1.0 - a);
    }
    if (!(eps > 0.0 && eps < 1.0) || eps < a) continue;
    std::vector<double> u(st.values().cols());
    for (double& v : u) v = rng.normal();

    auto check = specialization_bound(st, u, eps);
    if (!check.needle_aligned) {
      ++misaligned;
      if (!check.holds(opt.slack)) ++misaligned_fail;
      // Shift v* along u until it is the largest projection; logits and
      // weights are unchanged because values do not enter them.
      Matrix values = st.values();
      double best = -INFINITY;
      for (std::size_t j = 0; j < st.length(); ++j)
        if (j != st.needle()) best = std::max(best, dot(u, values.row(j)));
      const double need = best - dot(u, values.row(st.needle())) + rng.uniform(0.0, 1.0);
      const double uu = dot(u, u);
      if (uu == 0.0) continue;
      auto vs = values.row(st.needle());
      for (std::size_t c = 0; c < u.size(); ++c) vs[c] += need * u[c] / uu;
      const AttentionBlockState aligned(st.query(), st.keys(), std::move(values), st.needle());
      check = specialization_bound(aligned, u, eps);
      if (!check.needle_aligned) continue;
    }
    record(s, check.lhs - check.rhs - opt.slack);
    ++s.trials;
  }
  s.note = std::to_string(dilution_regime) + " with eps from the dilution bound; " + std::to_string(misaligned) +
           " draws had <u,v*> below a distractor (bound not implied there, " +
           std::to_string(misaligned_fail) + " of them violate it) and were realigned";
  s.seconds = sw.seconds();
  return s;
}

CheckSummary check_query_gradient(const TheoryOptions& opt) {
  Stopwatch sw;
  const std::size_t n = std::min<std::size_t>(opt.trials, 1000);
  CheckSummary s = start("query gradient: closed form vs central differences (rel <= 1e-7)", n);
  Rng rng = Rng(opt.seed).fork(16);
  double max_rel = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto dist = static_cast<LogitDistribution>(rng.uniform_int(0, 2));
    const auto st = random_state(rng, dist, 20, pick(rng, 2, 16), 4);
    const auto g = query_gradient_closed_form(st);
    std::vector<double> q = st.query();
    double num = 0.0, den = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) {
      const double h = 1e-5 * std::max(1.0, std::abs(q[c]));
      const double q0 = q[c];
      q[c] = q0 + h;
      const double fp = neg_log_needle_mass(q, st);
      q[c] = q0 - h;
      const double fm = neg_log_needle_mass(q, st);
      q[c] = q0;
      const double fd = (fp - fm) / (2.0 * h);
      num += (fd - g[c]) * (fd - g[c]);
      den += g[c] * g[c];
    }
    if (den == 0.0) continue;
    max_rel = std::max(max_rel, std::sqrt(num / den));
    record(s, std::sqrt(num / den) - 1e-7);
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "max relative error %.2e", max_rel);
  s.note = buf;
  s.seconds = sw.seconds();
  return s;
}

CheckSummary check_margin_gain(const TheoryOptions& opt) {
  Stopwatch sw;
  const std::size_t n = std::min<std::size_t>(opt.trials, 1000);
  CheckSummary s = start("margin gain: log a* rises, ratio to eta||g||^2 -> 1", n);
  Rng rng = Rng(opt.seed).fork(17);
  double worst_ratio = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto st = random_state(rng);
    for (double eta : {1e-4, 3e-5, 1e-5, 1e-6, 1e-7}) {
      const auto r = margin_gain_check(st, eta);
      if (!(r.actual > 0.0)) record(s, 1.0);
      if (eta == 1e-6) {
        const double ratio = r.actual / r.predicted;
        if (std::abs(ratio - 1.0) > std::abs(worst_ratio - 1.0)) worst_ratio = ratio;
        record(s, std::abs(ratio - 1.0) - 0.01);
      }
    }
  }
  s.note = "worst ratio at eta=1e-6: " + std::to_string(worst_ratio);
  s.seconds = sw.seconds();
  return s;
}

std::vector<DilutionPoint> dilution_sweep(std::span<const std::size_t> T_values, double c,
                                          double delta, std::size_t trials, std::uint64_t seed) {
  if (!(c > 0.0 && c <= 1.0)) throw std::invalid_argument("dilution_sweep: c outside (0, 1]");
  if (!(delta >= 0.0)) throw std::invalid_argument("dilution_sweep: delta must be >= 0");
  if (trials < 1) throw std::invalid_argument("dilution_sweep: trials must be >= 1");
  Rng rng = Rng(seed).fork(18);
  std::vector<DilutionPoint> out;
  for (std::size_t T : T_values) {
    if (T < 2) throw std::invalid_argument("dilution_sweep: T must be >= 2");
    DilutionPoint p;
    p.T = T;
    p.m = std::min(static_cast<std::size_t>(std::ceil(c * static_cast<double>(T))), T - 1);
    p.bound = 1.0 / (1.0 + static_cast<double>(p.m) * std::exp(-delta));
    std::vector<double> z(T);
    for (std::size_t t = 0; t < trials; ++t) {
      z[0] = 0.0;
      for (std::size_t j = 1; j < T; ++j) {
        z[j] = j <= p.m ? -rng.uniform(0.0, delta) : -delta - rng.uniform(0.0, 10.0);
      }
      const auto st = AttentionBlockState::from_logits(z, Matrix(T, 1), 0);
      const double a = st.needle_mass();
      p.mass_mean += a / static_cast<double>(trials);
      p.mass_max = std::max(p.mass_max, a);
    }
    out.push_back(p);
  }
  return out;
}

CheckSummary check_dilution_asymptotic(const TheoryOptions& opt) {
  Stopwatch sw;
  const std::size_t T_values[] = {10, 100, 1000, 10000};
  const std::size_t per = std::clamp<std::size_t>(opt.trials / 100, 1, 100);
  CheckSummary s = start("dilution asymptotic (c=0.5, delta=1): a* <= bound, decreasing, < 0.01 at T=1e3", per * 4);
  const auto curve = dilution_sweep(T_values, 0.5, 1.0, per, opt.seed);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    record(s, curve[i].mass_max - curve[i].bound);
    if (i > 0 && !(curve[i].mass_mean < curve[i - 1].mass_mean)) record(s, 1.0);
  }
  record(s, curve[2].mass_max - 0.01 + 1e-300);
  s.note = "mean mass at T=1e3: " + std::to_string(curve[2].mass_mean);
  s.seconds = sw.seconds();
  return s;
}

std::vector<CheckSummary> run_theory_suite(const TheoryOptions& opt) {
  return {check_margin_identity(opt), check_dilution(opt),       check_required_margin(opt),
          check_needle_signal(opt),   check_specialization(opt), check_query_gradient(opt),
          check_margin_gain(opt),     check_dilution_asymptotic(opt)};
}

}  // namespace qttt
