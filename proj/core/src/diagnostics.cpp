#include "qttt/diagnostics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace qttt {

AttentionMassReport attention_mass(const ModelParams& params, const KVCache& cache,
                                   std::span<const std::size_t> target_indices,
                                   std::span<const int> output_tokens, std::span<const int> prefix) {
  if (target_indices.empty()) throw std::invalid_argument("attention_mass: empty target set");
  if (output_tokens.empty()) throw std::invalid_argument("attention_mass: no output steps");
  for (std::size_t t : target_indices) {
    if (t >= cache.length()) throw std::out_of_range("attention_mass: target index beyond the cache");
  }
  const auto& cfg = params.config();
  const std::size_t H = cfg.n_heads, n_steps = output_tokens.size();
  AttentionMassReport r;
  r.target_indices.assign(target_indices.begin(), target_indices.end());
  std::vector<double> mass(cfg.n_layers * H * n_steps, std::numeric_limits<double>::quiet_NaN());

  std::size_t step = 0;
  bool measuring = prefix.empty();
  const AttentionTap tap = [&](std::size_t layer, std::size_t head, std::size_t, std::span<const double> w) {
    if (!measuring) return;
    double m = 0.0;
    for (std::size_t t : target_indices) m += w[t];
    mass[(layer * H + head) * n_steps + step] = m;
  };
  DecodeSession session(params, cache, &tap);
  if (!prefix.empty()) {
    for (std::size_t i = 0; i + 1 < prefix.size(); ++i) session.feed(prefix[i]);
    measuring = true;
    session.feed(prefix.back());
  }
  for (step = 1; step < n_steps; ++step) session.feed(output_tokens[step - 1]);

  double sum = 0.0, margin = 0.0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t s = 0; s < n_steps; ++s) {
        const double m = mass[(l * H + h) * n_steps + s];
        r.cells.push_back({l, h, s, m});
        sum += m;
        margin += std::log(std::max(m, 1e-300)) - std::log(std::max(1.0 - m, 1e-300));
      }
  const double n = static_cast<double>(r.cells.size());
  r.mean = sum / n;
  double var = 0.0;
  for (const auto& c : r.cells) var += (c.mass - r.mean) * (c.mass - r.mean);
  r.std = std::sqrt(var / n);
  r.margin_mean = margin / n;
  return r;
}

std::vector<std::size_t> needle_targets(const RenderedTask& rendered) {
  std::vector<std::size_t> out;
  for (std::size_t i = rendered.needle_begin; i < rendered.needle_end; ++i) out.push_back(i);
  return out;
}

}  // namespace qttt
