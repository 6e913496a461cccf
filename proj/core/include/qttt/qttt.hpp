#pragma once

// Query-only test-time training: one prefill, then N steps of span
// next-token loss against the frozen cache with updates to W_Q only.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qttt/model.hpp"
#include "qttt/optimizer.hpp"
#include "qttt/transformer.hpp"

namespace qttt {

struct AdaptationConfig {
  std::size_t steps = 32;
  std::size_t span_length = 128;
  OptimizerConfig optimizer{};  // AdamW, lr 1e-5, wd 0.01, clip 1.0
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptationStep {
  Span span;
  double loss_before = 0.0;
  double loss_after = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm over all W_Q gradients
  std::uint64_t fingerprint = 0;
};

struct AdaptationTrace {
  std::uint64_t initial_fingerprint = 0;
  std::vector<AdaptationStep> steps;
  bool aborted = false;
  std::string abort_reason;

  std::string to_json() const;
  static AdaptationTrace from_json(const std::string& text);
  bool operator==(const AdaptationTrace&) const;
};

struct AdaptationResult {
  ModelParams params;
  AdaptationTrace trace;
};

/// Prefills `tokens`, then adapts a copy of `params`.
AdaptationResult run_qttt(const ModelParams& params, std::span<const int> tokens,
                          const AdaptationConfig& config);

/// Adapts against an existing cache built from `params` over cache.tokens().
AdaptationResult run_qttt(const ModelParams& params, const KVCache& cache,
                          const AdaptationConfig& config);

/// Span start drawn uniformly (with replacement) from [1, T - k].
Span sample_span(Rng& rng, std::size_t context_length, std::size_t span_length);

}  // namespace qttt
