#pragma once

// Attention mass on a labeled set of context positions, measured at the
// decode steps that emit an answer.

#include <cstddef>
#include <span>
#include <vector>

#include "qttt/model.hpp"
#include "qttt/tasks.hpp"
#include "qttt/transformer.hpp"

namespace qttt {

struct MassCell {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t step = 0;
  double mass = 0.0;  // Σ_{τ ∈ targets} A[τ]
};

struct AttentionMassReport {
  std::vector<std::size_t> target_indices;
  std::vector<MassCell> cells;  // layer-major, then head, then step
  double mean = 0.0;            // over all cells
  double std = 0.0;             // population std over all cells
  /// Mean over cells of log(m) - log(1 - m): the set-level logit margin, with
  /// m and 1 - m floored at 1e-300.
  double margin_mean = 0.0;
};

/// Feeds `prefix` after the cached prompt, then measures the query that emits
/// each of `output_tokens` (teacher-forced). With an empty prefix the first
/// measured query is the last prompt position.
AttentionMassReport attention_mass(const ModelParams& params, const KVCache& cache,
                                   std::span<const std::size_t> target_indices,
                                   std::span<const int> output_tokens,
                                   std::span<const int> prefix = {});

/// Token positions [needle_begin, needle_end) of a rendered task.
std::vector<std::size_t> needle_targets(const RenderedTask& rendered);

}  // namespace qttt
