#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace qttt {

struct RopeConfig {
  bool enabled = true;
  double base = 10000.0;
};

/// Rotary position embedding on one head vector (half-split pairing: element i
/// rotates with element i + d/2 by angle position * base^(-2i/d)). Identity when
/// disabled. `inverse` rotates by the negated angle (the transpose).
void rope_rotate_inplace(std::span<double> x, std::size_t position, const RopeConfig& cfg,
                         bool inverse = false);

std::vector<double> rope_rotate(std::span<const double> x, std::size_t position,
                                const RopeConfig& cfg);

}  // namespace qttt
