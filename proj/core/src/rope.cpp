#include "qttt/rope.hpp"

#include <cmath>
#include <stdexcept>

namespace qttt {

void rope_rotate_inplace(std::span<double> x, std::size_t position, const RopeConfig& cfg,
                         bool inverse) {
  if (x.size() % 2 != 0) throw std::invalid_argument("rope_rotate: head dimension must be even");
  if (!cfg.enabled || position == 0) return;
  const std::size_t half = x.size() / 2;
  const double dim = static_cast<double>(x.size());
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(cfg.base, -2.0 * static_cast<double>(i) / dim);
    double angle = static_cast<double>(position) * freq;
    if (inverse) angle = -angle;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double a = x[i];
    const double b = x[i + half];
    x[i] = a * c - b * s;
    x[i + half] = a * s + b * c;
  }
}

std::vector<double> rope_rotate(std::span<const double> x, std::size_t position,
                                const RopeConfig& cfg) {
  std::vector<double> out(x.begin(), x.end());
  rope_rotate_inplace(out, position, cfg);
  return out;
}

}  // namespace qttt
