#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "adk/rng.hpp"

namespace adk::synth {

// Classic 2D gradient noise sampled on a pixel grid. Values are exactly 0 at
// the gradient-lattice corners and bounded in [-1, 1] after the sqrt(2)
// amplitude normalisation.
struct PerlinField {
  int width = 0;
  int height = 0;
  int rx = 0;  // lattice cells across
  int ry = 0;  // lattice cells down
  std::vector<float> values;  // height x width, row-major

  float at(int y, int x) const {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
};

// Gradient angles are drawn row-major over the (ry+1) x (rx+1) lattice; the
// draw order is part of the determinism contract.
inline PerlinField perlin2d(Rng& rng, int width, int height, int rx, int ry) {
  if (width <= 0 || height <= 0 || rx <= 0 || ry <= 0)
    throw std::invalid_argument("perlin2d: dimensions and resolution must be positive");
  if (width % rx != 0 || height % ry != 0)
    throw std::invalid_argument("perlin2d: lattice resolution must divide dimensions");
  const int cw = width / rx, ch = height / ry;
  std::vector<float> gx(static_cast<std::size_t>((rx + 1) * (ry + 1)));
  std::vector<float> gy(gx.size());
  for (int j = 0; j <= ry; ++j) {
    for (int i = 0; i <= rx; ++i) {
      const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      gx[static_cast<std::size_t>(j * (rx + 1) + i)] = static_cast<float>(std::cos(angle));
      gy[static_cast<std::size_t>(j * (rx + 1) + i)] = static_cast<float>(std::sin(angle));
    }
  }
  auto fade = [](float t) { return t * t * t * (t * (t * 6 - 15) + 10); };
  PerlinField field{width, height, rx, ry,
                    std::vector<float>(static_cast<std::size_t>(width) * height)};
  const float norm = static_cast<float>(std::sqrt(2.0));
  for (int py = 0; py < height; ++py) {
    const int y0 = py / ch;
    const float dy = static_cast<float>(py % ch) / static_cast<float>(ch);
    const float v = fade(dy);
    for (int px = 0; px < width; ++px) {
      const int x0 = px / cw;
      const float dx = static_cast<float>(px % cw) / static_cast<float>(cw);
      const float u = fade(dx);
      auto dot = [&](int gxi, int gyi, float ox, float oy) {
        const std::size_t g = static_cast<std::size_t>(gyi * (rx + 1) + gxi);
        return gx[g] * ox + gy[g] * oy;
      };
      const float n00 = dot(x0, y0, dx, dy);
      const float n10 = dot(x0 + 1, y0, dx - 1, dy);
      const float n01 = dot(x0, y0 + 1, dx, dy - 1);
      const float n11 = dot(x0 + 1, y0 + 1, dx - 1, dy - 1);
      const float top = n00 + u * (n10 - n00);
      const float bot = n01 + u * (n11 - n01);
      field.values[static_cast<std::size_t>(py) * width + px] =
          norm * (top + v * (bot - top));
    }
  }
  return field;
}

}  // namespace adk::synth
