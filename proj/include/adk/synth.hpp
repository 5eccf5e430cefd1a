#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "adk/perlin.hpp"
#include "adk/rng.hpp"
#include "adk/tensor.hpp"

// Procedural anomaly synthesis: Perlin-carved masks gated by a foreground
// estimate, blended with an out-of-distribution appearance at a random
// opacity. The source image is preserved bitwise outside the mask.
namespace adk::synth {

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // 0/1, row-major

  static BinaryMask zeros(int h, int w) {
    return {h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  }
  static BinaryMask ones(int h, int w) {
    return {h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 1)};
  }
  std::uint8_t at(int y, int x) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t& at(int y, int x) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::int64_t count() const {
    return std::accumulate(data.begin(), data.end(), std::int64_t{0});
  }
  bool any() const { return count() > 0; }

  template <typename T>
  Tensor<T> to_tensor() const {
    std::vector<T> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<T>(data[i]);
    return Tensor<T>::from_vector({1, 1, height, width}, std::move(out));
  }
};

enum class ForegroundMode { object, texture };

template <typename T>
struct SynthSample {
  Tensor<T> image;  // [1,C,H,W]
  BinaryMask mask;
  int label = 0;  // 1 iff the mask has at least one positive pixel
};

namespace detail {

template <typename T>
void check_image(const Tensor<T>& image, const char* op) {
  if (image.ndim() != 4 || image.dim(0) != 1)
    throw std::invalid_argument(std::string(op) + ": expected a [1,C,H,W] image, got " +
                                shape_str(image.shape()));
}

}  // namespace detail

// Axis-aligned rectangle mask; the deterministic core of texture-mode
// foregrounds, exposed so degenerate extents are testable directly.
inline BinaryMask rect_mask(int height, int width, int y0, int x0, int rh, int rw) {
  BinaryMask m = BinaryMask::zeros(height, width);
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x) m.at(y, x) = 1;
  return m;
}

// Foreground estimate. Object mode: global Otsu threshold on grayscale
// intensity, with background polarity decided by border-pixel majority; a
// (near-)constant image yields an empty mask and the caller must resample.
// Texture mode: a random rectangle covering 25-100% of each dimension.
template <typename T>
BinaryMask foreground_mask(const Tensor<T>& image, ForegroundMode mode, Rng& rng) {
  detail::check_image(image, "foreground_mask");
  const int c = static_cast<int>(image.dim(1));
  const int h = static_cast<int>(image.dim(2));
  const int w = static_cast<int>(image.dim(3));
  if (mode == ForegroundMode::texture) {
    const double hf = rng.uniform(0.25, 1.0);
    const double wf = rng.uniform(0.25, 1.0);
    const int rh = std::clamp(static_cast<int>(std::lround(hf * h)), 1, h);
    const int rw = std::clamp(static_cast<int>(std::lround(wf * w)), 1, w);
    const int y0 = static_cast<int>(rng.uniform_int(0, h - rh));
    const int x0 = static_cast<int>(rng.uniform_int(0, w - rw));
    return rect_mask(h, w, y0, x0, rh, rw);
  }

  // grayscale in [0,1] from the [-1,1] channel mean
  std::vector<float> gray(static_cast<std::size_t>(h) * w, 0.0f);
  std::span<const T> px = image.data();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < gray.size(); ++i)
      gray[i] += static_cast<float>(px[static_cast<std::size_t>(ch) * gray.size() + i]);
  for (float& g : gray) g = (g / static_cast<float>(c) + 1.0f) * 0.5f;

  constexpr int kBins = 256;
  std::array<std::int64_t, kBins> hist{};
  for (float g : gray) {
    int b = std::clamp(static_cast<int>(g * kBins), 0, kBins - 1);
    ++hist[static_cast<std::size_t>(b)];
  }
  const std::int64_t total = static_cast<std::int64_t>(gray.size());
  double sum_all = 0;
  for (int b = 0; b < kBins; ++b) sum_all += static_cast<double>(b) * hist[b];
  double best_var = 0.0;
  int best_bin = -1;
  std::int64_t w0 = 0;
  double sum0 = 0;
  for (int b = 0; b < kBins; ++b) {
    w0 += hist[b];
    if (w0 == 0) continue;
    const std::int64_t w1 = total - w0;
    if (w1 == 0) break;
    sum0 += static_cast<double>(b) * hist[b];
    const double mu0 = sum0 / static_cast<double>(w0);
    const double mu1 = (sum_all - sum0) / static_cast<double>(w1);
    const double var = static_cast<double>(w0) * static_cast<double>(w1) * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_bin = b;
    }
  }
  if (best_bin < 0) return BinaryMask::zeros(h, w);  // constant image

  const float thr = static_cast<float>(best_bin + 1) / kBins;
  std::int64_t border_high = 0, border_total = 0;
  auto visit_border = [&](int y, int x) {
    ++border_total;
    border_high += gray[static_cast<std::size_t>(y) * w + x] >= thr;
  };
  for (int x = 0; x < w; ++x) {
    visit_border(0, x);
    if (h > 1) visit_border(h - 1, x);
  }
  for (int y = 1; y < h - 1; ++y) {
    visit_border(y, 0);
    if (w > 1) visit_border(y, w - 1);
  }
  const bool background_is_high = 2 * border_high > border_total;
  BinaryMask m = BinaryMask::zeros(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool high = gray[static_cast<std::size_t>(y) * w + x] >= thr;
      m.at(y, x) = (high != background_is_high) ? 1 : 0;
    }
  return m;
}

// M = (field > threshold) AND F
inline BinaryMask make_anomaly_mask(const PerlinField& field, float threshold,
                                    const BinaryMask& fg) {
  if (field.height != fg.height || field.width != fg.width)
    throw std::invalid_argument("make_anomaly_mask: field and foreground sizes differ");
  BinaryMask m = BinaryMask::zeros(field.height, field.width);
  for (int y = 0; y < field.height; ++y)
    for (int x = 0; x < field.width; ++x)
      m.at(y, x) = (field.at(y, x) > threshold && fg.at(y, x)) ? 1 : 0;
  return m;
}

// S = beta (M . N) + (1-beta) (M . A) + Mbar . N, with the complement term
// realised as a bitwise copy of N outside the mask.
template <typename T>
SynthSample<T> synthesize(const Tensor<T>& normal, const Tensor<T>& appearance,
                          const BinaryMask& mask, double beta_opacity) {
  detail::check_image(normal, "synthesize");
  if (normal.shape() != appearance.shape())
    throw std::invalid_argument("synthesize: appearance shape must match input");
  if (normal.dim(2) != mask.height || normal.dim(3) != mask.width)
    throw std::invalid_argument("synthesize: mask size must match image");
  if (!(beta_opacity >= 0.0 && beta_opacity <= 1.0))
    throw std::invalid_argument("synthesize: opacity must lie in [0,1]");
  const std::int64_t c = normal.dim(1);
  const std::int64_t hw = normal.dim(2) * normal.dim(3);
  std::vector<T> out(normal.data().begin(), normal.data().end());
  const T b = static_cast<T>(beta_opacity);
  std::span<const T> nd = normal.data(), ad = appearance.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < hw; ++i)
      if (mask.data[static_cast<std::size_t>(i)])
        out[ch * hw + i] = b * nd[ch * hw + i] + (T(1) - b) * ad[ch * hw + i];
  SynthSample<T> s;
  s.image = Tensor<T>::from_vector(normal.shape(), std::move(out));
  s.mask = mask;
  s.label = mask.any() ? 1 : 0;
  return s;
}

// Texture source: callback-loaded images, already resized to the target dims
// by the loader. Keeps file handling out of the synthesis path.
template <typename T>
struct TextureCorpus {
  std::size_t count = 0;
  std::function<Tensor<T>(std::size_t index, int h, int w)> load;
};

namespace detail {

template <typename T>
Tensor<T> rotate180(const Tensor<T>& img) {
  const std::int64_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  std::vector<T> out(static_cast<std::size_t>(img.numel()));
  std::span<const T> src = img.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out[(ch * h + (h - 1 - y)) * w + (w - 1 - x)] = src[(ch * h + y) * w + x];
  return Tensor<T>::from_vector(img.shape(), std::move(out));
}

// Quarter-turn rotations need a square frame to keep A the same size as N.
template <typename T>
Tensor<T> rotate90cw(const Tensor<T>& img, int quarter_turns) {
  if (quarter_turns == 2) return rotate180(img);
  const std::int64_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  std::vector<T> out(static_cast<std::size_t>(img.numel()));
  std::span<const T> src = img.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const T v = src[(ch * h + y) * w + x];
        if (quarter_turns == 1)
          out[(ch * w + x) * h + (h - 1 - y)] = v;
        else  // 3
          out[(ch * w + (w - 1 - x)) * h + y] = v;
      }
  return Tensor<T>::from_vector(img.shape(), std::move(out));
}

}  // namespace detail

// Appearance of the synthetic anomaly: either a random corpus texture resized
// to the input dims, or a self-augmentation of the input (rotation, channel
// permutation, or rectangle shuffle, one of the three chosen uniformly).
template <typename T>
Tensor<T> appearance_source(const Tensor<T>& normal, const TextureCorpus<T>* corpus,
                            Rng& rng) {
  detail::check_image(normal, "appearance_source");
  const int c = static_cast<int>(normal.dim(1));
  const int h = static_cast<int>(normal.dim(2));
  const int w = static_cast<int>(normal.dim(3));
  if (corpus && corpus->count > 0) {
    const std::size_t idx =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus->count) - 1));
    Tensor<T> tex = corpus->load(idx, h, w);
    if (tex.shape() != normal.shape())
      throw std::invalid_argument("appearance_source: corpus loader returned wrong shape");
    return tex;
  }
  const int mode = static_cast<int>(rng.uniform_int(0, 2));
  if (mode == 0) {
    int turns = static_cast<int>(rng.uniform_int(1, 3));
    if (h != w && turns != 2) turns = 2;  // quarter turns require a square image
    return detail::rotate90cw(normal, turns);
  }
  if (mode == 1) {
    std::vector<int> perm(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (int i = c - 1; i > 0; --i) {
      int j = static_cast<int>(rng.uniform_int(0, i));
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    std::vector<T> out(static_cast<std::size_t>(normal.numel()));
    std::span<const T> src = normal.data();
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src.data() + perm[static_cast<std::size_t>(ch)] * hw, hw,
                  out.data() + ch * hw);
    return Tensor<T>::from_vector(normal.shape(), std::move(out));
  }
  // rectangle shuffle on the finest grid that tiles the image
  int grid = 4;
  while (grid > 1 && (h % grid != 0 || w % grid != 0)) grid /= 2;
  if (grid == 1) return detail::rotate180(normal);
  const int bh = h / grid, bw = w / grid;
  std::vector<int> order(static_cast<std::size_t>(grid * grid));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int i = grid * grid - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform_int(0, i));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  std::vector<T> out(static_cast<std::size_t>(normal.numel()));
  std::span<const T> src = normal.data();
  for (int block = 0; block < grid * grid; ++block) {
    const int sy = (order[static_cast<std::size_t>(block)] / grid) * bh;
    const int sx = (order[static_cast<std::size_t>(block)] % grid) * bw;
    const int dy = (block / grid) * bh;
    const int dx = (block % grid) * bw;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < bh; ++y)
        for (int x = 0; x < bw; ++x)
          out[(static_cast<std::size_t>(ch) * h + dy + y) * w + dx + x] =
              src[(static_cast<std::size_t>(ch) * h + sy + y) * w + sx + x];
  }
  return Tensor<T>::from_vector(normal.shape(), std::move(out));
}

// Knobs for the per-sample generator. The Perlin threshold and opacity ranges
// are sampled per attempt; masks covering too little or too much of the
// foreground are rejected and redrawn.
struct SynthParams {
  std::vector<int> lattice_choices = {2, 4, 8};
  double threshold_lo = 0.3;
  double threshold_hi = 0.7;
  double min_coverage = 0.001;  // fraction of foreground pixels
  double max_coverage = 0.40;
  double opacity_lo = 0.1;
  double opacity_hi = 0.8;
  int max_tries = 20;
  ForegroundMode fg_mode = ForegroundMode::texture;
};

// Draws one synthetic sample. If no acceptable mask is found within
// max_tries the untouched normal sample is returned (y=0), which the caller
// may treat as a resample request.
template <typename T>
SynthSample<T> make_synth_sample(const Tensor<T>& normal, const SynthParams& params,
                                 const TextureCorpus<T>* corpus, Rng& rng) {
  detail::check_image(normal, "make_synth_sample");
  const int h = static_cast<int>(normal.dim(2));
  const int w = static_cast<int>(normal.dim(3));
  std::vector<int> lattices;
  for (int r : params.lattice_choices)
    if (h % r == 0 && w % r == 0) lattices.push_back(r);
  if (lattices.empty()) lattices.push_back(1);
  for (int attempt = 0; attempt < params.max_tries; ++attempt) {
    const int res = lattices[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(lattices.size()) - 1))];
    const float thr = static_cast<float>(rng.uniform(params.threshold_lo, params.threshold_hi));
    PerlinField field = perlin2d(rng, w, h, res, res);
    BinaryMask fg = foreground_mask(normal, params.fg_mode, rng);
    const std::int64_t fg_count = fg.count();
    if (fg_count == 0) continue;
    BinaryMask mask = make_anomaly_mask(field, thr, fg);
    const double coverage =
        static_cast<double>(mask.count()) / static_cast<double>(fg_count);
    if (coverage < params.min_coverage || coverage > params.max_coverage) continue;
    Tensor<T> appearance = appearance_source(normal, corpus, rng);
    const double beta = rng.uniform(params.opacity_lo, params.opacity_hi);
    return synthesize(normal, appearance, mask, beta);
  }
  SynthSample<T> s;
  s.image = normal.clone();
  s.mask = BinaryMask::zeros(h, w);
  s.label = 0;
  return s;
}

}  // namespace adk::synth
