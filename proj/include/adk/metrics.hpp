#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <queue>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

// Ranking and localization metrics, each with a pinned tie convention:
// tied scores receive half credit (mid-rank), so every metric is invariant
// under permutation of the evaluation order.
namespace adk::metrics {

// Probability that a random positive outranks a random negative, ties
// counted 1/2 (equivalent to trapezoidal ROC integration).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auroc: scores and labels must align");
  std::int64_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("auroc: need both classes in the labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // mid-ranks over tied groups
  double rank_sum_pos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum_pos += midrank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) * (pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Step-interpolated average precision over distinct score thresholds.
inline double average_precision(std::span<const double> scores,
                                std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("average_precision: scores and labels must align");
  std::int64_t pos = 0;
  for (int l : labels) pos += l ? 1 : 0;
  if (pos == 0)
    throw std::invalid_argument("average_precision: need at least one positive");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0;
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::int64_t tp_prev = tp;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp)++;
      ++j;
    }
    if (tp > tp_prev) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      ap += precision * static_cast<double>(tp - tp_prev) / static_cast<double>(pos);
    }
    i = j;
  }
  return ap;
}

struct PixelMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major scores
};

struct PixelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // 0/1, row-major
};

namespace detail {

// 8-connected component labels; -1 marks background. Returns component count.
inline int label_components(const PixelMask& mask, std::vector<int>& labels) {
  labels.assign(mask.values.size(), -1);
  int next = 0;
  const int h = mask.height, w = mask.width;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t at = static_cast<std::size_t>(y) * w + x;
      if (!mask.values[at] || labels[at] >= 0) continue;
      stack.push_back({y, x});
      labels[at] = next;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const std::size_t nat = static_cast<std::size_t>(ny) * w + nx;
            if (mask.values[nat] && labels[nat] < 0) {
              labels[nat] = next;
              stack.push_back({ny, nx});
            }
          }
      }
      ++next;
    }
  }
  return next;
}

}  // namespace detail

// Per-region overlap: sweep thresholds over the pooled distinct scores,
// track mean per-component recall against the global false-positive rate,
// and integrate the polyline over FPR in [0, fpr_limit], normalised by the
// limit. Pixels at equal scores enter as one group.
inline double pro(std::span<const PixelMap> score_maps,
                  std::span<const PixelMask> gt_masks, double fpr_limit = 0.3) {
  if (score_maps.size() != gt_masks.size())
    throw std::invalid_argument("pro: one ground-truth mask per score map required");
  if (!(fpr_limit > 0 && fpr_limit <= 1))
    throw std::invalid_argument("pro: fpr limit must lie in (0,1]");
  struct Pixel {
    double score;
    int component;  // global component index, or -1
  };
  std::vector<Pixel> pixels;
  std::vector<std::int64_t> comp_sizes;
  std::int64_t total_neg = 0;
  for (std::size_t m = 0; m < score_maps.size(); ++m) {
    const PixelMap& map = score_maps[m];
    const PixelMask& mask = gt_masks[m];
    if (map.height != mask.height || map.width != mask.width)
      throw std::invalid_argument("pro: map and mask sizes differ");
    std::vector<int> labels;
    const int n_local = detail::label_components(mask, labels);
    const int base = static_cast<int>(comp_sizes.size());
    comp_sizes.resize(static_cast<std::size_t>(base + n_local), 0);
    for (std::size_t i = 0; i < map.values.size(); ++i) {
      const int comp = labels[i] >= 0 ? base + labels[i] : -1;
      if (comp >= 0)
        ++comp_sizes[static_cast<std::size_t>(comp)];
      else
        ++total_neg;
      pixels.push_back({map.values[i], comp});
    }
  }
  if (comp_sizes.empty())
    throw std::invalid_argument("pro: no anomalous regions in the ground truth");
  if (total_neg == 0)
    throw std::invalid_argument("pro: no negative pixels; FPR is undefined");

  std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) {
    return a.score > b.score;
  });
  const double n_comps = static_cast<double>(comp_sizes.size());
  double recall_sum = 0;  // sum over components of hits/size
  std::int64_t fp = 0;
  double area = 0;
  double prev_fpr = 0, prev_recall = 0;
  bool done = false;
  std::size_t i = 0;
  while (i < pixels.size() && !done) {
    std::size_t j = i;
    while (j < pixels.size() && pixels[j].score == pixels[i].score) {
      if (pixels[j].component >= 0)
        recall_sum += 1.0 / static_cast<double>(
                                comp_sizes[static_cast<std::size_t>(pixels[j].component)]);
      else
        ++fp;
      ++j;
    }
    const double fpr = static_cast<double>(fp) / static_cast<double>(total_neg);
    const double recall = recall_sum / n_comps;
    if (fpr >= fpr_limit) {
      const double at_limit =
          fpr == prev_fpr
              ? recall
              : prev_recall + (recall - prev_recall) * (fpr_limit - prev_fpr) / (fpr - prev_fpr);
      area += (fpr_limit - prev_fpr) * 0.5 * (prev_recall + at_limit);
      done = true;
    } else {
      area += (fpr - prev_fpr) * 0.5 * (prev_recall + recall);
      prev_fpr = fpr;
      prev_recall = recall;
    }
    i = j;
  }
  if (!done)  // FPR never reached the limit; extend the last recall level
    area += (fpr_limit - prev_fpr) * prev_recall;
  return area / fpr_limit;
}

struct EvalReport {
  std::string category;
  double image_auroc = 0;
  double pixel_auroc = 0;
  double pro = 0;
  double pixel_ap = 0;
  std::int64_t images_evaluated = 0;
  std::int64_t pixels_evaluated = 0;

  nlohmann::json to_json() const {
    nlohmann::json per_category = {
        {"image-auroc", image_auroc}, {"pixel-auroc", pixel_auroc},
        {"pro", pro},                 {"pixel-ap", pixel_ap},
        {"images", images_evaluated}, {"pixels", pixels_evaluated}};
    return nlohmann::json{{"image-auroc", image_auroc},
                          {"pixel-auroc", pixel_auroc},
                          {"pro", pro},
                          {"pixel-ap", pixel_ap},
                          {"images", images_evaluated},
                          {"pixels", pixels_evaluated},
                          {"categories", {{category, per_category}}}};
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "category" << std::right << std::setw(13)
       << "image-auroc" << std::setw(13) << "pixel-auroc" << std::setw(9) << "pro"
       << std::setw(10) << "pixel-ap" << std::setw(9) << "images" << "\n";
    os << std::string(66, '-') << "\n";
    os << std::left << std::setw(12) << category << std::right << std::fixed
       << std::setprecision(4) << std::setw(13) << image_auroc << std::setw(13)
       << pixel_auroc << std::setw(9) << pro << std::setw(10) << pixel_ap
       << std::setw(9) << images_evaluated << "\n";
    return os.str();
  }
};

struct ImageResult {
  double image_score = 0;
  PixelMap heatmap;
};

struct ImageGroundTruth {
  int label = 0;  // 1 = anomalous
  PixelMask mask;
};

// Image AUROC from the per-image scores; pixel AUROC and AP over all pixels
// pooled; PRO over the set.
inline EvalReport evaluate(std::span<const ImageResult> results,
                           std::span<const ImageGroundTruth> gt, double fpr_limit = 0.3,
                           const std::string& category = "default") {
  if (results.size() != gt.size() || results.empty())
    throw std::invalid_argument("evaluate: results and ground truth must align");
  std::vector<double> image_scores;
  std::vector<int> image_labels;
  std::vector<double> pixel_scores;
  std::vector<int> pixel_labels;
  std::vector<PixelMap> maps;
  std::vector<PixelMask> masks;
  for (std::size_t i = 0; i < results.size(); ++i) {
    image_scores.push_back(results[i].image_score);
    image_labels.push_back(gt[i].label);
    const PixelMap& hm = results[i].heatmap;
    const PixelMask& mask = gt[i].mask;
    if (hm.height != mask.height || hm.width != mask.width)
      throw std::invalid_argument("evaluate: heatmap and mask sizes differ at image " +
                                  std::to_string(i));
    for (std::size_t p = 0; p < hm.values.size(); ++p) {
      pixel_scores.push_back(hm.values[p]);
      pixel_labels.push_back(mask.values[p] ? 1 : 0);
    }
    maps.push_back(hm);
    masks.push_back(mask);
  }
  EvalReport report;
  report.category = category;
  report.image_auroc = auroc(image_scores, image_labels);
  report.pixel_auroc = auroc(pixel_scores, pixel_labels);
  report.pixel_ap = average_precision(pixel_scores, pixel_labels);
  report.pro = pro(maps, masks, fpr_limit);
  report.images_evaluated = static_cast<std::int64_t>(results.size());
  report.pixels_evaluated = static_cast<std::int64_t>(pixel_scores.size());
  return report;
}

}  // namespace adk::metrics
