#pragma once

// Independent reference implementations used to cross-check the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "defeat/eval_analysis.hpp"

namespace oracle {

using defeat::Annotation;
using defeat::BBox;
using defeat::Detection;

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Cell (i, j) is set iff (j + 0.5) * stride, (i + 0.5) * stride lies strictly
/// inside some box.
inline std::vector<std::uint8_t> gt_mask(const std::vector<BBox>& boxes, int h, int w, int stride) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(h * w), 0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
      for (const auto& b : boxes)
        if (cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2) m[static_cast<std::size_t>(i * w + j)] = 1;
    }
  return m;
}

/// Pick the best remaining box, drop everything overlapping it, repeat.
inline std::vector<int> nms(const std::vector<BBox>& boxes, const std::vector<double>& scores, double thr) {
  std::set<int> alive;
  for (int i = 0; i < static_cast<int>(boxes.size()); ++i) alive.insert(i);
  std::vector<int> keep;
  while (!alive.empty()) {
    int best = *alive.begin();
    for (int i : alive)
      if (scores[static_cast<std::size_t>(i)] > scores[static_cast<std::size_t>(best)]) best = i;
    keep.push_back(best);
    std::set<int> next;
    for (int i : alive)
      if (i != best && oracle::iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(best)]) <= thr) next.insert(i);
    alive = next;
  }
  return keep;
}

/// AP for one class at one threshold. Detections are visited in descending
/// score order (ties: earlier image, then earlier list position); each takes
/// the highest-IoU unmatched gt at or above the threshold. AP integrates the
/// precision envelope max_{j >= k} p_j over recall steps.
inline double average_precision(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<std::vector<Annotation>>& gts, int cls, double thr) {
  struct Item {
    double score;
    std::size_t img, pos;
  };
  std::vector<Item> items;
  int n_gt = 0;
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (const auto& g : gts[i]) n_gt += g.class_id == cls;
  if (n_gt == 0) return NAN;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t k = 0; k < dets[i].size(); ++k)
      if (dets[i][k].class_id == cls) items.push_back({dets[i][k].score, i, k});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return a.score != b.score ? a.score > b.score : (a.img != b.img ? a.img < b.img : a.pos < b.pos);
  });
  std::map<std::pair<std::size_t, std::size_t>, bool> taken;
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t r = 0; r < items.size(); ++r) {
    const auto& d = dets[items[r].img][items[r].pos];
    double best = -1;
    std::size_t best_g = 0;
    const auto& g = gts[items[r].img];
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (g[j].class_id != cls || taken[{items[r].img, j}]) continue;
      const double v = oracle::iou(d.box, g[j].box);
      if (v >= thr && v > best) best = v, best_g = j;
    }
    if (best >= 0) {
      taken[{items[r].img, best_g}] = true;
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    rec.push_back(static_cast<double>(tp) / n_gt);
  }
  double ap = 0;
  for (std::size_t k = 0; k < prec.size(); ++k) {
    const double step = rec[k] - (k ? rec[k - 1] : 0.0);
    if (step <= 0) continue;
    ap += step * *std::max_element(prec.begin() + static_cast<long>(k), prec.end());
  }
  return ap;
}

/// Per-detection rule table in priority order Cor, Loc, Sim, Oth, BG.
inline std::vector<std::array<long, 6>> error_counts(const std::vector<std::vector<Detection>>& dets,
                                                     const std::vector<std::vector<Annotation>>& gts,
                                                     const std::vector<defeat::ClassInfo>& classes) {
  std::map<int, int> super;
  for (const auto& c : classes) super[c.id] = c.supercategory_id;
  std::vector<std::array<long, 6>> counts(classes.size(), std::array<long, 6>{});
  for (std::size_t i = 0; i < gts.size(); ++i) {
    std::vector<std::size_t> order(dets[i].size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[i][a].score > dets[i][b].score; });
    std::vector<bool> found(gts[i].size(), false);
    for (std::size_t k : order) {
      const auto& d = dets[i][k];
      int kind = 4;
      double cor_iou = -1;
      std::size_t cor_g = 0;
      for (std::size_t j = 0; j < gts[i].size(); ++j) {
        const auto& g = gts[i][j];
        const double v = oracle::iou(d.box, g.box);
        if (g.class_id == d.class_id && !found[j] && v >= 0.5 && v > cor_iou) cor_iou = v, cor_g = j;
      }
      if (cor_iou >= 0) {
        kind = 0;
        found[cor_g] = true;
      } else {
        for (int rule = 1; rule <= 3 && kind == 4; ++rule)
          for (const auto& g : gts[i]) {
            const bool same = g.class_id == d.class_id;
            const bool sib = !same && super[g.class_id] == super[d.class_id];
            const bool applies = rule == 1 ? same : rule == 2 ? sib : true;
            if (applies && oracle::iou(d.box, g.box) >= 0.1) {
              kind = rule;
              break;
            }
          }
      }
      ++counts[static_cast<std::size_t>(d.class_id - 1)][static_cast<std::size_t>(kind)];
    }
    for (std::size_t j = 0; j < gts[i].size(); ++j)
      if (!found[j]) ++counts[static_cast<std::size_t>(gts[i][j].class_id - 1)][5];
  }
  return counts;
}

/// Random small detection scene: boxes on a coarse grid so that exact IoU
/// ties and threshold-boundary cases appear.
struct Scene {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> gts;
};

inline Scene random_scene(std::mt19937_64& rng, int num_classes, int images = 2, int max_dets = 5, int max_gts = 3) {
  auto ri = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto box = [&] {
    const double x1 = ri(0, 8) * 2, y1 = ri(0, 8) * 2;
    return BBox{x1, y1, x1 + ri(1, 6) * 2, y1 + ri(1, 6) * 2};
  };
  Scene s;
  s.dets.resize(static_cast<std::size_t>(images));
  s.gts.resize(static_cast<std::size_t>(images));
  for (int i = 0; i < images; ++i) {
    const int ng = ri(0, max_gts), nd = ri(0, max_dets);
    for (int g = 0; g < ng; ++g) {
      const int c = ri(1, num_classes);
      s.gts[static_cast<std::size_t>(i)].push_back({box(), c, defeat::supercategory_of(c)});
    }
    for (int d = 0; d < nd; ++d) {
      Detection det;
      // Half the detections jitter a gt so that matches actually happen.
      if (ng && ri(0, 1)) {
        const auto& g = s.gts[static_cast<std::size_t>(i)][static_cast<std::size_t>(ri(0, ng - 1))];
        const double dx = ri(-2, 2), dy = ri(-2, 2);
        det.box = {g.box.x1 + dx, g.box.y1 + dy, g.box.x2 + dx + ri(-1, 1), g.box.y2 + dy};
        det.class_id = ri(0, 2) ? g.class_id : ri(1, num_classes);
      } else {
        det.box = box();
        det.class_id = ri(1, num_classes);
      }
      det.score = ri(1, 10) / 10.0;
      s.dets[static_cast<std::size_t>(i)].push_back(det);
    }
    std::stable_sort(s.dets[static_cast<std::size_t>(i)].begin(), s.dets[static_cast<std::size_t>(i)].end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
  }
  return s;
}

}  // namespace oracle
