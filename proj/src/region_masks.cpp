#include "defeat/region_masks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "defeat/errors.hpp"

namespace defeat {

std::size_t BinaryMask::ones() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

std::vector<double> level_thresholds(std::span<const int> strides, double base_scale) {
  for (std::size_t l = 1; l < strides.size(); ++l) require(strides[l] > strides[l - 1], "strides must ascend");
  std::vector<double> out;
  for (std::size_t l = 0; l + 1 < strides.size(); ++l)
    out.push_back(base_scale * std::sqrt(double(strides[l]) * double(strides[l + 1])));
  return out;
}

int assign_level(const BBox& box, std::span<const int> strides, double base_scale) {
  const auto thresholds = level_thresholds(strides, base_scale);
  const double side = std::sqrt(box.area());
  int level = 0;
  while (level < static_cast<int>(thresholds.size()) && side >= thresholds[level]) ++level;
  return level;
}

std::vector<std::vector<BBox>> assign_boxes_to_levels(std::span<const BBox> boxes, std::span<const int> strides,
                                                      double base_scale) {
  require(!strides.empty(), "assign_boxes_to_levels: no levels");
  std::vector<std::vector<BBox>> out(strides.size());
  for (const auto& b : boxes) out[assign_level(b, strides, base_scale)].push_back(b);
  return out;
}

BinaryMask make_gt_mask(std::span<const BBox> boxes, int h, int w, int stride, int level) {
  BinaryMask m{h, w, level, stride, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  for (const auto& b : boxes) {
    // Only cells whose centres can fall inside the box need testing.
    const int i0 = std::max(0, static_cast<int>(std::floor(b.y1 / stride - 0.5)));
    const int i1 = std::min(h - 1, static_cast<int>(std::ceil(b.y2 / stride - 0.5)));
    const int j0 = std::max(0, static_cast<int>(std::floor(b.x1 / stride - 0.5)));
    const int j1 = std::min(w - 1, static_cast<int>(std::ceil(b.x2 / stride - 0.5)));
    for (int i = i0; i <= i1; ++i) {
      const double cy = (i + 0.5) * stride;
      if (!(cy > b.y1 && cy < b.y2)) continue;
      for (int j = j0; j <= j1; ++j) {
        const double cx = (j + 0.5) * stride;
        if (cx > b.x1 && cx < b.x2) m.values[static_cast<std::size_t>(i) * w + j] = 1;
      }
    }
  }
  return m;
}

BinaryMask make_random_mask(int h, int w, double fg_fraction, std::uint64_t seed, int stride, int level) {
  require(fg_fraction >= 0.0 && fg_fraction <= 1.0, "fg_fraction must be in [0, 1]");
  const std::size_t cells = static_cast<std::size_t>(h) * w;
  const auto ones = static_cast<std::size_t>(std::lround(fg_fraction * static_cast<double>(cells)));
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  BinaryMask m{h, w, level, stride, std::vector<std::uint8_t>(cells, 0)};
  for (std::size_t k = 0; k < ones; ++k) m.values[order[k]] = 1;
  return m;
}

BinaryMask make_full_mask(int h, int w, std::uint8_t value, int stride, int level) {
  return {h, w, level, stride, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, value)};
}

}  // namespace defeat
