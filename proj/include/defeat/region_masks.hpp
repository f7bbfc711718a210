#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "defeat/bbox.hpp"

namespace defeat {

/// Per-level object indicator over a feature map's H x W grid.
struct BinaryMask {
  int h = 0;
  int w = 0;
  int level = 0;
  int stride = 1;
  std::vector<std::uint8_t> values;  // row-major, 0 or 1

  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }
  std::size_t ones() const;
  /// Element counts over a feature map with `channels` channels.
  std::size_t n_obj(int channels) const { return ones() * static_cast<std::size_t>(channels); }
  std::size_t n_bg(int channels) const {
    return (values.size() - ones()) * static_cast<std::size_t>(channels);
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// Scale factor b such that the split between adjacent levels with strides
/// s_l, s_{l+1} sits at b * sqrt(s_l * s_{l+1}) pixels of sqrt(area).
/// The default puts the {8, 16} split at 32 px.
inline constexpr double kDefaultLevelScale = 2.8284271247461903;

/// Level split points (sqrt-area, pixels); size = strides.size() - 1.
std::vector<double> level_thresholds(std::span<const int> strides, double base_scale = kDefaultLevelScale);

/// Index of the pyramid level responsible for `box`.
int assign_level(const BBox& box, std::span<const int> strides, double base_scale = kDefaultLevelScale);

/// Partitions boxes across levels; result has strides.size() entries.
std::vector<std::vector<BBox>> assign_boxes_to_levels(std::span<const BBox> boxes, std::span<const int> strides,
                                                      double base_scale = kDefaultLevelScale);

/// Cell (i, j) is 1 iff its pixel-space centre lies strictly inside any box.
BinaryMask make_gt_mask(std::span<const BBox> boxes, int h, int w, int stride, int level = 0);

/// Exactly round(fg_fraction * h * w) ones, positions drawn from `seed`.
BinaryMask make_random_mask(int h, int w, double fg_fraction, std::uint64_t seed, int stride = 1, int level = 0);

BinaryMask make_full_mask(int h, int w, std::uint8_t value, int stride = 1, int level = 0);

}  // namespace defeat
