#include <doctest.h>

#include <random>

#include "defeat/region_masks.hpp"
#include "oracles.hpp"

using namespace defeat;

namespace {

std::vector<BBox> random_boxes(std::mt19937_64& rng, int n, double extent) {
  std::uniform_real_distribution<double> u(-0.1 * extent, extent);
  std::vector<BBox> out;
  for (int i = 0; i < n; ++i) {
    const double x1 = u(rng), y1 = u(rng);
    out.push_back({x1, y1, x1 + std::abs(u(rng)) * 0.6 + 0.5, y1 + std::abs(u(rng)) * 0.6 + 0.5});
  }
  return out;
}

}  // namespace

TEST_CASE("ground-truth mask matches the centre-in-box oracle") {
  std::mt19937_64 rng(17);
  for (int n = 0; n < 300; ++n) {
    const int stride = 1 << std::uniform_int_distribution<int>(0, 4)(rng);
    const int h = std::uniform_int_distribution<int>(1, 12)(rng), w = std::uniform_int_distribution<int>(1, 12)(rng);
    const auto boxes = random_boxes(rng, std::uniform_int_distribution<int>(0, 4)(rng), stride * std::max(h, w));
    const auto m = make_gt_mask(boxes, h, w, stride, 1);
    CHECK(m.values == oracle::gt_mask(boxes, h, w, stride));
    CHECK(m.level == 1);
    CHECK(m.stride == stride);
  }
}

TEST_CASE("ground-truth mask: boundaries, empty input, union and monotonicity") {
  // Box edge exactly on a cell centre excludes that cell.
  const std::vector<BBox> edge{{4, 4, 12, 12}};
  const auto m = make_gt_mask(edge, 2, 2, 8);
  CHECK(m.values == std::vector<std::uint8_t>{0, 0, 0, 0});
  const std::vector<BBox> inside{{3.9, 3.9, 12.1, 12.1}};
  CHECK(make_gt_mask(inside, 2, 2, 8).ones() == 4);
  CHECK(make_gt_mask(std::vector<BBox>{}, 3, 3, 8).ones() == 0);

  std::mt19937_64 rng(9);
  for (int n = 0; n < 100; ++n) {
    const auto a = random_boxes(rng, 2, 64), b = random_boxes(rng, 2, 64);
    std::vector<BBox> ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    const auto ma = make_gt_mask(a, 8, 8, 8), mb = make_gt_mask(b, 8, 8, 8), mab = make_gt_mask(ab, 8, 8, 8);
    for (std::size_t i = 0; i < mab.values.size(); ++i) CHECK(mab.values[i] == (ma.values[i] | mb.values[i]));
  }
}

TEST_CASE("level assignment") {
  const std::vector<int> strides{8, 16};
  const auto thr = level_thresholds(strides);
  REQUIRE(thr.size() == 1);
  CHECK(thr[0] == doctest::Approx(32.0).epsilon(1e-12));
  CHECK(assign_level({0, 0, 8, 8}, strides) == 0);
  CHECK(assign_level({0, 0, 64, 64}, strides) == 1);
  CHECK(assign_level({0, 0, 31.9, 31.9}, strides) == 0);
  const std::vector<int> one{8};
  CHECK(assign_level({0, 0, 500, 500}, one) == 0);

  std::mt19937_64 rng(2);
  const auto boxes = random_boxes(rng, 40, 128);
  const std::vector<int> three{8, 16, 32};
  const auto parts = assign_boxes_to_levels(boxes, three);
  REQUIRE(parts.size() == 3);
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size();
  CHECK(total == boxes.size());
  CHECK(assign_boxes_to_levels(std::vector<BBox>{}, strides)[0].empty());
}

TEST_CASE("random mask") {
  CHECK(make_random_mask(8, 8, 0.0, 1).ones() == 0);
  CHECK(make_random_mask(8, 8, 1.0, 1).ones() == 64);
  const auto a = make_random_mask(8, 8, 0.25, 42), b = make_random_mask(8, 8, 0.25, 42);
  CHECK(a.ones() == 16);
  CHECK(a == b);
  CHECK(make_random_mask(8, 8, 0.25, 43).values != a.values);
  CHECK(make_random_mask(5, 3, 0.5, 1).ones() == 8);  // round(7.5)
  CHECK_THROWS_AS(make_random_mask(4, 4, 1.5, 1), ContractViolation);
}

TEST_CASE("mask element counts") {
  const auto m = make_full_mask(3, 2, 1);
  CHECK(m.n_obj(4) == 24);
  CHECK(m.n_bg(4) == 0);
  const auto z = make_full_mask(3, 2, 0);
  CHECK(z.n_bg(2) == 12);
}
