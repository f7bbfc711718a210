#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "defeat/errors.hpp"

namespace defeat {

/// Dense H x W x C activation stored row-major with channels innermost
/// (index = (y * w + x) * c + ch).
struct Tensor {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int h_, int w_, int c_, double fill = 0.0)
      : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(int y, int x, int ch) const {
    return (static_cast<std::size_t>(y) * w + x) * c + ch;
  }
  double& at(int y, int x, int ch) { return data[index(y, x, ch)]; }
  double at(int y, int x, int ch) const { return data[index(y, x, ch)]; }

  std::span<double> pixel(int y, int x) { return {data.data() + index(y, x, 0), static_cast<std::size_t>(c)}; }
  std::span<const double> pixel(int y, int x) const {
    return {data.data() + index(y, x, 0), static_cast<std::size_t>(c)};
  }

  bool same_shape(const Tensor& o) const { return h == o.h && w == o.w && c == o.c; }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  Tensor& operator+=(const Tensor& o) {
    require(same_shape(o), "Tensor += shape mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.h, t.w, t.c); }

}  // namespace defeat
