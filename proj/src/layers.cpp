#include "defeat/layers.hpp"

namespace defeat {

namespace {

using ConstMap = Eigen::Map<const MatrixRM>;
using MutMap = Eigen::Map<MatrixRM>;

void im2col(const Tensor& x, const ConvShape& s, int oh, int ow, MatrixRM& cols) {
  const int k = s.kernel, cin = s.cin;
  cols.setZero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(k) * k * cin);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* row = cols.data() + (static_cast<std::size_t>(oy) * ow + ox) * cols.cols();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= x.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix < 0 || ix >= x.w) continue;
          const double* src = x.data.data() + x.index(iy, ix, 0);
          std::copy(src, src + cin, row + (ky * k + kx) * cin);
        }
      }
    }
  }
}

void col2im(const MatrixRM& dcols, const ConvShape& s, int oh, int ow, Tensor& dx) {
  const int k = s.kernel, cin = s.cin;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* row = dcols.data() + (static_cast<std::size_t>(oy) * ow + ox) * dcols.cols();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= dx.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix < 0 || ix >= dx.w) continue;
          double* dst = dx.data.data() + dx.index(iy, ix, 0);
          const double* src = row + (ky * k + kx) * cin;
          for (int c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace

Tensor conv_forward(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
                    const ConvShape& s, ConvCache* cache) {
  require(x.c == s.cin, "conv_forward: input channels " + std::to_string(x.c) + " != " + std::to_string(s.cin));
  require(weight.size() == s.weight_count(), "conv_forward: weight size mismatch");
  require(bias.empty() || bias.size() == static_cast<std::size_t>(s.cout), "conv_forward: bias size mismatch");
  const int oh = s.out_dim(x.h), ow = s.out_dim(x.w);
  ConvCache local;
  ConvCache& cc = cache ? *cache : local;
  cc.in_h = x.h;
  cc.in_w = x.w;
  im2col(x, s, oh, ow, cc.columns);

  Tensor y(oh, ow, s.cout);
  MutMap out(y.data.data(), static_cast<Eigen::Index>(oh) * ow, s.cout);
  ConstMap w(weight.data(), static_cast<Eigen::Index>(s.kernel) * s.kernel * s.cin, s.cout);
  out.noalias() = cc.columns * w;
  if (!bias.empty()) {
    Eigen::Map<const Eigen::RowVectorXd> b(bias.data(), s.cout);
    out.rowwise() += b;
  }
  return y;
}

Tensor conv_backward(const Tensor& dy, std::span<const double> weight, const ConvShape& s, const ConvCache& cache,
                     std::span<double> dweight, std::span<double> dbias,
                     bool need_input_grad) {
  const Eigen::Index rows = static_cast<Eigen::Index>(dy.h) * dy.w;
  ConstMap g(dy.data.data(), rows, s.cout);
  const Eigen::Index kk = static_cast<Eigen::Index>(s.kernel) * s.kernel * s.cin;
  ConstMap w(weight.data(), kk, s.cout);
  MutMap dw(dweight.data(), kk, s.cout);
  dw.noalias() += cache.columns.transpose() * g;
  if (!dbias.empty()) {
    Eigen::Map<Eigen::RowVectorXd> db(dbias.data(), s.cout);
    db += g.colwise().sum();
  }
  Tensor dx(cache.in_h, cache.in_w, s.cin);
  if (!need_input_grad) return dx;
  MatrixRM dcols = g * w.transpose();
  col2im(dcols, s, dy.h, dy.w, dx);
  return dx;
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.data) v = v > 0 ? v : 0.0;
}

void relu_backward_inplace(Tensor& dy, const Tensor& y) {
  for (std::size_t i = 0; i < dy.data.size(); ++i)
    if (!(y.data[i] > 0)) dy.data[i] = 0.0;
}

Tensor upsample2_nearest(const Tensor& x) {
  Tensor y(x.h * 2, x.w * 2, x.c);
  for (int yy = 0; yy < y.h; ++yy)
    for (int xx = 0; xx < y.w; ++xx) {
      auto src = x.pixel(yy / 2, xx / 2);
      std::copy(src.begin(), src.end(), y.pixel(yy, xx).begin());
    }
  return y;
}

Tensor upsample2_nearest_backward(const Tensor& dy) {
  Tensor dx(dy.h / 2, dy.w / 2, dy.c);
  for (int yy = 0; yy < dy.h; ++yy)
    for (int xx = 0; xx < dy.w; ++xx) {
      auto src = dy.pixel(yy, xx);
      auto dst = dx.pixel(yy / 2, xx / 2);
      for (int c = 0; c < dy.c; ++c) dst[c] += src[c];
    }
  return dx;
}

}  // namespace defeat
