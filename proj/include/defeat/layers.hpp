#pragma once

#include <span>

#include <Eigen/Core>

#include "defeat/tensor.hpp"

namespace defeat {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvShape {
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int cin = 0;
  int cout = 0;

  int out_dim(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  std::size_t weight_count() const { return std::size_t(kernel) * kernel * cin * cout; }
};

/// Saved state of one convolution for the backward pass.
struct ConvCache {
  int in_h = 0, in_w = 0;
  MatrixRM columns;  // im2col of the input, (out_h*out_w) x (k*k*cin)
};

/// 2-D convolution, weights laid out [ky][kx][cin][cout], optional bias.
Tensor conv_forward(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
                    const ConvShape& shape, ConvCache* cache = nullptr);

/// Accumulates into dweight/dbias and returns the input gradient.
Tensor conv_backward(const Tensor& dy, std::span<const double> weight, const ConvShape& shape,
                     const ConvCache& cache, std::span<double> dweight, std::span<double> dbias,
                     bool need_input_grad = true);

void relu_inplace(Tensor& t);
/// Zeroes dy wherever the (post-activation) output was not positive.
void relu_backward_inplace(Tensor& dy, const Tensor& y);

Tensor upsample2_nearest(const Tensor& x);
Tensor upsample2_nearest_backward(const Tensor& dy);

}  // namespace defeat
