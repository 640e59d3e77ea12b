#pragma once

#include <optional>
#include <vector>

#include "msdet/tensor.hpp"

namespace msdet {

enum class ElementwiseOp { add, sub, mul, silu, leaky_relu, sigmoid };

/// Dispatcher over the elementwise family. Binary ops require `b`.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const std::optional<Tensor>& b = std::nullopt);

// Binary ops accept equal shapes, or one operand whose shape (after dropping
// leading 1s) is a suffix of the other's; the smaller one is tiled.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor silu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.1);
Tensor sigmoid(const Tensor& a);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank 2
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);

/// Slice `index` along axis 0, dropping that axis.
Tensor select(const Tensor& a, std::size_t index);
/// Inverse of select: stacks equal-shaped tensors along a new axis 0.
Tensor stack(const std::vector<Tensor>& parts);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

/// Output extent floor((h + 2p - RF)/s) + 1 with RF = (r-1)(k-1)+k. Throws
/// when the window does not fit.
std::size_t conv_output_size(std::size_t h, std::size_t kernel, const Conv2dOptions& opts);

/// Zero-padded dilated cross-correlation.
/// x: [C_in,H,W] or [N,C_in,H,W]; w: [C_out,C_in,M,N']; bias: [C_out] or undefined.
/// y(m,n) = sum_{c,i,j} x(c, s*m + r*i - p, s*n + r*j - p) * w(c,i,j) + bias.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOptions& opts);

/// Max pooling over a k×k window with implicit -inf padding. Backward routes
/// to the first maximal element in window scan order.
Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding);

Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Concatenate along the channel axis (axis 0 of rank-3, axis 1 of rank-4).
Tensor concat_channels(const std::vector<Tensor>& parts);

enum class Mode { train, eval };

struct BatchNormParams {
  Tensor weight;        // [C], trainable
  Tensor bias;          // [C], trainable
  Tensor running_mean;  // [C], buffer
  Tensor running_var;   // [C], buffer
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormParams identity(std::size_t channels);
};

/// Per-channel normalization over (N,H,W). Training mode uses biased batch
/// statistics and updates the running buffers; eval mode reads them only.
Tensor batchnorm2d(const Tensor& x, BatchNormParams& params, Mode mode);

}  // namespace msdet
