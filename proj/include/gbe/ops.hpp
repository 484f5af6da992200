#pragma once

// Differentiable tensor operations. Each op computes its forward value with
// the kernels in kernels.hpp and registers the matching backward pass.

#include <span>
#include <vector>

#include "gbe/autograd.hpp"

namespace gbe {

/// 2-D convolution, weight (cout, cin, k, k). `bias` may be a null Var.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Sum of equally shaped tensors.
Var add_n(std::span<const Var> parts);

Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
/// Clamp into [0, 1]; gradient passes only strictly inside the interval.
Var clamp01(const Var& x);

/// Group normalisation without affine parameters.
Var group_norm(const Var& x, int groups, double eps = 1e-5);
/// x * gamma + beta with per-channel gamma, beta of shape (1, C, 1, 1).
Var channel_affine(const Var& x, const Var& gamma, const Var& beta);

Var concat(std::span<const Var> parts);
Var slice_channels(const Var& x, int c0, int count);
/// Spatial window [y0, y0+h) x [x0, x0+w).
Var crop(const Var& x, int y0, int x0, int h, int w);

/// Bilinear resampling with half-pixel centres.
Var resize_bilinear(const Var& x, int out_h, int out_w);
/// Non-overlapping k x k average pooling (area downsampling).
Var avg_pool(const Var& x, int k);
/// Mean over the spatial axes, shape (n, c, 1, 1).
Var global_avg_pool(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
/// mean((x - target)^2) as a scalar.
Var mean_squared_to(const Var& x, double target);
/// mean((a - b)^2) as a scalar.
Var mean_squared_diff(const Var& a, const Var& b);

/// Per-pixel division by the channel-vector norm (plus eps).
Var unit_normalize_channels(const Var& x, double eps = 1e-10);

/// Mask-weighted fusion sum_c masks[c] * features[c]. masks: (1, streams, h, w).
Var fuse_streams(std::span<const Var> features, const Tensor& masks);

/// Per-pixel inner product between y (1, E, h, w) and the rows of `table`
/// (classes, E, 1, 1) selected by `labels` (h x w). Output (1, 1, h, w).
Var project_embedding(const Var& y, const Var& table, const LabelMap& labels);

/// Power-iteration state of a spectrally normalised weight.
struct SpectralState {
  Tensor u;  // (rows) left singular vector estimate
};

/// weight / sigma where sigma estimates the top singular value of the
/// weight reshaped to (shape.n, rest). Runs `iterations` power steps and
/// updates `state.u` in place; gradients treat the singular vectors as constant.
Var spectral_normalize(const Var& weight, SpectralState& state, int iterations);

/// Estimated top singular value for the current state (no update).
double spectral_sigma(const Tensor& weight, const SpectralState& state);

}  // namespace gbe
