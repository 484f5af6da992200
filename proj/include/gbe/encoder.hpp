#pragma once

// G-buffer encoder: per-class streams of residual blocks fused by object
// masks, followed by a residual chain that emits one feature tensor per scale.

#include <array>
#include <map>
#include <vector>

#include "gbe/nn.hpp"

namespace gbe {

/// Two spectrally normalised 3x3 convolutions with ReLU, plus a skip path
/// that is the identity unless channels or resolution change (then a 1x1
/// spectrally normalised projection).
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int cin, int cout, int stride, Rng& rng);

  Var forward(const Var& x);
  void collect(ParamSet& ps, const std::string& prefix);

  [[nodiscard]] bool has_projection() const { return has_proj_; }
  [[nodiscard]] int in_channels() const { return conv1.in_channels(); }
  [[nodiscard]] int out_channels() const { return conv2.out_channels(); }

  Conv2d conv1, conv2, proj;

 private:
  bool has_proj_ = false;
};

/// Feature tensors keyed by downsampling factor (1, 2, 4, 8).
using FeaturePyramid = std::map<int, Var>;

struct EncoderConfig {
  int in_channels = 14;
  int n_streams = 5;
  /// Downsampling factors of the emitted tensors, ascending powers of two.
  std::vector<int> scales{1, 2, 4, 8};
  /// Width at factor 1; doubles with every halving unless `channels` is set.
  int base_channels = 16;
  /// Optional explicit width per level (factor 1, 2, 4, ...).
  std::vector<int> channels;

  [[nodiscard]] int levels() const;
  [[nodiscard]] int width(int level) const;
  [[nodiscard]] int width_at_scale(int scale) const;
  void validate() const;
};

/// Area-averages masks (1, streams, H, W) down to (h, w); H, W must be integer multiples.
Tensor downsample_masks(const Tensor& masks, int h, int w);

class GBufferEncoder {
 public:
  GBufferEncoder() = default;
  GBufferEncoder(const EncoderConfig& cfg, Rng& rng);

  /// `gbuffers`: (1, in_channels, H, W); `masks`: (1, n_streams, H, W) partition.
  FeaturePyramid forward(const Var& gbuffers, const Tensor& masks);
  void collect(ParamSet& ps, const std::string& prefix);

  [[nodiscard]] const EncoderConfig& config() const { return cfg_; }

  /// Per-stream pair of residual blocks; exposed for symmetry tests.
  std::vector<std::array<ResidualBlock, 2>> streams;

 private:
  EncoderConfig cfg_;
  std::vector<ResidualBlock> down_;   // stride-2 blocks, one per level > 0
  std::vector<ResidualBlock> refine_;  // stride-1 block per level
};

}  // namespace gbe
