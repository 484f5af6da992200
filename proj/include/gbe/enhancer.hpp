#pragma once

// Image enhancement network: a multi-branch high-resolution trunk whose
// normalisation layers are modulated by encoded G-buffers (RAD), plus the
// controlled-experiment variants (concatenated input, SPADE, plain affine norm).

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gbe/encoder.hpp"

namespace gbe {

enum class NormKind {
  rad,           // gamma, beta predicted from encoded G-buffers
  group_affine,  // group norm with learned per-channel affine terms
  instance,      // instance norm with learned per-channel affine terms
  spade,         // gamma, beta predicted from raw G-buffers
};

std::string norm_kind_name(NormKind k);
NormKind parse_norm_kind(const std::string& s);

/// Largest divisor of `channels` that does not exceed `max_groups`.
int group_count(int channels, int max_groups = 8);

/// Rendering-aware denormalisation: gamma(g) * GN(x) + beta(g), where g passes
/// through residual blocks before two 1x1 convolutions emit gamma and beta.
class RadModule {
 public:
  RadModule() = default;
  RadModule(int g_channels, int x_channels, int blocks, int max_groups, Rng& rng);

  Var forward(const Var& x, const Var& g);
  void collect(ParamSet& ps, const std::string& prefix);

  /// Modulation maps (gamma, beta) for encoded features g.
  std::pair<Var, Var> modulation(const Var& g);

  std::vector<ResidualBlock> blocks;
  Conv2d to_gamma, to_beta;
  int groups = 1;
};

/// out = gamma(g) * GN(x) + beta(g); throws ShapeError on a resolution mismatch.
Var rad_forward(const Var& x, const Var& g, RadModule& m);

/// Inputs available to every normalisation layer during one forward pass.
struct NormContext {
  const FeaturePyramid* pyramid = nullptr;  // encoded G-buffers (RAD)
  const Var* gbuffers = nullptr;            // raw G-buffer stack at full resolution (SPADE)
  int height = 0, width = 0;
};

class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(NormKind kind, int channels, int scale, int g_channels, int rad_blocks, int spade_hidden,
            int max_groups, Rng& rng);

  Var forward(const Var& x, const NormContext& ctx);
  void collect(ParamSet& ps, const std::string& prefix);

  [[nodiscard]] NormKind kind() const { return kind_; }
  [[nodiscard]] int scale() const { return scale_; }

  RadModule rad;
  Var gamma, beta;              // affine kinds
  Conv2d spade_shared, spade_gamma, spade_beta;

 private:
  NormKind kind_ = NormKind::group_affine;
  int scale_ = 1;
  int groups_ = 1;
};

/// conv-norm-relu-conv-norm, identity skip, relu.
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(int channels, int scale, const std::function<NormLayer(int, int)>& make_norm, Rng& rng);

  Var forward(const Var& x, const NormContext& ctx);
  void collect(ParamSet& ps, const std::string& prefix);

  Conv2d conv1, conv2;
  NormLayer norm1, norm2;
};

struct EnhancerConfig {
  /// Downsampling factor of every branch, starting at 1 and doubling.
  std::vector<int> scales{1, 2, 4, 8};
  std::vector<int> channels{16, 32, 64, 128};
  int blocks_per_stage = 2;
  int rad_blocks = 3;
  int max_groups = 8;
  int spade_hidden = 16;
  NormKind norm = NormKind::rad;
  /// Image input channels: 3, or 3 + G-buffer channels for the concatenated variant.
  int in_channels = 3;
  /// Factor on the He-initialised output convolution; small values start the
  /// residual output close to the input image.
  double output_init_scale = 0.01;

  void validate() const;
};

/// Multi-branch trunk. Branch b runs at 1/scales[b] resolution; every basic
/// block, the stem and every transition normalise with the layer bound to
/// their branch scale.
class Enhancer {
 public:
  Enhancer() = default;
  /// `g_channels[b]`: encoded G-buffer width at branch b (RAD only).
  Enhancer(const EnhancerConfig& cfg, const std::vector<int>& g_channels, Rng& rng);

  /// `input`: (1, in_channels, H, W) whose first three channels are the image.
  Var forward(const Var& input, const NormContext& ctx);
  void collect(ParamSet& ps, const std::string& prefix);

  [[nodiscard]] const EnhancerConfig& config() const { return cfg_; }
  /// Resolution of branch 0 after the stem for an H x W input (structural check).
  [[nodiscard]] std::pair<int, int> stem_resolution(int h, int w) const;

 private:
  struct Fuse {
    int from = 0, to = 0;
    std::vector<Conv2d> convs;  // one 1x1 (upsampling) or a stride-2 chain
  };
  struct Stage {
    std::vector<std::vector<BasicBlock>> branches;
    std::vector<Fuse> fuses;
  };
  struct Transition {
    Conv2d conv;
    NormLayer norm;
  };

  EnhancerConfig cfg_;
  Conv2d stem_conv_;
  NormLayer stem_norm_;
  std::vector<Stage> stages_;
  std::vector<Transition> transitions_;
  Conv2d head1_, head2_;
};

/// Which network ingests the G-buffers and how.
enum class GeneratorVariant { rad, concat, no_gbuffer, spade, group_affine };

std::string generator_variant_name(GeneratorVariant v);
GeneratorVariant parse_generator_variant(const std::string& s);

struct GeneratorConfig {
  GeneratorVariant variant = GeneratorVariant::rad;
  EncoderConfig encoder;
  EnhancerConfig enhancer;
};

/// Encoder plus trunk, assembled for one variant.
class Generator {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& cfg, Rng& rng);

  /// image (1,3,H,W), gbuffers (1,14,H,W), masks (1,streams,H,W) -> (1,3,H,W) in [0,1].
  Var forward(const Var& image, const Var& gbuffers, const Tensor& masks);
  void collect(ParamSet& ps, const std::string& prefix = "generator");

  [[nodiscard]] const GeneratorConfig& config() const { return cfg_; }

  std::optional<GBufferEncoder> encoder;
  Enhancer trunk;

 private:
  GeneratorConfig cfg_;
};

}  // namespace gbe
