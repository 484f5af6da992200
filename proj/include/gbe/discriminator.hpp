#pragma once

// Perceptual discriminator: a frozen feature backbone and label provider
// feed one discriminator per backbone tap; each score map is the head output
// plus the inner product of stem features with per-class label embeddings.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gbe/nn.hpp"
#include "gbe/scenegen.hpp"

namespace gbe {

/// Frozen image -> multi-level features map. Gradients reach the image but
/// never the backbone's own weights.
class PerceptualBackbone {
 public:
  virtual ~PerceptualBackbone() = default;
  /// One tensor per tap, resolution strictly decreasing.
  virtual std::vector<Var> taps(const Var& image) = 0;
  [[nodiscard]] virtual int num_taps() const = 0;
  [[nodiscard]] virtual int tap_channels(int k) const = 0;
  /// Pixel stride of tap k relative to the input.
  [[nodiscard]] virtual int tap_stride(int k) const = 0;
  /// Receptive field of the deepest tap in input pixels.
  [[nodiscard]] virtual int receptive_field() const = 0;
};

struct BackboneConfig {
  std::vector<int> widths{64, 128, 256, 512, 512};
  int convs_per_stage = 2;
  std::uint64_t seed = 20210507;
};

/// Fixed-seed randomly initialised convolutional pyramid. Stage k > 0 starts
/// with a stride-2 convolution; every tap is the last ReLU of its stage.
class RandomBackbone final : public PerceptualBackbone {
 public:
  explicit RandomBackbone(const BackboneConfig& cfg = {});

  std::vector<Var> taps(const Var& image) override;
  [[nodiscard]] int num_taps() const override { return static_cast<int>(cfg_.widths.size()); }
  [[nodiscard]] int tap_channels(int k) const override { return cfg_.widths.at(static_cast<std::size_t>(k)); }
  [[nodiscard]] int tap_stride(int k) const override { return 1 << k; }
  [[nodiscard]] int receptive_field() const override;
  /// Receptive field of tap k by the standard recurrence.
  [[nodiscard]] int tap_receptive_field(int k) const;

  /// FNV-1a over all weights, for frozen-provider checks.
  [[nodiscard]] std::uint64_t weight_hash() const;
  [[nodiscard]] const BackboneConfig& config() const { return cfg_; }

  /// Per-stage convolutions; exposed for probing tests.
  std::vector<std::vector<Conv2d>> stages;

 private:
  BackboneConfig cfg_;
};

/// Source of per-pixel class maps over the fixed palette.
class LabelProvider {
 public:
  virtual ~LabelProvider() = default;
  virtual LabelMap labels(const SceneSample& sample) = 0;
};

/// Toy data carries exact labels.
class GroundTruthLabels final : public LabelProvider {
 public:
  LabelMap labels(const SceneSample& sample) override { return sample.labels; }
};

/// Content hash of an image used as the label cache key.
std::uint64_t image_hash(const Tensor& image);

/// One LBL1 file per image under `dir`, named by the image's content hash.
class LabelCache {
 public:
  explicit LabelCache(std::filesystem::path dir);
  void store(const Tensor& image, const LabelMap& labels) const;
  [[nodiscard]] std::optional<LabelMap> load(const Tensor& image) const;
  [[nodiscard]] std::filesystem::path path_for(const Tensor& image) const;

 private:
  std::filesystem::path dir_;
};

/// Serves cached maps, computing and storing missing entries through `inner`.
class CachedLabelProvider final : public LabelProvider {
 public:
  CachedLabelProvider(std::shared_ptr<LabelProvider> inner, LabelCache cache);
  LabelMap labels(const SceneSample& sample) override;

 private:
  std::shared_ptr<LabelProvider> inner_;
  LabelCache cache_;
};

struct LevelConfig {
  int in_channels = 64;
  int width = 256;  // stem width and embedding dimension
  int num_classes = kNumClasses;
  bool projection = true;
  std::vector<int> strides{1, 2, 1, 2, 1};
  double slope = 0.2;
  int max_groups = 8;
};

/// Five conv-groupnorm-leakyrelu layers produce y; conv-leakyrelu-conv
/// produces z; the score is z plus <y, e(label)> per pixel.
class LevelDiscriminator {
 public:
  LevelDiscriminator() = default;
  LevelDiscriminator(const LevelConfig& cfg, Rng& rng);

  struct Output {
    Var y, z, score;
  };
  /// `labels` may be null when projection is disabled.
  Output forward(const Var& features, const LabelMap* labels);
  void collect(ParamSet& ps, const std::string& prefix);

  [[nodiscard]] const LevelConfig& config() const { return cfg_; }

  std::vector<Conv2d> stem;
  std::vector<Var> gn_gamma, gn_beta;
  Conv2d head1, head2;
  Var embedding;  // (classes, width, 1, 1)

 private:
  LevelConfig cfg_;
  int groups_ = 1;
};

/// Per-level score maps.
struct Verdict {
  std::vector<Var> scores;
};

/// Running per-level accuracy r_k in [0, 1].
class AccuracyTracker {
 public:
  explicit AccuracyTracker(int levels = 0, double decay = 0.99, double initial = 0.5);
  /// Fraction of pixels classified correctly: real if score > threshold.
  static double correctness(const Tensor& score, bool real, double threshold = 0.5);
  void update(int level, const Tensor& score, bool real);
  void update(const Verdict& v, bool real);
  [[nodiscard]] double value(int level) const { return r_.at(static_cast<std::size_t>(level)); }
  [[nodiscard]] const std::vector<double>& values() const { return r_; }
  std::vector<double>& mutable_values() { return r_; }
  [[nodiscard]] double decay() const { return decay_; }

 private:
  std::vector<double> r_;
  double decay_;
};

enum class EnsembleKind { perceptual, patchgan };

struct EnsembleConfig {
  EnsembleKind kind = EnsembleKind::perceptual;
  int width = 256;
  bool projection = true;
  int num_classes = kNumClasses;
  int patchgan_scales = 4;
};

/// One discriminator per level. Perceptual levels read backbone taps;
/// PatchGAN levels read the image at successively halved resolutions.
class DiscriminatorEnsemble {
 public:
  DiscriminatorEnsemble() = default;
  DiscriminatorEnsemble(const EnsembleConfig& cfg, std::shared_ptr<PerceptualBackbone> backbone, Rng& rng);

  [[nodiscard]] int levels() const { return static_cast<int>(nets_.size()); }
  /// Per-level inputs for an image (1, 3, H, W).
  std::vector<Var> level_inputs(const Var& image);
  Var score_level(int k, const Var& input, const LabelMap* labels);
  /// Applies the backbone once, then every level.
  Verdict score(const Var& image, const LabelMap* labels);

  LevelDiscriminator& level(int k) { return nets_.at(static_cast<std::size_t>(k)); }
  void collect_level(int k, ParamSet& ps, const std::string& prefix = "discriminator");
  [[nodiscard]] const EnsembleConfig& config() const { return cfg_; }
  [[nodiscard]] const std::shared_ptr<PerceptualBackbone>& backbone() const { return backbone_; }

 private:
  EnsembleConfig cfg_;
  std::shared_ptr<PerceptualBackbone> backbone_;
  std::vector<LevelDiscriminator> nets_;
};

}  // namespace gbe
