#pragma once

// Adversarial training: least-squares GAN losses, a feature-space structure
// loss against the rendered input, R1 on real features, per-network global
// gradient clipping, Adam with a halving schedule and accuracy-driven
// skipping of discriminator updates.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gbe/enhancer.hpp"
#include "gbe/metrics.hpp"
#include "gbe/sampler.hpp"

namespace gbe {

struct ThrottleConfig {
  double r_target = 0.8;
  double gain = 2.0;
  double p_max = 0.9;
  double ema_decay = 0.99;
};

struct TrainConfig {
  double lpips_weight = 5.0;
  AdamConfig adam{};
  double lr0 = 1e-4;
  long lr_halving_period = 100000;
  /// Generator steps use lr_at(...) * generator_lr_scale; discriminators use lr_at(...).
  double generator_lr_scale = 1.0;
  double grad_clip = 1000.0;
  double gp_weight = 0.06;
  int batch_size = 1;
  long total_iters = 1000000;
  long checkpoint_every = 0;  // 0 disables periodic checkpoints
  ThrottleConfig throttle{};

  void validate() const;
};

/// lr0 * 2^-floor(iteration / lr_halving_period).
double lr_at(const TrainConfig& cfg, long iteration);

/// clamp(gain * (r - r_target), 0, p_max).
double throttle_probability(double r, const ThrottleConfig& cfg);

/// Sum over levels of mean((s - 1)^2).
Var generator_adversarial_loss(const std::vector<Var>& fake_scores);
/// mean((s_real - 1)^2) + mean(s_fake^2).
Var discriminator_adversarial_loss(const Var& real_score, const Var& fake_score);

/// Mean over taps of the mean squared difference between channel-unit-normalised features.
Var perceptual_distance(const std::vector<Var>& taps_a, const std::vector<Var>& taps_b);

/// Score function of one discriminator input.
using ScoreFn = std::function<Var(const Var&)>;

/// ||d sum(score(x)) / dx||^2. Parameter gradients are left untouched. The
/// trainer passes a random-sign projection of the score map scaled by
/// 1/sqrt(pixels), which makes this an unbiased estimate of the per-pixel
/// mean of ||d s_p / dx||^2.
double r1_penalty(const ScoreFn& score, const Tensor& x);

/// Adds weight * d(R1)/d(theta) to the parameter gradients of `score` using
/// a central-difference Hessian-vector product along the input gradient.
/// Returns the penalty value.
double accumulate_r1_gradient(const ScoreFn& score, const Tensor& x, double weight, double rel_step = 1e-5);

/// A registered controlled-experiment configuration.
struct ConditionSpec {
  std::string name;     // command-line name, e.g. "unif-crop-64"
  std::string display;  // table label
  GeneratorVariant variant = GeneratorVariant::rad;
  EnsembleKind discriminator = EnsembleKind::perceptual;
  bool projection = true;
  CropPolicy policy = CropPolicy::matched;
  int crop = 0;  // 0: backbone receptive field
  bool throttle = true;
};

/// Accepts ours, unif-crop-<N>, no-gbuffer, concat, spade, patchgan, no-projection, no-adaptive-backprop.
ConditionSpec resolve_condition(const std::string& name);
std::vector<std::string> condition_names();

struct ModelConfig {
  GeneratorConfig generator;
  BackboneConfig backbone;
  EnsembleConfig discriminator;
  int patch_grid_step = 8;        // matched pools: grid of crops per image
  double match_threshold = 0.5;
};

/// Small configuration that trains on 64 x 64 toy scenes on a single CPU core.
ModelConfig toy_model_config();
TrainConfig toy_train_config();

struct TrainingData {
  std::vector<SceneSample> synthetic;
  std::vector<SceneSample> real;
};

/// Embedded patches of both datasets for matched sampling.
struct PatchPools {
  std::vector<PatchRef> synthetic;
  std::vector<PatchRef> real;
};

/// Grid crops of every image with unit-normalised backbone embeddings.
std::vector<PatchRef> embed_dataset_patches(const std::vector<SceneSample>& samples, int dataset,
                                            PerceptualBackbone& backbone, int crop, int step);

/// Subtracts the mean embedding of both pools and re-normalises every row.
/// Pooled post-ReLU features share a large positive mean direction that
/// otherwise puts nearly all cosine similarities above the match threshold.
void center_embeddings(PatchPools& pools);

/// Embeds both datasets and centres the result.
PatchPools build_patch_pools(const TrainingData& data, PerceptualBackbone& backbone, int crop, int step);

struct StepLog {
  long iteration = 0;
  double lr = 0.0;
  double g_adversarial = 0.0;
  double g_perceptual = 0.0;
  double g_total = 0.0;
  double g_grad_norm = 0.0;
  std::vector<double> d_loss, r1, accuracy, p_skip;
  std::vector<int> skipped;
};

std::string log_csv_header(int levels);
std::string log_csv_row(const StepLog& s);

/// Raised when a loss or penalty stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Contents of a checkpoint file after checksum verification.
struct CheckpointData {
  long iteration = 0;
  std::string condition;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor>> tensors;  // in file order
};

/// Throws std::runtime_error for missing, truncated or corrupt files.
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Copies the "generator." entries of a checkpoint into `generator`; every
/// generator parameter and buffer must be present with a matching shape.
void load_generator(const std::filesystem::path& path, Generator& generator);

class Trainer {
 public:
  /// `data` must outlive the trainer. `pools` is computed when absent and the policy is matched.
  Trainer(const TrainConfig& train, const ModelConfig& model, const ConditionSpec& condition,
          const TrainingData& data, std::uint64_t seed, std::optional<PatchPools> pools = std::nullopt);

  StepLog step();
  /// Runs until `iteration() == until`, calling `on_step` after each step.
  void run(long until, const std::function<void(const StepLog&)>& on_step = {});

  /// Full-frame enhancement without gradient tracking.
  Tensor enhance(const SceneSample& sample);

  void save_checkpoint(const std::filesystem::path& path);
  void load_checkpoint(const std::filesystem::path& path);

  /// Every trainable parameter and persistent buffer, in checkpoint order.
  ParamSet& state() {
    sync_tracker_buffer(true);
    return state_;
  }
  [[nodiscard]] long iteration() const { return iteration_; }
  [[nodiscard]] int crop() const { return crop_; }
  [[nodiscard]] int levels() const { return ensemble_.levels(); }

  Generator& generator() { return generator_; }
  DiscriminatorEnsemble& ensemble() { return ensemble_; }
  RandomBackbone& backbone() { return *backbone_; }
  AccuracyTracker& accuracy() { return tracker_; }
  [[nodiscard]] const ConditionSpec& condition() const { return condition_; }
  [[nodiscard]] const PairSampler* pair_sampler() const { return pair_sampler_.get(); }
  [[nodiscard]] const PatchPools& pools() const { return pools_; }

  /// Replaces the throttle draw with a fixed skip probability (tests).
  void force_skip_probability(std::optional<double> p) { forced_skip_ = p; }

 private:
  struct Draw {
    int synthetic_image, real_image;
    PatchRef synthetic_patch, real_patch;
  };
  Draw draw_pair();
  void sync_tracker_buffer(bool to_buffer);

  TrainConfig train_;
  ModelConfig model_;
  ConditionSpec condition_;
  const TrainingData* data_;
  Rng rng_;
  std::shared_ptr<RandomBackbone> backbone_;
  Generator generator_;
  DiscriminatorEnsemble ensemble_;
  AccuracyTracker tracker_;
  std::vector<Tensor> synthetic_gbuffers_;
  int crop_ = 0;
  PatchPools pools_;
  std::unique_ptr<MatchIndex> index_;
  std::unique_ptr<PairSampler> pair_sampler_;
  ParamSet generator_params_;
  std::vector<ParamSet> level_params_;
  std::unique_ptr<Adam> generator_opt_;
  std::vector<std::unique_ptr<Adam>> level_opts_;
  ParamSet state_;
  Tensor iteration_buf_{Shape{1, 1, 1, 1}};
  Tensor tracker_buf_;
  long iteration_ = 0;
  std::optional<double> forced_skip_;
};

}  // namespace gbe
