#include "gbe/discriminator.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "gbe/enhancer.hpp"

namespace gbe {

RandomBackbone::RandomBackbone(const BackboneConfig& cfg) : cfg_(cfg) {
  if (cfg_.widths.empty()) throw ConfigError("backbone needs at least one stage");
  if (cfg_.convs_per_stage < 1) throw ConfigError("backbone needs at least one convolution per stage");
  Rng rng(cfg_.seed);
  int cin = 3;
  for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
    const int c = cfg_.widths[s];
    if (c <= 0) throw ConfigError("backbone widths must be positive");
    std::vector<Conv2d> convs;
    for (int k = 0; k < cfg_.convs_per_stage; ++k) {
      const int stride = (s > 0 && k == 0) ? 2 : 1;
      Conv2d conv(k == 0 ? cin : c, c, 3, stride, rng, true, false);
      conv.weight.set_requires_grad(false);
      conv.bias.set_requires_grad(false);
      convs.push_back(std::move(conv));
    }
    stages.push_back(std::move(convs));
    cin = c;
  }
}

std::vector<Var> RandomBackbone::taps(const Var& image) {
  if (image.shape().c != 3) throw ShapeError("backbone expects an RGB image, got " + image.shape().str());
  Var x = add_scalar(scale(image, 2.0), -1.0);
  std::vector<Var> out;
  out.reserve(stages.size());
  for (auto& stage : stages) {
    for (auto& conv : stage) x = relu(conv.forward(x));
    out.push_back(x);
  }
  return out;
}

int RandomBackbone::tap_receptive_field(int k) const {
  int rf = 1;
  int jump = 1;
  for (int s = 0; s <= k; ++s) {
    for (const auto& conv : stages.at(static_cast<std::size_t>(s))) {
      rf += (conv.kernel() - 1) * jump;
      jump *= conv.stride();
    }
  }
  return rf;
}

int RandomBackbone::receptive_field() const { return tap_receptive_field(num_taps() - 1); }

std::uint64_t RandomBackbone::weight_hash() const {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& stage : stages) {
    for (const auto& conv : stage) {
      h = fnv1a(conv.weight.value().data(), conv.weight.value().numel() * sizeof(double), h);
      h = fnv1a(conv.bias.value().data(), conv.bias.value().numel() * sizeof(double), h);
    }
  }
  return h;
}

std::uint64_t image_hash(const Tensor& image) {
  const Shape s = image.shape();
  const int dims[4] = {s.n, s.c, s.h, s.w};
  std::uint64_t h = fnv1a(dims, sizeof(dims));
  return fnv1a(image.data(), image.numel() * sizeof(double), h);
}

namespace {

constexpr char kLabelMagic[4] = {'L', 'B', 'L', '1'};

}  // namespace

LabelCache::LabelCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path LabelCache::path_for(const Tensor& image) const {
  std::ostringstream name;
  name << std::hex << std::setw(16) << std::setfill('0') << image_hash(image) << ".lbl";
  return dir_ / name.str();
}

// Layout: magic, i32 height, i32 width, i32 ids row-major, u64 FNV-1a of the ids.
void LabelCache::store(const Tensor& image, const LabelMap& labels) const {
  std::filesystem::create_directories(dir_);
  const auto path = path_for(image);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write label cache entry " + tmp);
    const std::int32_t hw[2] = {labels.h, labels.w};
    const std::uint64_t check = fnv1a(labels.ids.data(), labels.ids.size() * sizeof(std::int32_t));
    out.write(kLabelMagic, 4);
    out.write(reinterpret_cast<const char*>(hw), sizeof(hw));
    out.write(reinterpret_cast<const char*>(labels.ids.data()),
              static_cast<std::streamsize>(labels.ids.size() * sizeof(std::int32_t)));
    out.write(reinterpret_cast<const char*>(&check), sizeof(check));
  }
  std::filesystem::rename(tmp, path);
}

std::optional<LabelMap> LabelCache::load(const Tensor& image) const {
  const auto path = path_for(image);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[4];
  std::int32_t hw[2];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(hw), sizeof(hw));
  if (!in || std::memcmp(magic, kLabelMagic, 4) != 0 || hw[0] <= 0 || hw[1] <= 0) {
    throw std::runtime_error("corrupt label cache entry " + path.string());
  }
  LabelMap m(hw[0], hw[1]);
  std::uint64_t check = 0;
  in.read(reinterpret_cast<char*>(m.ids.data()), static_cast<std::streamsize>(m.ids.size() * sizeof(std::int32_t)));
  in.read(reinterpret_cast<char*>(&check), sizeof(check));
  if (!in || check != fnv1a(m.ids.data(), m.ids.size() * sizeof(std::int32_t))) {
    throw std::runtime_error("corrupt label cache entry " + path.string());
  }
  return m;
}

CachedLabelProvider::CachedLabelProvider(std::shared_ptr<LabelProvider> inner, LabelCache cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

LabelMap CachedLabelProvider::labels(const SceneSample& sample) {
  if (auto hit = cache_.load(sample.image)) return *hit;
  LabelMap fresh = inner_->labels(sample);
  cache_.store(sample.image, fresh);
  return fresh;
}

LevelDiscriminator::LevelDiscriminator(const LevelConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.in_channels <= 0 || cfg_.width <= 0 || cfg_.num_classes <= 0) {
    throw ConfigError("level discriminator sizes must be positive");
  }
  if (cfg_.strides.empty()) throw ConfigError("level discriminator needs at least one stem layer");
  groups_ = group_count(cfg_.width, cfg_.max_groups);
  int cin = cfg_.in_channels;
  for (const int s : cfg_.strides) {
    stem.emplace_back(cin, cfg_.width, 3, s, rng, true, false);
    gn_gamma.emplace_back(Tensor({1, cfg_.width, 1, 1}, 1.0), true);
    gn_beta.emplace_back(Tensor({1, cfg_.width, 1, 1}), true);
    cin = cfg_.width;
  }
  head1 = Conv2d(cfg_.width, cfg_.width, 3, 1, rng, true, false);
  head2 = Conv2d(cfg_.width, 1, 1, 1, rng, true, false);
  if (cfg_.projection) {
    Tensor table({cfg_.num_classes, cfg_.width, 1, 1});
    const double stddev = 1.0 / cfg_.width;
    for (auto& v : table.values()) v = rng.normal(0.0, stddev);
    embedding = Var(std::move(table), true);
  }
}

LevelDiscriminator::Output LevelDiscriminator::forward(const Var& features, const LabelMap* labels) {
  Var y = features;
  for (std::size_t i = 0; i < stem.size(); ++i) {
    y = stem[i].forward(y);
    y = channel_affine(group_norm(y, groups_), gn_gamma[i], gn_beta[i]);
    y = leaky_relu(y, cfg_.slope);
  }
  const Var z = head2.forward(leaky_relu(head1.forward(y), cfg_.slope));
  Output out{y, z, z};
  if (cfg_.projection) {
    if (labels == nullptr) throw ConfigError("projection discriminator needs a label map");
    const Shape s = y.shape();
    const LabelMap small = (labels->h == s.h && labels->w == s.w) ? *labels : resample_nearest(*labels, s.h, s.w);
    out.score = add(z, project_embedding(y, embedding, small));
  }
  return out;
}

void LevelDiscriminator::collect(ParamSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < stem.size(); ++i) {
    const std::string p = prefix + ".stem" + std::to_string(i);
    stem[i].collect(ps, p + ".conv");
    ps.add(p + ".gamma", gn_gamma[i]);
    ps.add(p + ".beta", gn_beta[i]);
  }
  head1.collect(ps, prefix + ".head.conv1");
  head2.collect(ps, prefix + ".head.conv2");
  if (cfg_.projection) ps.add(prefix + ".embedding", embedding);
}

AccuracyTracker::AccuracyTracker(int levels, double decay, double initial)
    : r_(static_cast<std::size_t>(std::max(levels, 0)), initial), decay_(decay) {
  if (decay < 0.0 || decay >= 1.0) throw ConfigError("accuracy decay must lie in [0, 1)");
}

double AccuracyTracker::correctness(const Tensor& score, bool real, double threshold) {
  if (score.numel() == 0) throw ShapeError("accuracy update needs a non-empty score map");
  std::size_t hits = 0;
  for (const double s : score.values()) hits += ((s > threshold) == real) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(score.numel());
}

void AccuracyTracker::update(int level, const Tensor& score, bool real) {
  double& r = r_.at(static_cast<std::size_t>(level));
  r = decay_ * r + (1.0 - decay_) * correctness(score, real);
}

void AccuracyTracker::update(const Verdict& v, bool real) {
  if (v.scores.size() != r_.size()) throw ShapeError("verdict level count differs from the tracker");
  for (std::size_t k = 0; k < r_.size(); ++k) update(static_cast<int>(k), v.scores[k].value(), real);
}

DiscriminatorEnsemble::DiscriminatorEnsemble(const EnsembleConfig& cfg, std::shared_ptr<PerceptualBackbone> backbone,
                                             Rng& rng)
    : cfg_(cfg), backbone_(std::move(backbone)) {
  if (cfg_.kind == EnsembleKind::perceptual) {
    if (!backbone_) throw ConfigError("perceptual discriminator needs a backbone");
    for (int k = 0; k < backbone_->num_taps(); ++k) {
      LevelConfig lc;
      lc.in_channels = backbone_->tap_channels(k);
      lc.width = cfg_.width;
      lc.num_classes = cfg_.num_classes;
      lc.projection = cfg_.projection;
      nets_.emplace_back(lc, rng);
    }
  } else {
    // The image-space baseline conditions on nothing but pixels.
    cfg_.projection = false;
    if (cfg_.patchgan_scales < 1) throw ConfigError("patchgan needs at least one scale");
    for (int k = 0; k < cfg_.patchgan_scales; ++k) {
      LevelConfig lc;
      lc.in_channels = 3;
      lc.width = cfg_.width;
      lc.num_classes = cfg_.num_classes;
      lc.projection = false;
      nets_.emplace_back(lc, rng);
    }
  }
}

std::vector<Var> DiscriminatorEnsemble::level_inputs(const Var& image) {
  if (cfg_.kind == EnsembleKind::perceptual) return backbone_->taps(image);
  std::vector<Var> out{image};
  for (int k = 1; k < levels(); ++k) {
    Var prev = out.back();
    const Shape s = prev.shape();
    if (s.h < 2 || s.w < 2) throw ShapeError("patchgan input " + s.str() + " too small for " + std::to_string(levels()) + " scales");
    // Odd sizes lose their last row or column before halving.
    if (s.h % 2 != 0 || s.w % 2 != 0) prev = crop(prev, 0, 0, s.h - s.h % 2, s.w - s.w % 2);
    out.push_back(avg_pool(prev, 2));
  }
  return out;
}

Var DiscriminatorEnsemble::score_level(int k, const Var& input, const LabelMap* labels) {
  return level(k).forward(input, cfg_.projection ? labels : nullptr).score;
}

Verdict DiscriminatorEnsemble::score(const Var& image, const LabelMap* labels) {
  const auto inputs = level_inputs(image);
  Verdict v;
  for (int k = 0; k < levels(); ++k) v.scores.push_back(score_level(k, inputs[static_cast<std::size_t>(k)], labels));
  return v;
}

void DiscriminatorEnsemble::collect_level(int k, ParamSet& ps, const std::string& prefix) {
  level(k).collect(ps, prefix + ".level" + std::to_string(k));
}

}  // namespace gbe
