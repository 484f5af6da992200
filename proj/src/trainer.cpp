#include "gbe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace gbe {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (lpips_weight < 0 || gp_weight < 0 || lr0 < 0 || grad_clip <= 0) {
    throw ConfigError("training weights, learning rate and clip threshold must be non-negative");
  }
  if (!(generator_lr_scale > 0.0) || !std::isfinite(generator_lr_scale)) {
    throw ConfigError("generator_lr_scale must be a positive finite number");
  }
  if (lr_halving_period <= 0) throw ConfigError("lr_halving_period must be positive");
  if (total_iters < 1) throw ConfigError("total_iters must be at least 1");
  if (batch_size != 1) throw ConfigError("only batch_size 1 is supported");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (throttle.gain < 0 || throttle.p_max < 0 || throttle.p_max > 1 || throttle.r_target < 0 ||
      throttle.r_target > 1) {
    throw ConfigError("throttle parameters out of range");
  }
  if (throttle.ema_decay < 0 || throttle.ema_decay >= 1) throw ConfigError("throttle ema_decay must lie in [0, 1)");
}

double lr_at(const TrainConfig& cfg, long iteration) {
  if (iteration < 0) throw ConfigError("iteration must be non-negative");
  return std::ldexp(cfg.lr0, -static_cast<int>(iteration / cfg.lr_halving_period));
}

double throttle_probability(double r, const ThrottleConfig& cfg) {
  return std::clamp(cfg.gain * (r - cfg.r_target), 0.0, cfg.p_max);
}

Var generator_adversarial_loss(const std::vector<Var>& fake_scores) {
  std::vector<Var> terms;
  terms.reserve(fake_scores.size());
  for (const auto& s : fake_scores) terms.push_back(mean_squared_to(s, 1.0));
  return add_n(terms);
}

Var discriminator_adversarial_loss(const Var& real_score, const Var& fake_score) {
  return add(mean_squared_to(real_score, 1.0), mean_squared_to(fake_score, 0.0));
}

Var perceptual_distance(const std::vector<Var>& taps_a, const std::vector<Var>& taps_b) {
  if (taps_a.size() != taps_b.size() || taps_a.empty()) throw ShapeError("perceptual distance needs matching taps");
  std::vector<Var> terms;
  for (std::size_t k = 0; k < taps_a.size(); ++k) {
    terms.push_back(mean_squared_diff(unit_normalize_channels(taps_a[k]), unit_normalize_channels(taps_b[k])));
  }
  return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

double r1_penalty(const ScoreFn& score, const Tensor& x) {
  const Var xv(x, true);
  return gradient(sum(score(xv)), xv).squared_norm();
}

double accumulate_r1_gradient(const ScoreFn& score, const Tensor& x, double weight, double rel_step) {
  const Var xv(x, true);
  const Tensor g = gradient(sum(score(xv)), xv);
  const double penalty = g.squared_norm();
  const double gnorm = std::sqrt(penalty);
  if (weight == 0.0 || gnorm == 0.0) return penalty;
  // d/dtheta ||g||^2 = 2 ||g|| * d/d(eps) [dS/dtheta](x + eps * g/||g||) at eps = 0.
  const double eps = rel_step * std::max(std::sqrt(x.squared_norm()), 1e-3);
  const double coeff = weight * gnorm / eps;
  for (const double sign : {1.0, -1.0}) {
    Tensor shifted = g;
    shifted *= sign * eps / gnorm;
    shifted += x;
    const Tensor seed(Shape{1, 1, 1, 1}, sign * coeff);
    backward(sum(score(Var(std::move(shifted)))), &seed);
  }
  return penalty;
}

namespace {

struct ConditionRow {
  const char* name;
  const char* display;
  GeneratorVariant variant;
  EnsembleKind disc;
  bool projection;
  bool throttle;
};

constexpr ConditionRow kConditions[] = {
    {"ours", "Ours", GeneratorVariant::rad, EnsembleKind::perceptual, true, true},
    {"no-gbuffer", "No G-buffer", GeneratorVariant::no_gbuffer, EnsembleKind::perceptual, true, true},
    {"concat", "Concat", GeneratorVariant::concat, EnsembleKind::perceptual, true, true},
    {"spade", "SPADE", GeneratorVariant::spade, EnsembleKind::perceptual, true, true},
    {"patchgan", "PatchGAN", GeneratorVariant::rad, EnsembleKind::patchgan, false, true},
    {"no-projection", "No projection", GeneratorVariant::rad, EnsembleKind::perceptual, false, true},
    {"no-adaptive-backprop", "No adaptive backprop", GeneratorVariant::rad, EnsembleKind::perceptual, true, false},
};

}  // namespace

ConditionSpec resolve_condition(const std::string& name) {
  for (const auto& row : kConditions) {
    if (name == row.name) {
      ConditionSpec c;
      c.name = row.name;
      c.display = row.display;
      c.variant = row.variant;
      c.discriminator = row.disc;
      c.projection = row.projection;
      c.throttle = row.throttle;
      return c;
    }
  }
  const std::string prefix = "unif-crop-";
  if (name.rfind(prefix, 0) == 0) {
    const std::string digits = name.substr(prefix.size());
    if (!digits.empty() && std::all_of(digits.begin(), digits.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      ConditionSpec c = resolve_condition("ours");
      c.name = name;
      c.crop = std::stoi(digits);
      if (c.crop <= 0) throw ConfigError("crop size must be positive in condition '" + name + "'");
      c.display = "Unif. sampl., crop " + digits;
      c.policy = CropPolicy::uniform;
      return c;
    }
  }
  throw ConfigError("unknown condition '" + name + "'");
}

std::vector<std::string> condition_names() {
  std::vector<std::string> out;
  for (const auto& row : kConditions) out.emplace_back(row.name);
  out.emplace_back("unif-crop-<N>");
  return out;
}

ModelConfig toy_model_config() {
  ModelConfig m;
  m.generator.variant = GeneratorVariant::rad;
  m.generator.encoder.scales = {1, 2, 4, 8};
  m.generator.encoder.channels = {8, 16, 16, 16};
  m.generator.enhancer.scales = {1, 2, 4, 8};
  m.generator.enhancer.channels = {8, 16, 16, 16};
  m.generator.enhancer.blocks_per_stage = 1;
  m.generator.enhancer.rad_blocks = 1;
  m.generator.enhancer.spade_hidden = 8;
  m.backbone.widths = {16, 32, 32, 64, 64};
  m.backbone.convs_per_stage = 1;
  m.discriminator.width = 32;
  m.patch_grid_step = 8;
  return m;
}

TrainConfig toy_train_config() {
  TrainConfig t;
  t.total_iters = 2000;
  t.lr0 = 1e-4;
  // Every Adam step moves each weight by about lr, and this small generator
  // shifts its global colour by ~0.2 within 25 steps at 1e-4.
  t.generator_lr_scale = 0.1;
  return t;
}

std::vector<PatchRef> embed_dataset_patches(const std::vector<SceneSample>& samples, int dataset,
                                            PerceptualBackbone& backbone, int crop, int step) {
  std::vector<PatchRef> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Shape s = samples[i].image.shape();
    for (auto& p : grid_patches(s.h, s.w, dataset, static_cast<int>(i), crop, step)) {
      p.embedding = embed_patch(extract_patch(samples[i].image, p), backbone, crop);
      out.push_back(std::move(p));
    }
  }
  return out;
}

void center_embeddings(PatchPools& pools) {
  std::vector<double> mean;
  std::size_t count = 0;
  for (const auto* pool : {&pools.synthetic, &pools.real}) {
    for (const auto& p : *pool) {
      if (mean.empty()) mean.assign(p.embedding.size(), 0.0);
      if (p.embedding.size() != mean.size()) throw ShapeError("embedding dimensions differ between patches");
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p.embedding[i];
      ++count;
    }
  }
  if (count == 0) return;
  for (auto& m : mean) m /= static_cast<double>(count);
  for (auto* pool : {&pools.synthetic, &pools.real}) {
    for (auto& p : *pool) {
      for (std::size_t i = 0; i < mean.size(); ++i) p.embedding[i] -= mean[i];
      if (std::sqrt(std::inner_product(p.embedding.begin(), p.embedding.end(), p.embedding.begin(), 0.0)) < 1e-12) {
        // A patch sitting exactly on the mean has no direction; give it a fixed one.
        std::fill(p.embedding.begin(), p.embedding.end(), 1.0);
      }
      normalize_in_place(p.embedding);
    }
  }
}

PatchPools build_patch_pools(const TrainingData& data, PerceptualBackbone& backbone, int crop, int step) {
  PatchPools pools;
  pools.synthetic = embed_dataset_patches(data.synthetic, 0, backbone, crop, step);
  pools.real = embed_dataset_patches(data.real, 1, backbone, crop, step);
  center_embeddings(pools);
  return pools;
}

std::string log_csv_header(int levels) {
  std::ostringstream os;
  os << "iteration,lr,g_adversarial,g_perceptual,g_total,g_grad_norm";
  for (int k = 1; k <= levels; ++k) os << ",d_loss_L" << k << ",r1_L" << k << ",r_L" << k << ",p_skip_L" << k << ",skipped_L" << k;
  return os.str();
}

std::string log_csv_row(const StepLog& s) {
  std::ostringstream os;
  os << std::setprecision(10) << s.iteration << ',' << s.lr << ',' << s.g_adversarial << ',' << s.g_perceptual << ','
     << s.g_total << ',' << s.g_grad_norm;
  for (std::size_t k = 0; k < s.d_loss.size(); ++k) {
    os << ',' << s.d_loss[k] << ',' << s.r1[k] << ',' << s.accuracy[k] << ',' << s.p_skip[k] << ',' << s.skipped[k];
  }
  return os.str();
}

namespace {

/// Temporarily switches gradient tracking off for a set of parameters.
class FrozenParams {
 public:
  explicit FrozenParams(std::vector<ParamSet>& sets) : sets_(sets) {
    for (auto& ps : sets_)
      for (auto& p : ps.params) p.var.set_requires_grad(false);
  }
  ~FrozenParams() {
    for (auto& ps : sets_)
      for (auto& p : ps.params) p.var.set_requires_grad(true);
  }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  std::vector<ParamSet>& sets_;
};

void require_finite(double v, const char* what, long iteration) {
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << what << " became " << v << " at iteration " << iteration;
    throw TrainingDiverged(os.str());
  }
}

}  // namespace

Trainer::Trainer(const TrainConfig& train, const ModelConfig& model, const ConditionSpec& condition,
                 const TrainingData& data, std::uint64_t seed, std::optional<PatchPools> pools)
    : train_(train), model_(model), condition_(condition), data_(&data), rng_(sample_seed(seed, 1)) {
  train_.validate();
  if (data.synthetic.empty() || data.real.empty()) throw ConfigError("training needs synthetic and real samples");
  Rng init(sample_seed(seed, 0));
  backbone_ = std::make_shared<RandomBackbone>(model_.backbone);

  GeneratorConfig gc = model_.generator;
  gc.variant = condition_.variant;
  generator_ = Generator(gc, init);

  EnsembleConfig ec = model_.discriminator;
  ec.kind = condition_.discriminator;
  ec.projection = ec.projection && condition_.projection;
  ensemble_ = DiscriminatorEnsemble(ec, backbone_, init);
  tracker_ = AccuracyTracker(ensemble_.levels(), train_.throttle.ema_decay);

  const Shape is = data.synthetic.front().image.shape();
  crop_ = condition_.crop > 0 ? condition_.crop : backbone_->receptive_field();
  if (crop_ > is.h || crop_ > is.w) {
    throw ConfigError("crop " + std::to_string(crop_) + " exceeds the " + std::to_string(is.h) + "x" +
                      std::to_string(is.w) + " training frames");
  }
  for (const auto& s : data.synthetic) synthetic_gbuffers_.push_back(gbuffer_stack(s.gbuffers));

  if (condition_.policy == CropPolicy::matched) {
    if (crop_ != backbone_->receptive_field()) {
      throw ConfigError("matched sampling needs crops equal to the backbone receptive field");
    }
    if (pools) {
      pools_ = std::move(*pools);
    } else {
      pools_ = build_patch_pools(data, *backbone_, crop_, model_.patch_grid_step);
    }
    index_ = std::make_unique<MatchIndex>(pools_.real, model_.match_threshold);
    pair_sampler_ = std::make_unique<PairSampler>(pools_.synthetic, *index_);
  }

  generator_.collect(generator_params_, "generator");
  level_params_.resize(static_cast<std::size_t>(ensemble_.levels()));
  for (int k = 0; k < ensemble_.levels(); ++k) ensemble_.collect_level(k, level_params_[static_cast<std::size_t>(k)]);
  generator_opt_ = std::make_unique<Adam>(generator_params_, train_.adam);
  for (auto& ps : level_params_) level_opts_.push_back(std::make_unique<Adam>(ps, train_.adam));

  state_.append(generator_params_);
  for (const auto& ps : level_params_) state_.append(ps);
  generator_opt_->collect_state(state_, "adam.generator");
  for (std::size_t k = 0; k < level_opts_.size(); ++k) level_opts_[k]->collect_state(state_, "adam.level" + std::to_string(k));
  tracker_buf_ = Tensor(Shape{1, ensemble_.levels(), 1, 1});
  state_.add_buffer("throttle.accuracy", &tracker_buf_);
  state_.add_buffer("iteration", &iteration_buf_);
}

Trainer::Draw Trainer::draw_pair() {
  Draw d{};
  if (pair_sampler_) {
    const auto pair = pair_sampler_->sample(rng_);
    d.synthetic_patch = pair_sampler_->synthetic(pair.synthetic);
    d.real_patch = index_->patch(pair.real);
  } else {
    const int ns = static_cast<int>(data_->synthetic.size()), nr = static_cast<int>(data_->real.size());
    const int i = rng_.integer(0, ns - 1);
    const Shape ss = data_->synthetic[static_cast<std::size_t>(i)].image.shape();
    d.synthetic_patch = crop_patches(ss.h, ss.w, 0, i, crop_, 1, rng_).front();
    const int j = rng_.integer(0, nr - 1);
    const Shape rs = data_->real[static_cast<std::size_t>(j)].image.shape();
    d.real_patch = crop_patches(rs.h, rs.w, 1, j, crop_, 1, rng_).front();
  }
  d.synthetic_patch.embedding.clear();
  d.real_patch.embedding.clear();
  d.synthetic_image = d.synthetic_patch.image;
  d.real_image = d.real_patch.image;
  return d;
}

StepLog Trainer::step() {
  StepLog log;
  log.iteration = iteration_;
  log.lr = lr_at(train_, iteration_);
  const int levels = ensemble_.levels();

  const Draw d = draw_pair();
  const SceneSample& syn = data_->synthetic.at(static_cast<std::size_t>(d.synthetic_image));
  const SceneSample& real = data_->real.at(static_cast<std::size_t>(d.real_image));
  const PatchRef& sp = d.synthetic_patch;
  const PatchRef& rp = d.real_patch;

  const Var enhanced = generator_.forward(Var(syn.image), Var(synthetic_gbuffers_[static_cast<std::size_t>(d.synthetic_image)]),
                                         syn.gbuffers.object_masks);
  const Var fake = gbe::crop(enhanced, sp.y, sp.x, sp.size, sp.size);
  const LabelMap syn_labels = extract_patch(syn.labels, sp);
  const LabelMap real_labels = extract_patch(real.labels, rp);
  const Tensor input_crop = extract_patch(syn.image, sp);

  const std::vector<Var> fake_inputs = ensemble_.level_inputs(fake);
  std::vector<Var> real_inputs;
  {
    NoGradGuard ng;
    real_inputs = ensemble_.level_inputs(Var(extract_patch(real.image, rp)));
  }

  // Discriminator updates on detached fakes.
  log.d_loss.assign(static_cast<std::size_t>(levels), 0.0);
  log.r1.assign(static_cast<std::size_t>(levels), 0.0);
  log.accuracy.assign(static_cast<std::size_t>(levels), 0.0);
  log.p_skip.assign(static_cast<std::size_t>(levels), 0.0);
  log.skipped.assign(static_cast<std::size_t>(levels), 0);
  for (int k = 0; k < levels; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const Tensor& real_k = real_inputs[ku].value();
    const Var s_real = ensemble_.score_level(k, Var(real_k), &real_labels);
    const Var s_fake = ensemble_.score_level(k, Var(fake_inputs[ku].value()), &syn_labels);
    tracker_.update(k, s_real.value(), true);
    tracker_.update(k, s_fake.value(), false);
    const double p = forced_skip_ ? *forced_skip_
                                  : (condition_.throttle ? throttle_probability(tracker_.value(k), train_.throttle) : 0.0);
    const bool skip = rng_.uniform() < p;
    const Var loss = discriminator_adversarial_loss(s_real, s_fake);
    log.d_loss[ku] = loss.value()[0];
    log.accuracy[ku] = tracker_.value(k);
    log.p_skip[ku] = p;
    log.skipped[ku] = skip ? 1 : 0;
    require_finite(log.d_loss[ku], "discriminator loss", iteration_);
    if (skip) continue;
    ParamSet& ps = level_params_[ku];
    ps.zero_grad();
    backward(loss);
    if (train_.gp_weight > 0.0) {
      // Rademacher probe: E_v ||d(v . s)/dx||^2 / N equals the mean over score pixels of ||ds_p/dx||^2.
      Tensor probe(s_real.shape());
      const double amp = 1.0 / std::sqrt(static_cast<double>(probe.numel()));
      for (auto& e : probe.values()) e = rng_.uniform() < 0.5 ? -amp : amp;
      const Var probe_var(std::move(probe));
      const ScoreFn score = [this, k, &real_labels, &probe_var](const Var& x) {
        return mul(probe_var, ensemble_.score_level(k, x, &real_labels));
      };
      log.r1[ku] = accumulate_r1_gradient(score, real_k, train_.gp_weight);
      require_finite(log.r1[ku], "gradient penalty", iteration_);
    }
    clip_grad_norm(ps, train_.grad_clip);
    level_opts_[ku]->step(log.lr);
    ps.zero_grad();
  }

  // Generator update against the refreshed discriminators.
  {
    FrozenParams frozen(level_params_);
    std::vector<Var> scores;
    for (int k = 0; k < levels; ++k) scores.push_back(ensemble_.score_level(k, fake_inputs[static_cast<std::size_t>(k)], &syn_labels));
    const Var adv = generator_adversarial_loss(scores);
    Var total = adv;
    if (train_.lpips_weight > 0.0) {
      const std::vector<Var> fake_taps =
          ensemble_.config().kind == EnsembleKind::perceptual ? fake_inputs : backbone_->taps(fake);
      std::vector<Var> input_taps;
      {
        NoGradGuard ng;
        input_taps = backbone_->taps(Var(input_crop));
      }
      const Var pd = perceptual_distance(fake_taps, input_taps);
      log.g_perceptual = pd.value()[0];
      total = add(adv, scale(pd, train_.lpips_weight));
    }
    log.g_adversarial = adv.value()[0];
    log.g_total = total.value()[0];
    require_finite(log.g_total, "generator loss", iteration_);
    generator_params_.zero_grad();
    backward(total);
    log.g_grad_norm = clip_grad_norm(generator_params_, train_.grad_clip);
    require_finite(log.g_grad_norm, "generator gradient norm", iteration_);
    generator_opt_->step(log.lr * train_.generator_lr_scale);
    generator_params_.zero_grad();
  }

  ++iteration_;
  return log;
}

void Trainer::run(long until, const std::function<void(const StepLog&)>& on_step) {
  while (iteration_ < until) {
    const StepLog s = step();
    if (on_step) on_step(s);
  }
}

Tensor Trainer::enhance(const SceneSample& sample) {
  NoGradGuard ng;
  return generator_.forward(Var(sample.image), Var(gbuffer_stack(sample.gbuffers)), sample.gbuffers.object_masks).value();
}

void Trainer::sync_tracker_buffer(bool to_buffer) {
  for (int k = 0; k < ensemble_.levels(); ++k) {
    if (to_buffer) {
      tracker_buf_[static_cast<std::size_t>(k)] = tracker_.value(k);
    } else {
      tracker_.mutable_values()[static_cast<std::size_t>(k)] = tracker_buf_[static_cast<std::size_t>(k)];
    }
  }
  if (to_buffer) {
    iteration_buf_[0] = static_cast<double>(iteration_);
  } else {
    iteration_ = static_cast<long>(iteration_buf_[0]);
  }
}

namespace {

constexpr char kCheckpointMagic[5] = {'C', 'K', 'P', 'T', '1'};

std::vector<std::pair<std::string, Tensor*>> state_entries(ParamSet& ps) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& p : ps.params) out.emplace_back(p.name, &p.var.mutable_value());
  for (auto& b : ps.buffers) out.emplace_back(b.name, b.tensor);
  return out;
}

}  // namespace

// Layout: "CKPT1", u32 header length, JSON header, raw f64 payload of every
// entry in header order. The header carries the RNG state and an FNV-1a
// checksum of the payload.
void Trainer::save_checkpoint(const std::filesystem::path& path) {
  sync_tracker_buffer(true);
  const auto entries = state_entries(state_);
  json header;
  header["format"] = "CKPT1";
  header["iteration"] = iteration_;
  header["condition"] = condition_.name;
  header["rng"] = rng_.state();
  json list = json::array();
  std::uint64_t offset = 0;
  std::uint64_t check = fnv1a(nullptr, 0);
  for (const auto& [name, t] : entries) {
    const Shape s = t->shape();
    list.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += t->numel() * sizeof(double);
    check = fnv1a(t->data(), t->numel() * sizeof(double), check);
  }
  header["tensors"] = std::move(list);
  header["payload_bytes"] = offset;
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << check;
  header["checksum"] = hex.str();
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    const auto len = static_cast<std::uint32_t>(text.size());
    out.write(kCheckpointMagic, 5);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : entries) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[5];
  std::uint32_t len = 0;
  in.read(magic, 5);
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kCheckpointMagic, 5) != 0) throw std::runtime_error("not a checkpoint: " + path.string());
  if (len > std::filesystem::file_size(path)) throw std::runtime_error("checkpoint header is truncated: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), len);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception&) {
    throw std::runtime_error("checkpoint header is corrupt: " + path.string());
  }
  CheckpointData out;
  std::uint64_t check = fnv1a(nullptr, 0);
  try {
    out.iteration = header.at("iteration").get<long>();
    out.condition = header.at("condition").get<std::string>();
    out.rng_state = header.at("rng").get<std::string>();
    for (const auto& e : header.at("tensors")) {
      const auto shape = e.at("shape").get<std::vector<int>>();
      if (shape.size() != 4) throw std::runtime_error("bad tensor shape");
      Tensor t(Shape{shape[0], shape[1], shape[2], shape[3]});
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
      check = fnv1a(t.data(), t.numel() * sizeof(double), check);
      out.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception&) {
    throw std::runtime_error("checkpoint header is incomplete: " + path.string());
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << check;
  if (!in || hex.str() != header.at("checksum").get<std::string>()) {
    throw std::runtime_error("checkpoint payload is truncated or corrupt: " + path.string());
  }
  return out;
}

void load_generator(const std::filesystem::path& path, Generator& generator) {
  CheckpointData data = read_checkpoint(path);
  ParamSet ps;
  generator.collect(ps, "generator");
  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : data.tensors) by_name[name] = &t;
  std::vector<std::pair<Tensor*, Tensor*>> copies;
  for (auto& [name, dst] : state_entries(ps)) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint has no entry " + name);
    if (it->second->shape() != dst->shape()) {
      throw std::runtime_error("checkpoint entry " + name + " has shape " + it->second->shape().str() + ", expected " +
                               dst->shape().str());
    }
    copies.emplace_back(dst, it->second);
  }
  for (auto& [dst, src] : copies) *dst = std::move(*src);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  CheckpointData data = read_checkpoint(path);
  const auto entries = state_entries(state_);
  if (data.tensors.size() != entries.size()) throw std::runtime_error("checkpoint tensor count differs from this model");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = data.tensors[i];
    if (name != entries[i].first || t.shape() != entries[i].second->shape()) {
      throw std::runtime_error("checkpoint entry " + name + " does not match " + entries[i].first);
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) *entries[i].second = std::move(data.tensors[i].second);
  rng_.set_state(data.rng_state);
  sync_tracker_buffer(false);
}

}  // namespace gbe
