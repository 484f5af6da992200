// Experiment driver: one verb per pipeline stage, each writing into its own
// run directory <out>/<verb>-<timestamp>-<seed>/.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "gbe/config.hpp"
#include "gbe/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gbe;

namespace {

struct Options {
  std::string config;
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> condition;
  std::optional<double> threshold;
  std::optional<long> iters;
  std::string source, target, enhanced, features, labels, checkpoint, resume;
};

class RunDir {
 public:
  RunDir(const fs::path& out, const std::string& verb, std::uint64_t seed, const json& snapshot)
      : start_(std::chrono::steady_clock::now()) {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
    const std::string base = verb + "-" + stamp + "-" + std::to_string(seed);
    root_ = out / base;
    for (int i = 2; fs::exists(root_); ++i) root_ = out / (base + "." + std::to_string(i));
    fs::create_directories(root_ / "artifacts");
    std::ofstream(root_ / "config.snapshot") << snapshot.dump(2) << "\n";
  }

  [[nodiscard]] const fs::path& root() const { return root_; }
  [[nodiscard]] fs::path artifact(const std::string& name) const { return root_ / "artifacts" / name; }

  /// Opens log.csv with `header`; verbs without their own log use event rows.
  std::ofstream& log(const std::string& header = "elapsed_s,event,detail") {
    if (!log_.is_open()) {
      log_.open(root_ / "log.csv");
      log_ << header << "\n";
    }
    return log_;
  }

  void event(const std::string& what, const std::string& detail = "") {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    log() << std::fixed << std::setprecision(3) << t << "," << what << "," << detail << "\n";
    log_.flush();
    std::cout << what << (detail.empty() ? "" : ": " + detail) << std::endl;
  }

 private:
  fs::path root_;
  std::ofstream log_;
  std::chrono::steady_clock::time_point start_;
};

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
}

const fs::path& require(const fs::path& p, const char* key) {
  if (p.empty()) throw ConfigError(std::string("this verb needs ") + key + " (config or command line)");
  return p;
}

std::vector<SceneSample> load_samples(const fs::path& dir, const ExperimentConfig& cfg) {
  auto samples = read_dataset(dir);
  if (!cfg.labels.empty()) {
    CachedLabelProvider provider(std::make_shared<GroundTruthLabels>(), LabelCache(cfg.labels));
    for (auto& s : samples) s.labels = provider.labels(s);
  }
  return samples;
}

LabeledSet labeled(const std::vector<SceneSample>& samples) {
  LabeledSet set;
  for (const auto& s : samples) {
    set.images.push_back(s.image);
    set.labels.push_back(s.labels);
  }
  return set;
}

json report_json(const MetricReport& r) {
  json j = {{"name", r.name}, {"value", r.value}, {"std", r.std}, {"subset_size", r.subset_size}, {"subsets", r.subsets}};
  if (r.retained_pairs > 0) j["retained_pairs"] = r.retained_pairs;
  return j;
}

// ---------------------------------------------------------------- verbs

void generate_scenes(const ExperimentConfig& cfg, RunDir& run) {
  const auto source = generate_dataset(cfg.scenes, cfg.n_source, sample_seed(cfg.seed, 0), Style::source);
  write_dataset(source, cfg.scenes, run.artifact("source"));
  run.event("wrote source dataset", std::to_string(source.size()) + " samples");
  const auto target = generate_dataset(cfg.scenes, cfg.n_target, sample_seed(cfg.seed, 1), Style::target);
  write_dataset(target, cfg.scenes, run.artifact("target"));
  run.event("wrote target dataset", std::to_string(target.size()) + " samples");
}

void precompute_labels(const ExperimentConfig& cfg, RunDir& run) {
  const LabelCache cache(run.artifact("labels"));
  CachedLabelProvider provider(std::make_shared<GroundTruthLabels>(), cache);
  json summary = json::object();
  for (const auto& [name, dir] : {std::pair{"source", cfg.source_data}, std::pair{"target", cfg.target_data}}) {
    if (dir.empty()) continue;
    json files = json::array();
    for (const auto& s : read_dataset(dir)) {
      (void)provider.labels(s);
      files.push_back(cache.path_for(s.image).filename().string());
    }
    run.event("cached labels", std::string(name) + " " + std::to_string(files.size()) + " maps");
    summary[name] = files;
  }
  if (summary.empty()) throw ConfigError("precompute-labels needs paths.source or paths.target");
  write_json(run.artifact("labels.json"), summary);
}

void precompute_features(const ExperimentConfig& cfg, RunDir& run) {
  TrainingData data;
  data.synthetic = read_dataset(require(cfg.source_data, "paths.source"));
  data.real = read_dataset(require(cfg.target_data, "paths.target"));
  RandomBackbone backbone(cfg.model.backbone);
  const int crop = backbone.receptive_field();
  const PatchPools pools = build_patch_pools(data, backbone, crop, cfg.model.patch_grid_step);
  write_embeddings(run.artifact("features/synthetic"), pools.synthetic);
  write_embeddings(run.artifact("features/real"), pools.real);
  std::ostringstream hash;
  hash << std::hex << std::setw(16) << std::setfill('0') << backbone.weight_hash();
  write_json(run.artifact("features/meta.json"), {{"crop", crop},
                                                  {"grid_step", cfg.model.patch_grid_step},
                                                  {"backbone_hash", hash.str()},
                                                  {"synthetic_patches", pools.synthetic.size()},
                                                  {"real_patches", pools.real.size()}});
  run.event("embedded patches", std::to_string(pools.synthetic.size()) + " synthetic, " +
                                    std::to_string(pools.real.size()) + " real, crop " + std::to_string(crop));
}

PatchPools load_pools(const fs::path& dir, const ExperimentConfig& cfg, int crop) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw ConfigError("paths.features: no meta.json in '" + dir.string() + "'");
  const json meta = json::parse(in);
  if (meta.at("crop").get<int>() != crop || meta.at("grid_step").get<int>() != cfg.model.patch_grid_step) {
    throw ConfigError("paths.features were computed for crop " + std::to_string(meta.at("crop").get<int>()) +
                      " and grid step " + std::to_string(meta.at("grid_step").get<int>()) + "; this run needs " +
                      std::to_string(crop) + " and " + std::to_string(cfg.model.patch_grid_step));
  }
  return {read_embeddings(dir / "synthetic"), read_embeddings(dir / "real")};
}

void match_patches(const ExperimentConfig& cfg, RunDir& run) {
  const fs::path& dir = require(cfg.features, "paths.features");
  const auto synthetic = read_embeddings(dir / "synthetic");
  const auto real = read_embeddings(dir / "real");
  const MatchIndex index(real, cfg.model.match_threshold);
  json matches = json::array();
  int matched = 0;
  double total = 0.0;
  for (const auto& p : synthetic) {
    const auto m = index.query(p.embedding);
    matched += m.empty() ? 0 : 1;
    total += static_cast<double>(m.size());
    matches.push_back(m);
  }
  const double mean = matched > 0 ? total / matched : 0.0;
  write_json(run.artifact("matches.json"), {{"threshold", cfg.model.match_threshold},
                                            {"synthetic_patches", synthetic.size()},
                                            {"real_patches", real.size()},
                                            {"matched", matched},
                                            {"unmatched", static_cast<int>(synthetic.size()) - matched},
                                            {"mean_matches", mean},
                                            {"matches", matches}});
  run.event("matched patches", std::to_string(matched) + " of " + std::to_string(synthetic.size()) +
                                   " synthetic patches have partners (mean " + std::to_string(mean) + ")");
  if (matched == 0) throw SamplingExhausted("no synthetic patch has a partner above threshold " +
                                            std::to_string(cfg.model.match_threshold));
}

void train(const ExperimentConfig& cfg, const Options& opt, RunDir& run) {
  TrainingData data;
  data.synthetic = load_samples(require(cfg.source_data, "paths.source"), cfg);
  data.real = load_samples(require(cfg.target_data, "paths.target"), cfg);
  const ConditionSpec condition = resolve_condition(cfg.condition);
  std::optional<PatchPools> pools;
  if (!cfg.features.empty() && condition.policy == CropPolicy::matched) {
    RandomBackbone probe(cfg.model.backbone);
    pools = load_pools(cfg.features, cfg, probe.receptive_field());
  }
  Trainer trainer(cfg.train, cfg.model, condition, data, cfg.seed, std::move(pools));
  if (!opt.resume.empty()) {
    trainer.load_checkpoint(opt.resume);
    run.event("resumed", opt.resume + " at iteration " + std::to_string(trainer.iteration()));
  }
  auto& log = run.log(log_csv_header(trainer.levels()));
  const long every = std::max<long>(1, cfg.train.total_iters / 20);
  StepLog last;
  trainer.run(cfg.train.total_iters, [&](const StepLog& s) {
    log << log_csv_row(s) << "\n";
    last = s;
    const long done = s.iteration + 1;
    if (done % every == 0 || done == cfg.train.total_iters) {
      std::cout << "iteration " << done << "/" << cfg.train.total_iters << " g_total " << s.g_total << " d_loss_L1 "
                << s.d_loss.front() << std::endl;
    }
    if (cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0) {
      trainer.save_checkpoint(run.artifact("checkpoint-" + std::to_string(done) + ".ckpt"));
    }
  });
  log.flush();
  trainer.save_checkpoint(run.artifact("checkpoint.ckpt"));
  write_json(run.artifact("train_summary.json"), {{"condition", condition.name},
                                                  {"iterations", trainer.iteration()},
                                                  {"crop", trainer.crop()},
                                                  {"g_total", last.g_total},
                                                  {"d_loss", last.d_loss},
                                                  {"accuracy", trainer.accuracy().values()}});
  std::cout << "checkpoint: " << run.artifact("checkpoint.ckpt").string() << std::endl;
}

void enhance(const ExperimentConfig& cfg, RunDir& run) {
  const fs::path& ckpt = require(cfg.checkpoint, "paths.checkpoint");
  const CheckpointData meta = read_checkpoint(ckpt);
  GeneratorConfig gc = cfg.model.generator;
  gc.variant = resolve_condition(meta.condition).variant;
  Rng rng(0);
  Generator generator(gc, rng);
  load_generator(ckpt, generator);
  auto samples = read_dataset(require(cfg.source_data, "paths.source"));
  fs::create_directories(run.artifact("images"));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    NoGradGuard ng;
    auto& s = samples[i];
    s.image = generator.forward(Var(s.image), Var(gbuffer_stack(s.gbuffers)), s.gbuffers.object_masks).value();
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.ppm", i);
    write_ppm(run.artifact("images") / name, s.image);
  }
  write_dataset(samples, cfg.scenes, run.artifact("enhanced"));
  run.event("enhanced", std::to_string(samples.size()) + " images with condition " + meta.condition);
}

void evaluate(const ExperimentConfig& cfg, RunDir& run) {
  const fs::path a_dir = cfg.enhanced_data.empty() ? require(cfg.source_data, "paths.source or paths.enhanced")
                                                   : cfg.enhanced_data;
  const fs::path& b_dir = require(cfg.target_data, "paths.target");
  const LabeledSet a = labeled(load_samples(a_dir, cfg));
  const LabeledSet b = labeled(load_samples(b_dir, cfg));
  RandomBackbone backbone(cfg.metric_backbone);
  json metrics = json::array();

  const auto fa = pooled_features_all(a.images, backbone);
  const auto fb = pooled_features_all(b.images, backbone);
  const int kid_subset = std::min({cfg.kid.subset_size, fa.back().n, fb.back().n});
  if (kid_subset >= 2) {
    MetricReport r = kid(fa.back(), fb.back(), kid_subset, cfg.kid.n_subsets, cfg.seed, a_dir == b_dir);
    r.name = "KID";
    metrics.push_back(report_json(r));
  } else {
    metrics.push_back({{"name", "KID"}, {"error", "fewer than two images per set"}});
  }

  SkvdConfig sc = cfg.skvd;
  sc.seed = cfg.seed;
  try {
    for (const auto& r : skvd(a, b, backbone, sc)) metrics.push_back(report_json(r));
  } catch (const MetricUndefined& e) {
    metrics.push_back({{"name", "sKVD"}, {"error", e.what()}});
  }

  const json report = {{"a", a_dir.string()},
                       {"b", b_dir.string()},
                       {"images", {a.images.size(), b.images.size()}},
                       {"metrics", metrics},
                       {"protocol", {{"kid_subset_size", kid_subset},
                                     {"kid_subsets", cfg.kid.n_subsets},
                                     {"skvd_patch_divisor", sc.patch_divisor},
                                     {"skvd_patches_per_image", sc.patches_per_image},
                                     {"skvd_subset_size", sc.subset_size},
                                     {"skvd_subsets", sc.n_subsets},
                                     {"skvd_min_matches", sc.min_matches},
                                     {"seed", cfg.seed}}}};
  write_json(run.artifact("report.json"), report);
  std::ofstream csv(run.artifact("report.csv"));
  csv << "metric,value_x1000,std_x1000,subset_size,subsets,retained_pairs\n";
  for (const auto& m : metrics) {
    if (m.contains("error")) continue;
    csv << m["name"].get<std::string>() << "," << m["value"].get<double>() << "," << m["std"].get<double>() << ","
        << m["subset_size"].get<int>() << "," << m["subsets"].get<int>() << "," << m.value("retained_pairs", 0)
        << "\n";
    std::cout << m["name"].get<std::string>() << " " << m["value"].get<double>() << " +- " << m["std"].get<double>()
              << std::endl;
  }
}

void layout_stats(const ExperimentConfig& cfg, RunDir& run) {
  json summary = json::object();
  std::map<std::string, DensityMaps> maps;
  fs::create_directories(run.artifact("layout"));
  for (const auto& [name, dir] : {std::pair{"source", cfg.source_data}, std::pair{"target", cfg.target_data}}) {
    if (dir.empty()) continue;
    std::vector<LabelMap> labels;
    for (const auto& s : load_samples(dir, cfg)) labels.push_back(s.labels);
    const DensityMaps d = layout_density(labels, cfg.layout_grid, cfg.layout_grid, cfg.scenes.num_classes());
    json classes = json::object();
    for (int c = 0; c < d.classes; ++c) {
      const std::string cls = cfg.scenes.palette[static_cast<std::size_t>(c)].name;
      write_pgm(run.artifact("layout") / (std::string(name) + "_" + cls + ".pgm"),
                d.rho.data() + static_cast<std::size_t>(c) * d.h * d.w, d.h, d.w);
      double mean = 0.0;
      for (int i = 0; i < d.h * d.w; ++i) mean += d.rho[static_cast<std::size_t>(c) * d.h * d.w + i];
      classes[cls] = mean / (d.h * d.w);
    }
    summary[name] = {{"images", labels.size()}, {"mean_density", classes}};
    maps.emplace(name, d);
  }
  if (summary.empty()) throw ConfigError("layout-stats needs paths.source or paths.target");
  if (maps.size() == 2) {
    const auto& s = maps.at("source");
    const auto& t = maps.at("target");
    json l1 = json::object();
    for (int c = 0; c < s.classes; ++c) {
      double d = 0.0;
      for (int i = 0; i < s.h * s.w; ++i) {
        const std::size_t k = static_cast<std::size_t>(c) * s.h * s.w + i;
        d += std::abs(s.rho[k] - t.rho[k]);
      }
      l1[cfg.scenes.palette[static_cast<std::size_t>(c)].name] = d / (s.h * s.w);
    }
    summary["mean_abs_difference"] = l1;
  }
  write_json(run.artifact("layout.json"), summary);
  run.event("wrote density maps", std::to_string(maps.size()) + " datasets");
}

ExperimentConfig resolve(const Options& opt) {
  ExperimentConfig cfg = opt.config.empty() ? parse_experiment_config(json::object())
                                            : load_experiment_config(opt.config);
  const auto set = [](fs::path& dst, const std::string& v) {
    if (!v.empty()) dst = fs::absolute(v).lexically_normal();
  };
  set(cfg.source_data, opt.source);
  set(cfg.target_data, opt.target);
  set(cfg.enhanced_data, opt.enhanced);
  set(cfg.features, opt.features);
  set(cfg.labels, opt.labels);
  set(cfg.checkpoint, opt.checkpoint);
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.condition) cfg.condition = *opt.condition;
  if (opt.threshold) cfg.model.match_threshold = *opt.threshold;
  if (opt.iters) cfg.train.total_iters = *opt.iters;
  cfg.validate();
  cfg.check_paths();
  if (!opt.resume.empty() && !fs::exists(opt.resume)) throw ConfigError("--resume: '" + opt.resume + "' does not exist");
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rendering-to-photo enhancement experiments on procedural scenes"};
  app.require_subcommand(1);
  Options opt;
  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"generate-scenes", "render source and target datasets"},
      {"precompute-labels", "cache class maps for every image"},
      {"precompute-features", "embed grid patches of both datasets for matched sampling"},
      {"match-patches", "list real partners of every synthetic patch"},
      {"train", "train one condition"},
      {"enhance", "apply a trained generator to a dataset"},
      {"evaluate", "KID and sKVD between two datasets"},
      {"layout-stats", "per-class layout density maps"}};
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "experiment configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "parent directory of run directories")->capture_default_str();
    sub->add_option("--seed", opt.seed, "global seed (overrides the config)");
    sub->add_option("--source", opt.source, "source dataset directory");
    sub->add_option("--target", opt.target, "target dataset directory");
    if (name == "evaluate") sub->add_option("--enhanced", opt.enhanced, "enhanced dataset directory (compared with --target)");
    if (name == "train" || name == "evaluate" || name == "layout-stats") sub->add_option("--labels", opt.labels, "label cache directory");
    if (name == "train" || name == "match-patches") sub->add_option("--features", opt.features, "precomputed feature directory");
    if (name == "match-patches") sub->add_option("--threshold", opt.threshold, "cosine similarity threshold");
    if (name == "train") {
      sub->add_option("--condition", opt.condition, "ours, unif-crop-<N>, no-gbuffer, concat, spade, patchgan, no-projection, no-adaptive-backprop");
      sub->add_option("--iters", opt.iters, "total iterations (overrides train.total_iters)");
      sub->add_option("--resume", opt.resume, "continue from a checkpoint");
    }
    if (name == "enhance") sub->add_option("--checkpoint", opt.checkpoint, "trained checkpoint");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  const std::string verb = app.get_subcommands().front()->get_name();

  try {
    const ExperimentConfig cfg = resolve(opt);
    RunDir run(opt.out, verb, cfg.seed, to_json(cfg));
    std::cout << "run directory: " << run.root().string() << std::endl;
    if (verb == "generate-scenes") generate_scenes(cfg, run);
    else if (verb == "precompute-labels") precompute_labels(cfg, run);
    else if (verb == "precompute-features") precompute_features(cfg, run);
    else if (verb == "match-patches") match_patches(cfg, run);
    else if (verb == "train") train(cfg, opt, run);
    else if (verb == "enhance") enhance(cfg, run);
    else if (verb == "evaluate") evaluate(cfg, run);
    else if (verb == "layout-stats") layout_stats(cfg, run);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
