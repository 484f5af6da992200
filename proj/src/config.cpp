#include "gbe/config.hpp"

#include <fstream>
#include <functional>
#include <set>

namespace gbe {

using json = nlohmann::json;

ExperimentConfig::ExperimentConfig() {
  metric_backbone.widths = {16, 32, 32, 64, 64};
  metric_backbone.convs_per_stage = 1;
  metric_backbone.seed = 99;
  skvd.patch_divisor = 4;
}

namespace {

// Reads one JSON object, tracking which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path, std::filesystem::path base)
      : j_(j), path_(std::move(path)), base_(std::move(base)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  template <class T>
  void field(const char* key, T& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    read(*it, out, name(key));
  }

  void section(const char* key, const std::function<void(Reader&)>& body) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    Reader child(*it, name(key), base_);
    body(child);
    child.finish();
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown config key '" + name(item.key()) + "'");
    }
  }

 private:
  [[nodiscard]] std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[nodiscard]] std::string label() const { return path_.empty() ? "config" : path_; }

  static void read(const json& v, int& out, const std::string& n) {
    if (!v.is_number_integer()) throw ConfigError(n + ": expected an integer");
    const auto x = v.get<long long>();
    if (x < INT32_MIN || x > INT32_MAX) throw ConfigError(n + ": integer out of range");
    out = static_cast<int>(x);
  }
  static void read(const json& v, long& out, const std::string& n) {
    if (!v.is_number_integer()) throw ConfigError(n + ": expected an integer");
    out = v.get<long>();
  }
  static void read(const json& v, std::uint64_t& out, const std::string& n) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError(n + ": expected a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }
  static void read(const json& v, double& out, const std::string& n) {
    if (!v.is_number()) throw ConfigError(n + ": expected a number");
    out = v.get<double>();
  }
  static void read(const json& v, bool& out, const std::string& n) {
    if (!v.is_boolean()) throw ConfigError(n + ": expected true or false");
    out = v.get<bool>();
  }
  static void read(const json& v, std::string& out, const std::string& n) {
    if (!v.is_string()) throw ConfigError(n + ": expected a string");
    out = v.get<std::string>();
  }
  void read(const json& v, std::filesystem::path& out, const std::string& n) const {
    std::string s;
    read(v, s, n);
    out = s.empty() ? std::filesystem::path{} : (base_.empty() ? std::filesystem::path(s) : base_ / s);
    if (!out.empty()) out = out.lexically_normal();
  }
  template <class T>
  static void read(const json& v, std::vector<T>& out, const std::string& n) {
    if (!v.is_array()) throw ConfigError(n + ": expected an array");
    std::vector<T> tmp(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) read(v[i], tmp[i], n + "[" + std::to_string(i) + "]");
    out = std::move(tmp);
  }
  static void read(const json& v, std::array<double, 3>& out, const std::string& n) {
    if (!v.is_array() || v.size() != 3) throw ConfigError(n + ": expected an array of three numbers");
    for (std::size_t i = 0; i < 3; ++i) read(v[i], out[i], n + "[" + std::to_string(i) + "]");
  }

  const json& j_;
  std::string path_;
  std::filesystem::path base_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  explicit Writer(json& j) : j_(j) { j_ = json::object(); }

  template <class T>
  void field(const char* key, const T& value) {
    if constexpr (std::is_same_v<T, std::filesystem::path>) {
      j_[key] = value.string();
    } else {
      j_[key] = value;
    }
  }
  void section(const char* key, const std::function<void(Writer&)>& body) {
    Writer child(j_[key]);
    body(child);
  }

 private:
  json& j_;
};

// The schema, shared by parsing and serialisation.
template <class V, class C>
void visit(V& v, C& c) {
  v.field("seed", c.seed);
  v.section("scenes", [&](V& s) {
    s.field("height", c.scenes.height);
    s.field("width", c.scenes.width);
    s.field("focal", c.scenes.focal);
    s.field("object_groups", c.scenes.object_groups);
    s.field("max_vehicles", c.scenes.max_vehicles);
    s.field("max_vegetation", c.scenes.max_vegetation);
    s.field("n_source", c.n_source);
    s.field("n_target", c.n_target);
    s.field("min_style_margin", c.scenes.min_style_margin);
    for (auto [key, style] : {std::pair{"source_style", &c.scenes.source_style}, std::pair{"target_style", &c.scenes.target_style}}) {
      s.section(key, [&](V& t) {
        t.field("tint", style->tint);
        t.field("gamma", style->gamma);
        t.field("noise", style->noise);
        t.field("texture_amplitude", style->texture_amplitude);
        t.field("texture_frequency", style->texture_frequency);
      });
    }
    for (auto [key, layout] : {std::pair{"source_layout", &c.scenes.source_layout}, std::pair{"target_layout", &c.scenes.target_layout}}) {
      s.section(key, [&](V& t) {
        t.field("horizon", layout->horizon);
        t.field("vegetation_height", layout->vegetation_height);
        t.field("vegetation_spread", layout->vegetation_spread);
        t.field("building_height", layout->building_height);
      });
    }
  });
  v.section("model", [&](V& m) {
    m.section("encoder", [&](V& e) {
      e.field("scales", c.model.generator.encoder.scales);
      e.field("base_channels", c.model.generator.encoder.base_channels);
      e.field("channels", c.model.generator.encoder.channels);
    });
    m.section("enhancer", [&](V& e) {
      auto& en = c.model.generator.enhancer;
      e.field("scales", en.scales);
      e.field("channels", en.channels);
      e.field("blocks_per_stage", en.blocks_per_stage);
      e.field("rad_blocks", en.rad_blocks);
      e.field("max_groups", en.max_groups);
      e.field("spade_hidden", en.spade_hidden);
      e.field("output_init_scale", en.output_init_scale);
    });
    m.section("backbone", [&](V& b) {
      b.field("widths", c.model.backbone.widths);
      b.field("convs_per_stage", c.model.backbone.convs_per_stage);
      b.field("seed", c.model.backbone.seed);
    });
    m.section("discriminator", [&](V& d) {
      d.field("width", c.model.discriminator.width);
      d.field("projection", c.model.discriminator.projection);
      d.field("patchgan_scales", c.model.discriminator.patchgan_scales);
    });
  });
  v.section("sampler", [&](V& s) {
    s.field("condition", c.condition);
    s.field("grid_step", c.model.patch_grid_step);
    s.field("threshold", c.model.match_threshold);
  });
  v.section("train", [&](V& t) {
    t.field("lpips_weight", c.train.lpips_weight);
    t.field("lr0", c.train.lr0);
    t.field("lr_halving_period", c.train.lr_halving_period);
    t.field("generator_lr_scale", c.train.generator_lr_scale);
    t.field("grad_clip", c.train.grad_clip);
    t.field("gp_weight", c.train.gp_weight);
    t.field("batch_size", c.train.batch_size);
    t.field("total_iters", c.train.total_iters);
    t.field("checkpoint_every", c.train.checkpoint_every);
    t.section("adam", [&](V& a) {
      a.field("beta1", c.train.adam.beta1);
      a.field("beta2", c.train.adam.beta2);
      a.field("eps", c.train.adam.eps);
      a.field("weight_decay", c.train.adam.weight_decay);
    });
    t.section("throttle", [&](V& a) {
      a.field("r_target", c.train.throttle.r_target);
      a.field("gain", c.train.throttle.gain);
      a.field("p_max", c.train.throttle.p_max);
      a.field("ema_decay", c.train.throttle.ema_decay);
    });
  });
  v.section("metrics", [&](V& m) {
    m.section("backbone", [&](V& b) {
      b.field("widths", c.metric_backbone.widths);
      b.field("convs_per_stage", c.metric_backbone.convs_per_stage);
      b.field("seed", c.metric_backbone.seed);
    });
    m.section("kid", [&](V& k) {
      k.field("subset_size", c.kid.subset_size);
      k.field("n_subsets", c.kid.n_subsets);
    });
    m.section("skvd", [&](V& k) {
      k.field("patch_divisor", c.skvd.patch_divisor);
      k.field("patches_per_image", c.skvd.patches_per_image);
      k.field("subset_size", c.skvd.subset_size);
      k.field("n_subsets", c.skvd.n_subsets);
      k.field("min_matches", c.skvd.min_matches);
    });
    m.field("layout_grid", c.layout_grid);
  });
  v.section("paths", [&](V& p) {
    p.field("source", c.source_data);
    p.field("target", c.target_data);
    p.field("enhanced", c.enhanced_data);
    p.field("features", c.features);
    p.field("labels", c.labels);
    p.field("checkpoint", c.checkpoint);
  });
}

void require_positive(int v, const char* what) {
  if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
}

}  // namespace

void ExperimentConfig::validate() const {
  scenes.validate();
  require_positive(n_source, "scenes.n_source");
  require_positive(n_target, "scenes.n_target");
  model.generator.enhancer.validate();
  model.generator.encoder.validate();
  if (model.backbone.widths.empty() || metric_backbone.widths.empty()) throw ConfigError("backbone widths must not be empty");
  require_positive(model.backbone.convs_per_stage, "model.backbone.convs_per_stage");
  require_positive(metric_backbone.convs_per_stage, "metrics.backbone.convs_per_stage");
  require_positive(model.discriminator.width, "model.discriminator.width");
  require_positive(model.discriminator.patchgan_scales, "model.discriminator.patchgan_scales");
  require_positive(model.patch_grid_step, "sampler.grid_step");
  if (!(model.match_threshold > -1.0 && model.match_threshold < 1.0)) throw ConfigError("sampler.threshold must lie in (-1, 1)");
  (void)resolve_condition(condition);
  train.validate();
  require_positive(kid.subset_size, "metrics.kid.subset_size");
  require_positive(kid.n_subsets, "metrics.kid.n_subsets");
  require_positive(skvd.patch_divisor, "metrics.skvd.patch_divisor");
  require_positive(skvd.patches_per_image, "metrics.skvd.patches_per_image");
  require_positive(skvd.subset_size, "metrics.skvd.subset_size");
  require_positive(skvd.n_subsets, "metrics.skvd.n_subsets");
  if (skvd.min_matches < 0 || skvd.min_matches >= kEncodingLength) {
    throw ConfigError("metrics.skvd.min_matches must lie in [0, " + std::to_string(kEncodingLength) + ")");
  }
  require_positive(layout_grid, "metrics.layout_grid");
}

void ExperimentConfig::check_paths() const {
  const std::pair<const char*, const std::filesystem::path*> entries[] = {
      {"paths.source", &source_data}, {"paths.target", &target_data}, {"paths.enhanced", &enhanced_data},
      {"paths.features", &features},  {"paths.labels", &labels},      {"paths.checkpoint", &checkpoint}};
  for (const auto& [key, path] : entries) {
    if (!path->empty() && !std::filesystem::exists(*path)) {
      throw ConfigError(std::string(key) + ": '" + path->string() + "' does not exist");
    }
  }
}

ExperimentConfig parse_experiment_config(const json& j, const std::filesystem::path& base) {
  ExperimentConfig cfg;
  Reader r(j, "", base);
  visit(r, cfg);
  r.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file '" + file.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + file.string() + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j, std::filesystem::absolute(file).parent_path());
}

json to_json(const ExperimentConfig& cfg) {
  json j;
  Writer w(j);
  ExperimentConfig copy = cfg;
  visit(w, copy);
  return j;
}

}  // namespace gbe
