#include "gbe/scenegen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <limits>
#include <random>

#include "json.hpp"

namespace gbe {

static_assert(std::endian::native == std::endian::little, "containers are written in native little-endian order");

using json = nlohmann::json;

std::string style_name(Style s) { return s == Style::source ? "source" : "target"; }

Style parse_style(const std::string& name) {
  if (name == "source") return Style::source;
  if (name == "target") return Style::target;
  throw ConfigError("unknown style '" + name + "' (expected source or target)");
}

std::vector<PaletteEntry> LayoutConfig::default_palette() {
  return {{"sky", {0.55, 0.70, 0.95}, 0.0},
          {"road", {0.32, 0.31, 0.30}, 0.25},
          {"building", {0.62, 0.52, 0.44}, 0.15},
          {"vegetation", {0.22, 0.48, 0.18}, 0.05},
          {"vehicle", {0.70, 0.12, 0.10}, 0.85}};
}

int LayoutConfig::num_groups() const {
  return object_groups.empty() ? 0 : *std::max_element(object_groups.begin(), object_groups.end()) + 1;
}

void LayoutConfig::validate() const {
  if (height < 64 || width < 64 || height % 8 != 0 || width % 8 != 0) {
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be at least 64 and divisible by 8");
  }
  if (palette.size() != static_cast<std::size_t>(kNumClasses)) {
    throw ConfigError("palette must list the " + std::to_string(kNumClasses) +
                      " classes sky, road, building, vegetation, vehicle");
  }
  if (object_groups.size() != palette.size()) throw ConfigError("object_groups needs one entry per class");
  std::vector<bool> used(object_groups.size(), false);
  for (int g : object_groups) {
    if (g < 0 || g >= static_cast<int>(object_groups.size())) throw ConfigError("object group out of range");
    used[g] = true;
  }
  for (int g = 0; g < num_groups(); ++g) {
    if (!used[g]) throw ConfigError("object groups must be numbered contiguously from 0");
  }
  if (!(focal > 0.0)) throw ConfigError("focal must be positive");
  if (max_vehicles < 0 || max_vegetation < 0) throw ConfigError("object counts must be non-negative");
  for (const auto* s : {&source_style, &target_style}) {
    if (!(s->gamma > 0.0) || s->noise < 0.0 || s->texture_amplitude < 0.0) {
      throw ConfigError("style parameters out of range");
    }
  }
  for (const auto* l : {&source_layout, &target_layout}) {
    if (l->horizon <= 0.05 || l->horizon >= 0.95) throw ConfigError("horizon must lie inside the image");
  }
}

Intrinsics camera_intrinsics(const LayoutConfig& cfg, Style style) {
  const double f = cfg.focal * cfg.width;
  return {f, f, 0.5 * cfg.width, cfg.layout(style).horizon * cfg.height};
}

const std::vector<std::string>& GBufferSet::field_names() {
  static const std::vector<std::string> names{"normal",   "depth",    "albedo",     "glossiness",  "emission",
                                              "sky_mask", "reflection", "ndotr", "object_masks"};
  return names;
}

std::vector<const Tensor*> GBufferSet::fields() const {
  return {&normal, &depth, &albedo, &glossiness, &emission, &sky_mask, &reflection, &ndotr, &object_masks};
}

std::vector<Tensor*> GBufferSet::fields() {
  return {&normal, &depth, &albedo, &glossiness, &emission, &sky_mask, &reflection, &ndotr, &object_masks};
}

Tensor gbuffer_stack(const GBufferSet& g) {
  Tensor inv_depth = g.depth;
  for (auto& v : inv_depth.values()) v = 1.0 / (1.0 + v);
  const Tensor parts[] = {g.normal, inv_depth, g.albedo, g.glossiness, g.emission, g.sky_mask, g.reflection, g.ndotr};
  return concat_channels(parts);
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

using Vec3 = std::array<double, 3>;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 normalized(const Vec3& a) {
  const double n = std::sqrt(dot(a, a));
  return {a[0] / n, a[1] / n, a[2] / n};
}

constexpr double kSkyDepth = 1000.0;

struct Facade {
  double x0, x1, top;
  double shade;
};

struct VehicleFront {
  double x0, x1, z, top;
  Vec3 albedo;
};

struct Sphere {
  Vec3 centre;
  double radius;
  double shade;
};

struct Scene {
  double facade_z = 25.0;
  std::vector<Facade> facades;
  std::vector<VehicleFront> vehicles;
  std::vector<Sphere> trees;
};

Scene build_scene(const LayoutConfig& cfg, const LayoutBias& bias, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  Scene s;
  s.facade_z = uni(18.0, 30.0);
  const double half = s.facade_z * 0.5 / cfg.focal + 4.0;
  for (double x = -half; x < half;) {
    const double w = uni(3.0, 8.0);
    s.facades.push_back({x, x + w, bias.building_height * uni(0.6, 1.4), uni(0.75, 1.15)});
    x += w;
  }
  const int nv = std::uniform_int_distribution<int>(0, cfg.max_vehicles)(rng);
  for (int i = 0; i < nv; ++i) {
    const double cx = uni(-4.0, 4.0), w = uni(1.6, 2.2);
    const double hue = u01(rng);
    const Vec3 base = cfg.palette[kVehicle].albedo;
    Vec3 alb{base[0] * (0.4 + 0.8 * hue), base[1] + 0.5 * (1.0 - hue) * u01(rng), base[2] + 0.6 * u01(rng)};
    for (auto& a : alb) a = std::clamp(a, 0.0, 1.0);
    s.vehicles.push_back({cx - 0.5 * w, cx + 0.5 * w, uni(4.0, 11.0), uni(1.2, 1.8), alb});
  }
  const int nt = cfg.max_vegetation == 0 ? 0 : std::uniform_int_distribution<int>(1, cfg.max_vegetation)(rng);
  std::normal_distribution<double> height(bias.vegetation_height, bias.vegetation_spread);
  for (int i = 0; i < nt; ++i) {
    const double r = uni(0.6, 1.5);
    const double h = std::max(0.5 * r, height(rng));
    s.trees.push_back({{uni(-8.0, 8.0), -kCameraHeight + h, uni(6.0, 20.0)}, r, uni(0.8, 1.2)});
  }
  return s;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  std::int32_t cls = kSky;
  Vec3 normal{0.0, 0.0, 0.0};
  Vec3 albedo{0.0, 0.0, 0.0};
  double gloss = 0.0;
};

double fract(double v) { return v - std::floor(v); }

Hit trace(const Scene& s, const LayoutConfig& cfg, const Vec3& d) {
  Hit hit;
  if (d[1] < 0.0) {
    const double t = -kCameraHeight / d[1];
    const double x = t * d[0], z = t * d[2];
    hit = {t, kRoad, {0.0, 1.0, 0.0}, cfg.palette[kRoad].albedo, cfg.palette[kRoad].glossiness};
    if (std::abs(x) < 0.08 && fract(z / 3.0) < 0.5) {
      hit.albedo = {0.9, 0.9, 0.85};
      hit.gloss = 0.4;
    }
  }
  if (d[2] > 0.0) {
    const double t = s.facade_z / d[2];
    const double x = t * d[0], y = t * d[1];
    if (t < hit.t && y >= -kCameraHeight) {
      for (const auto& f : s.facades) {
        if (x < f.x0 || x >= f.x1) continue;
        if (y <= -kCameraHeight + f.top) {
          const auto& pe = cfg.palette[kBuilding];
          hit = {t, kBuilding, {0.0, 0.0, -1.0}, {pe.albedo[0] * f.shade, pe.albedo[1] * f.shade, pe.albedo[2] * f.shade},
                 pe.glossiness};
          if (fract((x - f.x0) / 1.2) < 0.5 && fract((y + kCameraHeight) / 1.5) < 0.45) {
            hit.albedo = {0.18, 0.22, 0.28};
            hit.gloss = 0.7;
          }
        }
        break;
      }
    }
    for (const auto& v : s.vehicles) {
      const double tv = v.z / d[2];
      const double xv = tv * d[0], yv = tv * d[1];
      if (tv < hit.t && xv >= v.x0 && xv <= v.x1 && yv >= -kCameraHeight && yv <= -kCameraHeight + v.top) {
        hit = {tv, kVehicle, {0.0, 0.0, -1.0}, v.albedo, cfg.palette[kVehicle].glossiness};
        if (yv > -kCameraHeight + 0.6 * v.top) {
          hit.albedo = {0.1, 0.12, 0.15};
          hit.gloss = 0.95;
        }
      }
    }
  }
  for (const auto& sp : s.trees) {
    const Vec3& c = sp.centre;
    const double b = dot(d, c);
    const double disc = b * b - (dot(c, c) - sp.radius * sp.radius);
    if (disc < 0.0) continue;
    const double t = b - std::sqrt(disc);
    if (t <= 0.0 || t >= hit.t) continue;
    const Vec3 p{t * d[0], t * d[1], t * d[2]};
    const auto& pe = cfg.palette[kVegetation];
    hit = {t,
           kVegetation,
           normalized({p[0] - c[0], p[1] - c[1], p[2] - c[2]}),
           {pe.albedo[0] * sp.shade, pe.albedo[1] * sp.shade, pe.albedo[2] * sp.shade},
           pe.glossiness};
  }
  return hit;
}

}  // namespace

SceneSample render_scene(const LayoutConfig& cfg, Style style, std::uint64_t seed) {
  cfg.validate();
  const int H = cfg.height, W = cfg.width;
  const Intrinsics K = camera_intrinsics(cfg, style);
  std::mt19937_64 layout_rng(seed);
  const Scene scene = build_scene(cfg, cfg.layout(style), layout_rng);

  SceneSample out;
  out.style = style;
  out.seed = seed;
  out.labels = LabelMap(H, W);
  GBufferSet& g = out.gbuffers;
  g.normal = Tensor({1, 3, H, W});
  g.depth = Tensor({1, 1, H, W});
  g.albedo = Tensor({1, 3, H, W});
  g.glossiness = Tensor({1, 1, H, W});
  g.emission = Tensor({1, 1, H, W});
  g.sky_mask = Tensor({1, 1, H, W});
  g.reflection = Tensor({1, 3, H, W});
  g.ndotr = Tensor({1, 1, H, W});
  g.object_masks = Tensor({1, cfg.num_groups(), H, W});
  out.image = Tensor({1, 3, H, W});

  const Vec3 light = normalized({-0.35, 0.8, -0.45});
  for (int v = 0; v < H; ++v) {
    for (int u = 0; u < W; ++u) {
      const Vec3 d = normalized({(u + 0.5 - K.cx) / K.fx, -(v + 0.5 - K.cy) / K.fy, 1.0});
      const Hit hit = trace(scene, cfg, d);
      const bool sky = hit.cls == kSky;
      const Vec3& n = hit.normal;
      const double dn = dot(d, n);
      const Vec3 r{d[0] - 2.0 * dn * n[0], d[1] - 2.0 * dn * n[1], d[2] - 2.0 * dn * n[2]};
      out.labels.at(v, u) = hit.cls;
      for (int c = 0; c < 3; ++c) {
        g.normal.at(0, c, v, u) = n[c];
        g.albedo.at(0, c, v, u) = sky ? cfg.palette[kSky].albedo[c] : hit.albedo[c];
        g.reflection.at(0, c, v, u) = r[c];
      }
      g.depth.at(0, 0, v, u) = sky ? kSkyDepth : hit.t;
      g.glossiness.at(0, 0, v, u) = hit.gloss;
      g.emission.at(0, 0, v, u) = sky ? 1.0 : 0.0;
      g.sky_mask.at(0, 0, v, u) = sky ? 1.0 : 0.0;
      g.ndotr.at(0, 0, v, u) = dot(n, r);
      g.object_masks.at(0, cfg.object_groups[hit.cls], v, u) = 1.0;

      Vec3 colour;
      if (sky) {
        const double k = std::clamp(d[1] * 2.5, 0.0, 1.0);
        const Vec3 horizon{0.85, 0.88, 0.92}, zenith{0.32, 0.52, 0.88};
        for (int c = 0; c < 3; ++c) colour[c] = (1.0 - k) * horizon[c] + k * zenith[c];
      } else {
        const double diffuse = std::max(0.0, dot(n, light));
        const double spec = hit.gloss * std::pow(std::max(0.0, dot(r, light)), 20.0);
        for (int c = 0; c < 3; ++c) colour[c] = hit.albedo[c] * (0.3 + 0.7 * diffuse) + 0.4 * spec;
      }
      for (int c = 0; c < 3; ++c) out.image.at(0, c, v, u) = std::clamp(colour[c], 0.0, 1.0);
    }
  }

  const StyleParams& sp = cfg.style(style);
  std::mt19937_64 noise_rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const double p1 = phase(noise_rng), p2 = phase(noise_rng);
  const double omega = 2.0 * std::numbers::pi * sp.texture_frequency;
  for (int c = 0; c < 3; ++c) {
    for (int v = 0; v < H; ++v) {
      for (int u = 0; u < W; ++u) {
        double x = out.image.at(0, c, v, u);
        x = sp.tint[c] * std::pow(x, sp.gamma);
        if (sp.texture_amplitude > 0.0) x += sp.texture_amplitude * std::sin(omega * u + p1) * std::sin(omega * v + p2);
        if (sp.noise > 0.0) x += sp.noise * noise(noise_rng);
        out.image.at(0, c, v, u) = std::clamp(x, 0.0, 1.0);
      }
    }
  }
  return out;
}

std::vector<SceneSample> generate_dataset(const LayoutConfig& cfg, int n, std::uint64_t seed, Style style) {
  if (n < 1) throw ConfigError("dataset size must be at least 1");
  cfg.validate();
  std::vector<SceneSample> out(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) out[i] = render_scene(cfg, style, sample_seed(seed, static_cast<std::size_t>(i)));
  return out;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[5] = {'G', 'B', 'U', 'F', '1'};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json intrinsics_json(const Intrinsics& k) { return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}}; }

void append_bytes(std::string& out, const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }

std::string encode_sample(const SceneSample& s, std::size_t index) {
  std::string payload;
  json channels = json::array();
  auto add_tensor = [&](const std::string& name, const Tensor& t) {
    const std::size_t nbytes = t.numel() * sizeof(double);
    channels.push_back({{"name", name},
                        {"dtype", "f64"},
                        {"shape", {t.shape().c, t.shape().h, t.shape().w}},
                        {"offset", payload.size()},
                        {"nbytes", nbytes}});
    append_bytes(payload, t.data(), nbytes);
  };
  add_tensor("image", s.image);
  const auto names = GBufferSet::field_names();
  const auto fields = s.gbuffers.fields();
  for (std::size_t i = 0; i < names.size(); ++i) add_tensor(names[i], *fields[i]);
  const std::size_t lbytes = s.labels.ids.size() * sizeof(std::int32_t);
  channels.push_back({{"name", "labels"},
                      {"dtype", "i32"},
                      {"shape", {1, s.labels.h, s.labels.w}},
                      {"offset", payload.size()},
                      {"nbytes", lbytes}});
  append_bytes(payload, s.labels.ids.data(), lbytes);

  const json header{{"index", index},
                    {"seed", s.seed},
                    {"style", style_name(s.style)},
                    {"channels", channels},
                    {"payload_bytes", payload.size()},
                    {"checksum", hex64(fnv1a(payload.data(), payload.size()))}};
  const std::string h = header.dump();
  std::string blob(kMagic, sizeof kMagic);
  const auto hlen = static_cast<std::uint32_t>(h.size());
  append_bytes(blob, &hlen, sizeof hlen);
  blob += h;
  blob += payload;
  return blob;
}

SceneSample decode_sample(const std::string& blob, std::size_t index) {
  if (blob.size() < sizeof kMagic + 4 || std::memcmp(blob.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError(index, "bad magic bytes");
  }
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, blob.data() + sizeof kMagic, 4);
  const std::size_t start = sizeof kMagic + 4;
  if (start + hlen > blob.size()) throw IntegrityError(index, "truncated header");
  json header;
  try {
    header = json::parse(blob.substr(start, hlen));
  } catch (const json::exception& e) {
    throw IntegrityError(index, std::string("unreadable header: ") + e.what());
  }
  const std::size_t pstart = start + hlen;
  const std::size_t pbytes = header.at("payload_bytes").get<std::size_t>();
  if (pstart + pbytes != blob.size()) throw IntegrityError(index, "payload size mismatch (truncated?)");
  const char* payload = blob.data() + pstart;
  if (hex64(fnv1a(payload, pbytes)) != header.at("checksum").get<std::string>()) {
    throw IntegrityError(index, "checksum mismatch");
  }

  SceneSample s;
  s.seed = header.at("seed").get<std::uint64_t>();
  s.style = parse_style(header.at("style").get<std::string>());
  const auto names = GBufferSet::field_names();
  auto fields = s.gbuffers.fields();
  for (const auto& ch : header.at("channels")) {
    const auto name = ch.at("name").get<std::string>();
    const auto shape = ch.at("shape").get<std::vector<int>>();
    const auto off = ch.at("offset").get<std::size_t>();
    const auto nbytes = ch.at("nbytes").get<std::size_t>();
    if (shape.size() != 3 || off + nbytes > pbytes) throw IntegrityError(index, "bad channel entry " + name);
    if (name == "labels") {
      s.labels = LabelMap(shape[1], shape[2]);
      if (nbytes != s.labels.ids.size() * sizeof(std::int32_t)) throw IntegrityError(index, "label size mismatch");
      std::memcpy(s.labels.ids.data(), payload + off, nbytes);
      continue;
    }
    Tensor t({1, shape[0], shape[1], shape[2]});
    if (nbytes != t.numel() * sizeof(double)) throw IntegrityError(index, "size mismatch for " + name);
    std::memcpy(t.data(), payload + off, nbytes);
    if (name == "image") {
      s.image = std::move(t);
      continue;
    }
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw IntegrityError(index, "unknown channel " + name);
    *fields[static_cast<std::size_t>(it - names.begin())] = std::move(t);
  }
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i]->empty()) throw IntegrityError(index, "missing channel " + names[i]);
  }
  if (s.image.empty() || s.labels.ids.empty()) throw IntegrityError(index, "missing image or labels");
  return s;
}

}  // namespace

std::filesystem::path write_dataset(const std::vector<SceneSample>& samples, const LayoutConfig& cfg,
                                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream data(dir / "samples.gbuf", std::ios::binary | std::ios::trunc);
  if (!data) throw std::runtime_error("cannot write " + (dir / "samples.gbuf").string());
  json entries = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string blob = encode_sample(samples[i], i);
    data.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    json shapes = json::object();
    shapes["image"] = {3, samples[i].image.shape().h, samples[i].image.shape().w};
    const auto names = GBufferSet::field_names();
    const auto fields = samples[i].gbuffers.fields();
    for (std::size_t f = 0; f < names.size(); ++f) {
      shapes[names[f]] = {fields[f]->shape().c, fields[f]->shape().h, fields[f]->shape().w};
    }
    shapes["labels"] = {1, samples[i].labels.h, samples[i].labels.w};
    entries.push_back({{"index", i},
                       {"offset", offset},
                       {"nbytes", blob.size()},
                       {"seed", samples[i].seed},
                       {"style", style_name(samples[i].style)},
                       {"intrinsics", intrinsics_json(camera_intrinsics(cfg, samples[i].style))},
                       {"shapes", shapes}});
    offset += blob.size();
  }
  data.close();
  if (!data) throw std::runtime_error("failed writing " + (dir / "samples.gbuf").string());

  json palette = json::array();
  for (const auto& p : cfg.palette) palette.push_back(p.name);
  const json manifest{{"schema_version", 1},
                      {"container", "GBUF1"},
                      {"data_file", "samples.gbuf"},
                      {"height", cfg.height},
                      {"width", cfg.width},
                      {"palette", palette},
                      {"object_groups", cfg.object_groups},
                      {"gbuffer_fields", GBufferSet::field_names()},
                      {"intrinsics",
                       {{"source", intrinsics_json(camera_intrinsics(cfg, Style::source))},
                        {"target", intrinsics_json(camera_intrinsics(cfg, Style::target))}}},
                      {"samples", entries}};
  const auto path = dir / "manifest.json";
  std::ofstream(path) << manifest.dump(2) << "\n";
  return path;
}

std::vector<SceneSample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("missing manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw std::runtime_error("unreadable manifest: " + std::string(e.what()));
  }
  if (manifest.value("schema_version", 0) != 1) throw std::runtime_error("unsupported manifest schema");
  const auto data_path = dir / manifest.at("data_file").get<std::string>();
  std::ifstream data(data_path, std::ios::binary);
  if (!data) throw std::runtime_error("missing data file " + data_path.string());
  const auto file_size = std::filesystem::file_size(data_path);
  std::vector<SceneSample> out;
  for (const auto& e : manifest.at("samples")) {
    const auto index = e.at("index").get<std::size_t>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto nbytes = e.at("nbytes").get<std::size_t>();
    if (offset + nbytes > file_size) throw IntegrityError(index, "data file truncated");
    std::string blob(nbytes, '\0');
    data.seekg(static_cast<std::streamoff>(offset));
    data.read(blob.data(), static_cast<std::streamsize>(nbytes));
    if (!data) throw IntegrityError(index, "short read");
    out.push_back(decode_sample(blob, index));
  }
  return out;
}

}  // namespace gbe
