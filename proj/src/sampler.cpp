#include "gbe/sampler.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gbe/kernels.hpp"
#include "json.hpp"

namespace gbe {

using json = nlohmann::json;

std::string crop_policy_name(CropPolicy p) { return p == CropPolicy::uniform ? "uniform" : "matched"; }

CropPolicy parse_crop_policy(const std::string& s) {
  if (s == "uniform") return CropPolicy::uniform;
  if (s == "matched") return CropPolicy::matched;
  throw ConfigError("unknown crop policy '" + s + "' (expected uniform or matched)");
}

namespace {

void check_crop(int h, int w, int crop) {
  if (crop <= 0 || crop > h || crop > w) {
    throw ConfigError("crop side " + std::to_string(crop) + " does not fit a " + std::to_string(h) + "x" +
                      std::to_string(w) + " image");
  }
}

}  // namespace

std::vector<PatchRef> crop_patches(int h, int w, int dataset, int image, int crop, int count, Rng& rng) {
  check_crop(h, w, crop);
  std::vector<PatchRef> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    PatchRef p;
    p.dataset = dataset;
    p.image = image;
    p.size = crop;
    p.y = rng.integer(0, h - crop);
    p.x = rng.integer(0, w - crop);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PatchRef> grid_patches(int h, int w, int dataset, int image, int crop, int step) {
  check_crop(h, w, crop);
  if (step <= 0) throw ConfigError("grid step must be positive");
  auto positions = [&](int extent) {
    std::vector<int> v;
    for (int p = 0; p + crop <= extent; p += step) v.push_back(p);
    if (v.back() != extent - crop) v.push_back(extent - crop);
    return v;
  };
  std::vector<PatchRef> out;
  for (const int y : positions(h)) {
    for (const int x : positions(w)) {
      PatchRef p;
      p.dataset = dataset;
      p.image = image;
      p.size = crop;
      p.x = x;
      p.y = y;
      out.push_back(std::move(p));
    }
  }
  return out;
}

Tensor extract_patch(const Tensor& image, const PatchRef& p) {
  const Shape s = image.shape();
  if (p.x < 0 || p.y < 0 || p.x + p.size > s.w || p.y + p.size > s.h) {
    throw ShapeError("patch outside image " + s.str());
  }
  return image.crop(p.y, p.x, p.size, p.size);
}

LabelMap extract_patch(const LabelMap& labels, const PatchRef& p) {
  if (p.x < 0 || p.y < 0 || p.x + p.size > labels.w || p.y + p.size > labels.h) {
    throw ShapeError("patch outside label map");
  }
  return labels.crop(p.y, p.x, p.size, p.size);
}

void normalize_in_place(std::vector<double>& v) {
  double n = 0.0;
  for (const double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0) || !std::isfinite(n)) throw std::domain_error("cannot normalise a zero or non-finite embedding");
  for (double& x : v) x /= n;
}

std::vector<double> embed_patch(const Tensor& patch, PerceptualBackbone& backbone, int expected_side) {
  const Shape s = patch.shape();
  if (s.n != 1 || s.c != 3 || s.h != expected_side || s.w != expected_side) {
    throw ShapeError("embedding expects a 1x3x" + std::to_string(expected_side) + "x" +
                     std::to_string(expected_side) + " patch, got " + s.str());
  }
  NoGradGuard ng;
  const auto taps = backbone.taps(Var(patch));
  const Tensor pooled = global_avg_pool(taps.back()).value();
  std::vector<double> phi(pooled.values().begin(), pooled.values().end());
  // An all-dead deepest tap has no direction; any fixed unit vector keeps it comparable.
  double n2 = 0.0;
  for (const double x : phi) n2 += x * x;
  if (n2 == 0.0) {
    phi.assign(phi.size(), 1.0 / std::sqrt(static_cast<double>(phi.size())));
    return phi;
  }
  normalize_in_place(phi);
  return phi;
}

MatchIndex::MatchIndex(const std::vector<PatchRef>& real, double threshold) : threshold_(threshold) {
  refs_.reserve(real.size());
  for (const auto& p : real) {
    if (p.embedding.empty()) throw ConfigError("match index rows need embeddings");
    if (dim_ == 0) dim_ = static_cast<int>(p.embedding.size());
    if (static_cast<int>(p.embedding.size()) != dim_) throw ShapeError("match index rows differ in dimension");
    PatchRef r = p;
    normalize_in_place(r.embedding);
    data_.insert(data_.end(), r.embedding.begin(), r.embedding.end());
    refs_.push_back(std::move(r));
  }
  rows_ = static_cast<int>(refs_.size());
}

std::vector<int> MatchIndex::query(std::vector<double> phi) const {
  if (rows_ == 0) return {};
  if (static_cast<int>(phi.size()) != dim_) throw ShapeError("query dimension differs from the index");
  normalize_in_place(phi);
  return kernels::dot_above(phi.data(), data_.data(), rows_, dim_, threshold_);
}

double MatchIndex::best_similarity(std::vector<double> phi) const {
  if (rows_ == 0) return -1.0;
  normalize_in_place(phi);
  double best = -1.0;
  for (int r = 0; r < rows_; ++r) {
    double d = 0.0;
    for (int k = 0; k < dim_; ++k) d += phi[static_cast<std::size_t>(k)] * data_[static_cast<std::size_t>(r) * dim_ + k];
    best = std::max(best, d);
  }
  return best;
}

PairSampler::PairSampler(std::vector<PatchRef> synthetic, const MatchIndex& index) : synthetic_(std::move(synthetic)) {
  if (index.size() == 0) throw SamplingExhausted("match index is empty");
  matches_.resize(synthetic_.size());
  double best = -1.0;
  for (std::size_t i = 0; i < synthetic_.size(); ++i) {
    matches_[i] = index.query(synthetic_[i].embedding);
    if (!matches_[i].empty()) usable_.push_back(static_cast<int>(i));
    best = std::max(best, index.best_similarity(synthetic_[i].embedding));
  }
  if (usable_.empty()) {
    std::ostringstream msg;
    msg << "none of " << synthetic_.size() << " synthetic patches has a real match above similarity "
        << index.threshold() << " among " << index.size() << " real patches (best similarity " << best << ")";
    throw SamplingExhausted(msg.str());
  }
}

PairSampler::Pair PairSampler::sample(Rng& rng) const {
  const int s = usable_[static_cast<std::size_t>(rng.integer(0, static_cast<int>(usable_.size()) - 1))];
  const auto& m = matches_[static_cast<std::size_t>(s)];
  return {s, m[static_cast<std::size_t>(rng.integer(0, static_cast<int>(m.size()) - 1))]};
}

double PairSampler::mean_matches() const {
  if (synthetic_.empty()) return 0.0;
  double total = 0.0;
  for (const auto& m : matches_) total += static_cast<double>(m.size());
  return total / static_cast<double>(synthetic_.size());
}

namespace {

constexpr char kEmbMagic[4] = {'E', 'M', 'B', '1'};

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  return std::filesystem::path(stem.string() + ext);
}

}  // namespace

// Layout: magic, u32 rows, u32 dim, f64 row-major matrix, u64 FNV-1a of the matrix.
void write_embeddings(const std::filesystem::path& stem, const std::vector<PatchRef>& patches) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  const std::uint32_t rows = static_cast<std::uint32_t>(patches.size());
  const std::uint32_t dim = patches.empty() ? 0U : static_cast<std::uint32_t>(patches[0].embedding.size());
  std::vector<double> matrix;
  matrix.reserve(static_cast<std::size_t>(rows) * dim);
  json manifest;
  manifest["format"] = "EMB1";
  manifest["rows"] = rows;
  manifest["dim"] = dim;
  json entries = json::array();
  for (const auto& p : patches) {
    if (p.embedding.size() != dim) throw ShapeError("embedding rows differ in dimension");
    matrix.insert(matrix.end(), p.embedding.begin(), p.embedding.end());
    entries.push_back({{"dataset", p.dataset}, {"image", p.image}, {"x", p.x}, {"y", p.y}, {"size", p.size}});
  }
  manifest["patches"] = std::move(entries);
  const std::uint64_t check = fnv1a(matrix.data(), matrix.size() * sizeof(double));
  {
    std::ofstream out(with_ext(stem, ".emb"), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + with_ext(stem, ".emb").string());
    out.write(kEmbMagic, 4);
    out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    out.write(reinterpret_cast<const char*>(matrix.data()), static_cast<std::streamsize>(matrix.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(&check), sizeof(check));
  }
  std::ofstream js(with_ext(stem, ".json"));
  js << manifest.dump(1) << "\n";
}

std::vector<PatchRef> read_embeddings(const std::filesystem::path& stem) {
  std::ifstream in(with_ext(stem, ".emb"), std::ios::binary);
  std::ifstream js(with_ext(stem, ".json"));
  if (!in || !js) throw std::runtime_error("missing embedding store " + stem.string());
  char magic[4];
  std::uint32_t rows = 0, dim = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!in || std::memcmp(magic, kEmbMagic, 4) != 0) throw std::runtime_error("bad embedding store header");
  std::vector<double> matrix(static_cast<std::size_t>(rows) * dim);
  std::uint64_t check = 0;
  in.read(reinterpret_cast<char*>(matrix.data()), static_cast<std::streamsize>(matrix.size() * sizeof(double)));
  in.read(reinterpret_cast<char*>(&check), sizeof(check));
  if (!in || check != fnv1a(matrix.data(), matrix.size() * sizeof(double))) {
    throw std::runtime_error("embedding store checksum mismatch");
  }
  const json manifest = json::parse(js);
  const auto& entries = manifest.at("patches");
  if (entries.size() != rows || manifest.at("dim").get<std::uint32_t>() != dim) {
    throw std::runtime_error("embedding manifest disagrees with the matrix");
  }
  std::vector<PatchRef> out(rows);
  for (std::uint32_t r = 0; r < rows; ++r) {
    const auto& e = entries[r];
    PatchRef& p = out[r];
    p.dataset = e.at("dataset").get<int>();
    p.image = e.at("image").get<int>();
    p.x = e.at("x").get<int>();
    p.y = e.at("y").get<int>();
    p.size = e.at("size").get<int>();
    p.embedding.assign(matrix.begin() + static_cast<std::ptrdiff_t>(r) * dim,
                       matrix.begin() + static_cast<std::ptrdiff_t>(r + 1) * dim);
  }
  return out;
}

}  // namespace gbe
