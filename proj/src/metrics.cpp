#include "gbe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "gbe/kernels.hpp"

namespace gbe {

FeatureSet FeatureSet::select(const std::vector<int>& idx) const {
  FeatureSet out(static_cast<int>(idx.size()), d);
  for (std::size_t i = 0; i < idx.size(); ++i) std::memcpy(out.row(static_cast<int>(i)), row(idx[i]), sizeof(double) * d);
  return out;
}

double mmd2_unbiased(const FeatureSet& x, const FeatureSet& y) {
  if (x.d != y.d) throw ShapeError("mmd2: feature dimensions differ (" + std::to_string(x.d) + " vs " +
                                   std::to_string(y.d) + ")");
  if (x.n < 2 || y.n < 2) throw ConfigError("mmd2 needs at least two samples per set");
  const auto s = kernels::polynomial_kernel_sums(x.data.data(), x.n, y.data.data(), y.n, x.d);
  const double n = x.n, m = y.n;
  return s.xx_offdiag / (n * (n - 1)) + s.yy_offdiag / (m * (m - 1)) - 2.0 * s.xy / (n * m);
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (const double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

std::vector<int> draw_without_replacement(int population, int count, std::mt19937_64& gen) {
  std::vector<int> idx(static_cast<std::size_t>(population));
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates keeps the draw independent of the standard library's shuffle.
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, population - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(gen))]);
  }
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

}  // namespace

MetricReport kid(const FeatureSet& a, const FeatureSet& b, int subset_size, int n_subsets, std::uint64_t seed,
                 bool same_set) {
  if (subset_size < 2 || n_subsets < 1) throw ConfigError("kid needs subset_size >= 2 and at least one subset");
  if (same_set ? a.n < 2 * subset_size : (a.n < subset_size || b.n < subset_size)) {
    throw ConfigError("kid: not enough samples (" + std::to_string(a.n) + ", " + std::to_string(b.n) +
                      ") for subsets of " + std::to_string(subset_size) + (same_set ? " drawn twice" : ""));
  }
  std::mt19937_64 gen(seed);
  std::vector<double> values;
  for (int s = 0; s < n_subsets; ++s) {
    if (same_set) {
      auto idx = draw_without_replacement(a.n, 2 * subset_size, gen);
      const std::vector<int> first(idx.begin(), idx.begin() + subset_size);
      const std::vector<int> second(idx.begin() + subset_size, idx.end());
      values.push_back(mmd2_unbiased(a.select(first), a.select(second)));
    } else {
      const auto ia = draw_without_replacement(a.n, subset_size, gen);
      const auto ib = draw_without_replacement(b.n, subset_size, gen);
      values.push_back(mmd2_unbiased(a.select(ia), b.select(ib)));
    }
  }
  const auto [mean, sd] = mean_std(values);
  return {"KID", 1000.0 * mean, 1000.0 * sd, subset_size, n_subsets, 0};
}

std::vector<FeatureSet> pooled_features_all(const std::vector<Tensor>& images, PerceptualBackbone& backbone) {
  const int taps = backbone.num_taps();
  std::vector<FeatureSet> out;
  for (int k = 0; k < taps; ++k) out.emplace_back(static_cast<int>(images.size()), backbone.tap_channels(k));
  NoGradGuard ng;
  constexpr int kChunk = 32;
  std::size_t i = 0;
  while (i < images.size()) {
    // Batch consecutive images that share a shape.
    const Shape s = images[i].shape();
    std::size_t j = i;
    std::vector<Tensor> batch;
    while (j < images.size() && images[j].shape() == s && batch.size() < kChunk) batch.push_back(images[j++]);
    const Tensor stacked = Tensor(Shape{static_cast<int>(batch.size()), s.c, s.h, s.w}, [&] {
      std::vector<double> v;
      v.reserve(batch.size() * s.numel());
      for (const auto& t : batch) v.insert(v.end(), t.values().begin(), t.values().end());
      return v;
    }());
    const auto feats = backbone.taps(Var(stacked));
    for (int k = 0; k < taps; ++k) {
      const Tensor& f = feats[static_cast<std::size_t>(k)].value();
      const auto plane = f.shape().plane();
      for (int b = 0; b < f.shape().n; ++b) {
        double* row = out[static_cast<std::size_t>(k)].row(static_cast<int>(i) + b);
        for (int c = 0; c < f.shape().c; ++c) {
          const double* p = f.plane(b, c);
          row[c] = std::accumulate(p, p + plane, 0.0) / static_cast<double>(plane);
        }
      }
    }
    i = j;
  }
  return out;
}

FeatureSet pooled_features(const std::vector<Tensor>& images, PerceptualBackbone& backbone, int tap) {
  return pooled_features_all(images, backbone).at(static_cast<std::size_t>(tap));
}

std::vector<std::int32_t> encode_label_patch(const LabelMap& patch) {
  if (patch.h != patch.w || patch.h <= 0) {
    throw ShapeError("label patch must be square, got " + std::to_string(patch.h) + "x" + std::to_string(patch.w));
  }
  const int side = patch.h;
  std::vector<std::int32_t> out(kEncodingLength);
  std::vector<int> counts;
  for (int cy = 0; cy < kEncodingSide; ++cy) {
    for (int cx = 0; cx < kEncodingSide; ++cx) {
      int y0 = cy * side / kEncodingSide, y1 = (cy + 1) * side / kEncodingSide;
      int x0 = cx * side / kEncodingSide, x1 = (cx + 1) * side / kEncodingSide;
      if (y1 <= y0) y1 = y0 + 1;
      if (x1 <= x0) x1 = x0 + 1;
      counts.assign(counts.size(), 0);
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          const int id = patch.at(y, x);
          if (id < 0) throw ConfigError("negative class id in label patch");
          if (static_cast<std::size_t>(id) >= counts.size()) counts.resize(static_cast<std::size_t>(id) + 1, 0);
          ++counts[static_cast<std::size_t>(id)];
        }
      }
      out[static_cast<std::size_t>(cy * kEncodingSide + cx)] =
          static_cast<std::int32_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  return out;
}

std::vector<PatchPair> pair_patches(const std::vector<std::vector<std::int32_t>>& synthetic,
                                    const std::vector<std::vector<std::int32_t>>& real, int min_matches) {
  if (synthetic.empty() || real.empty()) return {};
  auto flatten = [](const std::vector<std::vector<std::int32_t>>& rows) {
    std::vector<std::int32_t> flat;
    flat.reserve(rows.size() * kEncodingLength);
    for (const auto& r : rows) {
      if (r.size() != kEncodingLength) throw ShapeError("label encodings must have 256 entries");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return flat;
  };
  const auto q = flatten(synthetic), p = flatten(real);
  const auto best = kernels::best_equal_count(q.data(), static_cast<int>(synthetic.size()), p.data(),
                                              static_cast<int>(real.size()), kEncodingLength);
  std::vector<PatchPair> out;
  for (std::size_t i = 0; i < best.size(); ++i) {
    if (best[i].count > min_matches) out.push_back({static_cast<int>(i), best[i].index, best[i].count});
  }
  return out;
}

namespace {

struct PatchSet {
  std::vector<Tensor> pixels;
  std::vector<std::vector<std::int32_t>> codes;
};

PatchSet sample_patches(const LabeledSet& s, const SkvdConfig& cfg, std::mt19937_64& gen) {
  if (s.images.size() != s.labels.size() || s.images.empty()) {
    throw ConfigError("sKVD needs a non-empty set with one label map per image");
  }
  PatchSet out;
  for (std::size_t i = 0; i < s.images.size(); ++i) {
    const Shape sh = s.images[i].shape();
    const int side = std::min(sh.h, sh.w) / cfg.patch_divisor;
    if (side < 1) throw ConfigError("image too small for the sKVD patch divisor");
    if (s.labels[i].h != sh.h || s.labels[i].w != sh.w) throw ShapeError("label map does not match its image");
    std::uniform_int_distribution<int> py(0, sh.h - side), px(0, sh.w - side);
    for (int k = 0; k < cfg.patches_per_image; ++k) {
      const int y = py(gen), x = px(gen);
      out.pixels.push_back(s.images[i].crop(y, x, side, side));
      out.codes.push_back(encode_label_patch(s.labels[i].crop(y, x, side, side)));
    }
  }
  return out;
}

}  // namespace

std::vector<MetricReport> skvd(const LabeledSet& a, const LabeledSet& b, PerceptualBackbone& backbone,
                               const SkvdConfig& cfg) {
  if (cfg.patch_divisor < 1 || cfg.patches_per_image < 1 || cfg.n_subsets < 1 || cfg.subset_size < 2) {
    throw ConfigError("invalid sKVD configuration");
  }
  std::mt19937_64 gen(cfg.seed);
  const PatchSet pa = sample_patches(a, cfg, gen);
  const PatchSet pb = sample_patches(b, cfg, gen);
  const auto pairs = pair_patches(pa.codes, pb.codes, cfg.min_matches);
  const int retained = static_cast<int>(pairs.size());
  if (retained < 4) {
    throw MetricUndefined("sKVD: only " + std::to_string(retained) + " of " + std::to_string(pa.codes.size()) +
                          " patches found a label-aligned partner with more than " +
                          std::to_string(cfg.min_matches) + " equal entries");
  }
  const int subset = std::min(cfg.subset_size, retained / 2);

  // Backbone features only for patches that take part in a retained pair.
  std::vector<Tensor> xa, xb;
  for (const auto& p : pairs) {
    xa.push_back(pa.pixels[static_cast<std::size_t>(p.synthetic)]);
    xb.push_back(pb.pixels[static_cast<std::size_t>(p.real)]);
  }
  const auto fa = pooled_features_all(xa, backbone);
  const auto fb = pooled_features_all(xb, backbone);

  std::vector<std::vector<int>> first, second;
  for (int s = 0; s < cfg.n_subsets; ++s) {
    auto idx = draw_without_replacement(retained, 2 * subset, gen);
    first.emplace_back(idx.begin(), idx.begin() + subset);
    second.emplace_back(idx.begin() + subset, idx.end());
  }
  std::vector<MetricReport> out;
  for (int k = 0; k < backbone.num_taps(); ++k) {
    std::vector<double> values;
    for (int s = 0; s < cfg.n_subsets; ++s) {
      values.push_back(mmd2_unbiased(fa[static_cast<std::size_t>(k)].select(first[static_cast<std::size_t>(s)]),
                                     fb[static_cast<std::size_t>(k)].select(second[static_cast<std::size_t>(s)])));
    }
    const auto [mean, sd] = mean_std(values);
    out.push_back({"sKVD_L" + std::to_string(k + 1), 1000.0 * mean, 1000.0 * sd, subset, cfg.n_subsets, retained});
  }
  return out;
}

DensityMaps layout_density(const std::vector<LabelMap>& labels, int grid_h, int grid_w, int classes) {
  if (labels.empty()) throw ConfigError("layout density needs at least one label map");
  if (grid_h <= 0 || grid_w <= 0 || classes <= 0) throw ConfigError("layout density grid must be positive");
  DensityMaps d{classes, grid_h, grid_w, std::vector<double>(static_cast<std::size_t>(classes) * grid_h * grid_w)};
  const double inv = 1.0 / static_cast<double>(labels.size());
  for (const auto& m : labels) {
    const LabelMap g = resample_nearest(m, grid_h, grid_w);
    for (int y = 0; y < grid_h; ++y) {
      for (int x = 0; x < grid_w; ++x) {
        const int c = g.at(y, x);
        if (c < 0 || c >= classes) throw ConfigError("class id " + std::to_string(c) + " outside the palette");
        d.rho[(static_cast<std::size_t>(c) * grid_h + y) * grid_w + x] += inv;
      }
    }
  }
  return d;
}

}  // namespace gbe
