#pragma once

// Distribution distances between image sets: unbiased polynomial-kernel
// MMD, KID over whole-image features, sKVD over label-aligned patch pairs,
// and per-class layout density maps.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gbe/discriminator.hpp"

namespace gbe {

/// Row-major n x d feature matrix.
struct FeatureSet {
  int n = 0;
  int d = 0;
  std::vector<double> data;

  FeatureSet() = default;
  FeatureSet(int rows, int dim) : n(rows), d(dim), data(static_cast<std::size_t>(rows) * dim) {}
  [[nodiscard]] const double* row(int i) const { return data.data() + static_cast<std::size_t>(i) * d; }
  double* row(int i) { return data.data() + static_cast<std::size_t>(i) * d; }
  /// Rows listed in `idx`, in that order.
  [[nodiscard]] FeatureSet select(const std::vector<int>& idx) const;
};

/// Unbiased squared MMD with k(a, b) = (a.b/d + 1)^3. Needs at least two rows per set.
double mmd2_unbiased(const FeatureSet& x, const FeatureSet& y);

struct MetricReport {
  std::string name;
  double value = 0.0;  // mean x 1000
  double std = 0.0;    // x 1000
  int subset_size = 0;
  int subsets = 0;
  int retained_pairs = 0;  // sKVD only
};

/// Raised when a metric has no data to work with (e.g. no retained patch pairs).
class MetricUndefined : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean and population std of mmd2 over random subsets, both x 1000. When
/// `same_set` is true, each subset draws 2 * subset_size distinct rows of `a`
/// and splits them into disjoint halves.
MetricReport kid(const FeatureSet& a, const FeatureSet& b, int subset_size, int n_subsets, std::uint64_t seed,
                 bool same_set = false);

/// Globally pooled tap-k features for a batch of images (each (1, 3, h, w)).
FeatureSet pooled_features(const std::vector<Tensor>& images, PerceptualBackbone& backbone, int tap);
/// All taps at once: result[k] holds tap k.
std::vector<FeatureSet> pooled_features_all(const std::vector<Tensor>& images, PerceptualBackbone& backbone);

constexpr int kEncodingSide = 16;
constexpr int kEncodingLength = kEncodingSide * kEncodingSide;

/// 16 x 16 class grid of a square label patch; each cell takes the most
/// frequent class of its pixels (lowest id on ties, nearest pixel when the
/// patch is smaller than the grid).
std::vector<std::int32_t> encode_label_patch(const LabelMap& patch);

struct PatchPair {
  int synthetic = -1;
  int real = -1;
  int matches = 0;
  bool operator==(const PatchPair&) const = default;
};

/// Nearest real encoding (most equal entries, lowest index on ties) for
/// every synthetic encoding; keeps pairs with more than `min_matches` equal entries.
std::vector<PatchPair> pair_patches(const std::vector<std::vector<std::int32_t>>& synthetic,
                                    const std::vector<std::vector<std::int32_t>>& real, int min_matches = 128);

/// Images with their label maps.
struct LabeledSet {
  std::vector<Tensor> images;
  std::vector<LabelMap> labels;
};

struct SkvdConfig {
  /// Patch side = image side / patch_divisor.
  int patch_divisor = 8;
  int patches_per_image = 8;
  int subset_size = 100;
  int n_subsets = 10;
  int min_matches = kEncodingLength / 2;
  std::uint64_t seed = 0;
};

/// One report per backbone tap, named sKVD_L1..sKVD_Ln. Patches of `a` are
/// paired to patches of `b` by label encoding; each subset compares the
/// `a` side of subset_size pairs with the `b` side of subset_size other pairs.
std::vector<MetricReport> skvd(const LabeledSet& a, const LabeledSet& b, PerceptualBackbone& backbone,
                               const SkvdConfig& cfg);

struct DensityMaps {
  int classes = 0;
  int h = 0, w = 0;
  std::vector<double> rho;  // classes x h x w

  [[nodiscard]] double at(int c, int y, int x) const {
    return rho[(static_cast<std::size_t>(c) * h + y) * w + x];
  }
};

/// Fraction of maps whose (nearest-resampled) label at each grid cell is c.
DensityMaps layout_density(const std::vector<LabelMap>& labels, int grid_h, int grid_w, int classes = kNumClasses);

}  // namespace gbe
