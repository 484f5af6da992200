#pragma once

// Training patch sampling: random crops, backbone embeddings of crops, an
// exact cosine-similarity index over real patches, and synthetic-first
// matched pair sampling.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gbe/discriminator.hpp"

namespace gbe {

struct PatchRef {
  int dataset = 0;  // 0 synthetic, 1 real
  int image = 0;
  int x = 0, y = 0;  // top-left corner
  int size = 0;
  std::vector<double> embedding;  // unit norm once stored
};

enum class CropPolicy { uniform, matched };

std::string crop_policy_name(CropPolicy p);
CropPolicy parse_crop_policy(const std::string& s);

/// `count` crops of side `crop` at i.i.d. uniform positions inside an h x w image.
std::vector<PatchRef> crop_patches(int h, int w, int dataset, int image, int crop, int count, Rng& rng);

/// Every crop position on a regular grid with the given step (last row/column flush with the border).
std::vector<PatchRef> grid_patches(int h, int w, int dataset, int image, int crop, int step);

/// Pixels of `p` from an image (1, C, H, W).
Tensor extract_patch(const Tensor& image, const PatchRef& p);
LabelMap extract_patch(const LabelMap& labels, const PatchRef& p);

/// Unit-normalised, globally pooled deepest-tap features of a square patch
/// whose side must equal `expected_side`.
std::vector<double> embed_patch(const Tensor& patch, PerceptualBackbone& backbone, int expected_side);

/// Scales v to unit L2 norm; zero vectors are rejected.
void normalize_in_place(std::vector<double>& v);

/// Exhaustive cosine-similarity index over unit-normalised rows.
class MatchIndex {
 public:
  MatchIndex() = default;
  MatchIndex(const std::vector<PatchRef>& real, double threshold = 0.5);

  /// Rows with cosine similarity strictly above the threshold; phi is normalised first.
  [[nodiscard]] std::vector<int> query(std::vector<double> phi) const;

  [[nodiscard]] int size() const { return rows_; }
  [[nodiscard]] int dim() const { return dim_; }
  [[nodiscard]] double threshold() const { return threshold_; }
  [[nodiscard]] const PatchRef& patch(int i) const { return refs_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] const std::vector<double>& matrix() const { return data_; }
  /// Largest similarity between phi and any row (diagnostics).
  [[nodiscard]] double best_similarity(std::vector<double> phi) const;

 private:
  std::vector<PatchRef> refs_;
  std::vector<double> data_;
  int rows_ = 0, dim_ = 0;
  double threshold_ = 0.5;
};

/// No synthetic patch has a partner above the similarity threshold.
class SamplingExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Synthetic-first pairing: pick a synthetic patch uniformly among those
/// with at least one match, then one of its matches uniformly.
class PairSampler {
 public:
  PairSampler(std::vector<PatchRef> synthetic, const MatchIndex& index);

  struct Pair {
    int synthetic = -1;
    int real = -1;
  };
  Pair sample(Rng& rng) const;

  [[nodiscard]] const PatchRef& synthetic(int i) const { return synthetic_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] const std::vector<int>& matches(int i) const { return matches_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] int matched_count() const { return static_cast<int>(usable_.size()); }
  /// Synthetic patches skipped for having no match.
  [[nodiscard]] int unmatched_count() const { return static_cast<int>(synthetic_.size() - usable_.size()); }
  [[nodiscard]] double mean_matches() const;

 private:
  std::vector<PatchRef> synthetic_;
  std::vector<std::vector<int>> matches_;
  std::vector<int> usable_;
};

/// EMB1 matrix file `<stem>.emb` plus JSON row manifest `<stem>.json`.
void write_embeddings(const std::filesystem::path& stem, const std::vector<PatchRef>& patches);
std::vector<PatchRef> read_embeddings(const std::filesystem::path& stem);

}  // namespace gbe
