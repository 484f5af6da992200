#pragma once

// Procedural deferred-shading toy renderer. A pinhole camera looks over a
// ground plane (road) towards a row of building facades under a sky; vehicle
// fronts and vegetation spheres are scattered in between. Every surface is
// analytic, so the G-buffers have closed-form values.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gbe/tensor.hpp"

namespace gbe {

enum class Style { source, target };

std::string style_name(Style s);
Style parse_style(const std::string& name);

/// Class ids of the default palette.
enum ClassId : std::int32_t { kSky = 0, kRoad = 1, kBuilding = 2, kVegetation = 3, kVehicle = 4 };
inline constexpr int kNumClasses = 5;

/// Camera height above the ground plane; the camera looks along +z with y up.
inline constexpr double kCameraHeight = 1.5;

struct PaletteEntry {
  std::string name;
  std::array<double, 3> albedo;
  double glossiness;
};

/// Colour transform applied after shading.
struct StyleParams {
  std::array<double, 3> tint{1.0, 1.0, 1.0};
  double gamma = 1.0;
  double noise = 0.0;              // std of additive Gaussian noise
  double texture_amplitude = 0.0;  // amplitude of a sinusoidal grain
  double texture_frequency = 0.0;  // grain cycles per pixel
};

/// Per-style positional priors.
struct LayoutBias {
  double horizon = 0.5;          // principal point row as a fraction of image height
  double vegetation_height = 0.6;  // mean sphere centre height above ground (world units)
  double vegetation_spread = 0.3;
  double building_height = 5.0;  // mean facade height (world units)
};

struct LayoutConfig {
  int height = 64;
  int width = 64;
  double focal = 0.9;  // focal length as a fraction of width
  std::vector<PaletteEntry> palette = default_palette();
  /// class id -> object-ID group (stream) index
  std::vector<int> object_groups{0, 1, 2, 3, 4};
  int max_vehicles = 3;
  int max_vegetation = 4;
  StyleParams source_style{};
  StyleParams target_style{{1.08, 0.97, 0.82}, 0.75, 0.02, 0.04, 0.35};
  LayoutBias source_layout{0.42, 0.5, 0.25, 6.0};
  LayoutBias target_layout{0.58, 1.4, 0.35, 3.5};
  /// Lower bound on the per-channel mean shift between styles checked by tests.
  double min_style_margin = 0.03;

  static std::vector<PaletteEntry> default_palette();
  [[nodiscard]] int num_classes() const { return static_cast<int>(palette.size()); }
  [[nodiscard]] int num_groups() const;
  [[nodiscard]] const StyleParams& style(Style s) const { return s == Style::source ? source_style : target_style; }
  [[nodiscard]] const LayoutBias& layout(Style s) const { return s == Style::source ? source_layout : target_layout; }
  /// Throws ConfigError when sizes or tables are invalid.
  void validate() const;
};

struct Intrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
};

Intrinsics camera_intrinsics(const LayoutConfig& cfg, Style style);

/// Per-pixel rendering buffers of one frame. All tensors are (1, C, H, W).
struct GBufferSet {
  Tensor normal;        // 3
  Tensor depth;         // 1, distance along the view ray
  Tensor albedo;        // 3
  Tensor glossiness;    // 1
  Tensor emission;      // 1
  Tensor sky_mask;      // 1
  Tensor reflection;    // 3, view vector reflected at the normal
  Tensor ndotr;         // 1
  Tensor object_masks;  // n_groups, one-hot per pixel

  /// Field names in storage order.
  static const std::vector<std::string>& field_names();
  [[nodiscard]] std::vector<const Tensor*> fields() const;
  std::vector<Tensor*> fields();
};

/// Number of channels in the network input stack built by gbuffer_stack.
inline constexpr int kGBufferChannels = 14;

/// Network input: normal, inverse depth, albedo, glossiness, emission, sky
/// mask, reflection and ndotr stacked to (1, 14, H, W).
Tensor gbuffer_stack(const GBufferSet& g);

struct SceneSample {
  Tensor image;  // (1, 3, H, W) in [0, 1]
  GBufferSet gbuffers;
  LabelMap labels;
  Style style = Style::source;
  std::uint64_t seed = 0;
};

/// Renders a single frame. Same (cfg, style, seed) gives a bit-identical sample.
SceneSample render_scene(const LayoutConfig& cfg, Style style, std::uint64_t seed);

/// Seed of sample `index` in a dataset generated with `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);

std::vector<SceneSample> generate_dataset(const LayoutConfig& cfg, int n, std::uint64_t seed,
                                          Style style = Style::source);

/// Raised for corrupt or truncated dataset containers.
class IntegrityError : public std::runtime_error {
 public:
  IntegrityError(std::size_t sample, const std::string& what)
      : std::runtime_error("sample " + std::to_string(sample) + ": " + what), sample_(sample) {}
  [[nodiscard]] std::size_t sample() const { return sample_; }

 private:
  std::size_t sample_;
};

/// Writes `manifest.json` and the blob file `samples.gbuf` into `dir`.
/// Returns the manifest path.
std::filesystem::path write_dataset(const std::vector<SceneSample>& samples, const LayoutConfig& cfg,
                                    const std::filesystem::path& dir);
std::vector<SceneSample> read_dataset(const std::filesystem::path& dir);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ULL);

}  // namespace gbe
