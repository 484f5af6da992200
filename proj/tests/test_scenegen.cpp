#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gbe/scenegen.hpp"

using namespace gbe;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gbe_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  LayoutConfig cfg;
  const auto a = generate_dataset(cfg, 2, 7, Style::target);
  const auto b = generate_dataset(cfg, 2, 7, Style::target);
  for (int i = 0; i < 2; ++i) {
    CHECK(a[i].image.vec() == b[i].image.vec());
    CHECK(a[i].labels == b[i].labels);
    CHECK(a[i].gbuffers.depth.vec() == b[i].gbuffers.depth.vec());
  }
  const auto c = generate_dataset(cfg, 1, 8, Style::target);
  CHECK(c[0].image.vec() != a[0].image.vec());
}

TEST_CASE("object masks partition every pixel and labels are valid") {
  LayoutConfig cfg;
  for (const auto& s : generate_dataset(cfg, 4, 3, Style::source)) {
    const auto& m = s.gbuffers.object_masks;
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        double total = 0.0;
        for (int c = 0; c < m.shape().c; ++c) {
          const double v = m.at(0, c, y, x);
          CHECK((v == 0.0 || v == 1.0));
          total += v;
        }
        CHECK(total == 1.0);
        CHECK(s.labels.at(y, x) >= 0);
        CHECK(s.labels.at(y, x) < kNumClasses);
      }
    }
  }
}

TEST_CASE("geometry buffers are consistent") {
  LayoutConfig cfg;
  for (Style style : {Style::source, Style::target}) {
    const auto s = render_scene(cfg, style, 11);
    const auto& g = s.gbuffers;
    const Intrinsics k = camera_intrinsics(cfg, style);
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        // View vector from the pinhole model.
        const double a = (x + 0.5 - k.cx) / k.fx, b = -(y + 0.5 - k.cy) / k.fy;
        const double len = std::sqrt(a * a + b * b + 1.0);
        const double v[3] = {a / len, b / len, 1.0 / len};
        double n[3], r[3];
        for (int c = 0; c < 3; ++c) {
          n[c] = g.normal.at(0, c, y, x);
          r[c] = g.reflection.at(0, c, y, x);
        }
        const double vn = v[0] * n[0] + v[1] * n[1] + v[2] * n[2];
        for (int c = 0; c < 3; ++c) CHECK(std::abs(r[c] - (v[c] - 2.0 * vn * n[c])) < 1e-12);
        CHECK(std::abs(g.ndotr.at(0, 0, y, x) - (n[0] * r[0] + n[1] * r[1] + n[2] * r[2])) < 1e-6);
        const double rn = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
        CHECK(std::abs(rn - 1.0) < 1e-12);
        CHECK(g.depth.at(0, 0, y, x) > 0.0);
        if (g.sky_mask.at(0, 0, y, x) == 0.0) {
          CHECK(std::abs(std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) - 1.0) < 1e-12);
        }
        if (s.labels.at(y, x) == kRoad) {
          CHECK(n[0] == 0.0);
          CHECK(n[1] == 1.0);
          CHECK(n[2] == 0.0);
          // Ray-plane distance to y = -camera height.
          CHECK(std::abs(g.depth.at(0, 0, y, x) - kCameraHeight * len / -b) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("styles shift pixel statistics by the configured margin") {
  LayoutConfig cfg;
  cfg.target_layout = cfg.source_layout;
  const auto src = generate_dataset(cfg, 16, 5, Style::source);
  const auto tgt = generate_dataset(cfg, 16, 5, Style::target);
  double best = 0.0;
  for (int c = 0; c < 3; ++c) {
    double ms = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const std::size_t plane = src[i].image.shape().plane();
      for (std::size_t p = 0; p < plane; ++p) {
        ms += src[i].image.plane(0, c)[p];
        mt += tgt[i].image.plane(0, c)[p];
      }
    }
    best = std::max(best, std::abs(ms - mt) / (16.0 * cfg.height * cfg.width));
  }
  CHECK(best >= cfg.min_style_margin);
  // Same layout seed: identical labels across styles.
  CHECK(src[0].labels == tgt[0].labels);
}

TEST_CASE("invalid sizes are rejected") {
  LayoutConfig cfg;
  cfg.width = 68;
  CHECK_THROWS_AS(generate_dataset(cfg, 1, 0), ConfigError);
  cfg.width = 56;
  CHECK_THROWS_AS(generate_dataset(cfg, 1, 0), ConfigError);
  cfg.width = 64;
  CHECK_THROWS_AS(generate_dataset(cfg, 0, 0), ConfigError);
}

TEST_CASE("dataset containers round-trip losslessly") {
  LayoutConfig cfg;
  const auto samples = generate_dataset(cfg, 3, 21, Style::target);
  const auto dir = scratch("roundtrip");
  write_dataset(samples, cfg, dir);
  const auto back = read_dataset(dir);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].image.vec() == samples[i].image.vec());
    CHECK(back[i].labels == samples[i].labels);
    CHECK(back[i].seed == samples[i].seed);
    CHECK(back[i].style == samples[i].style);
    const auto f1 = back[i].gbuffers.fields();
    const auto f0 = samples[i].gbuffers.fields();
    for (std::size_t f = 0; f < f0.size(); ++f) {
      CHECK(f1[f]->shape() == f0[f]->shape());
      CHECK(f1[f]->vec() == f0[f]->vec());
    }
  }
  std::ifstream mf(dir / "manifest.json");
  const std::string text((std::istreambuf_iterator<char>(mf)), {});
  for (const auto& name : GBufferSet::field_names()) CHECK(text.find("\"" + name + "\"") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt or truncated containers raise an integrity error naming the sample") {
  LayoutConfig cfg;
  const auto samples = generate_dataset(cfg, 3, 22);
  const auto dir = scratch("corrupt");
  write_dataset(samples, cfg, dir);
  const auto data = dir / "samples.gbuf";
  const auto size = std::filesystem::file_size(data);

  {
    std::fstream f(data, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size - 100));
    f.put('\x7f');
  }
  try {
    read_dataset(dir);
    FAIL("expected an integrity error");
  } catch (const IntegrityError& e) {
    CHECK(e.sample() == 2);
  }

  std::filesystem::resize_file(data, size - size / 4);
  try {
    read_dataset(dir);
    FAIL("expected an integrity error");
  } catch (const IntegrityError& e) {
    CHECK(e.sample() == 2);
  }
  std::filesystem::remove_all(dir);
}
