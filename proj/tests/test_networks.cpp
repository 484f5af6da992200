#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "gbe/enhancer.hpp"
#include "gbe/scenegen.hpp"
#include "support.hpp"

using namespace gbe;
using gbe::testing::check_gradient;
using gbe::testing::random_tensor;

namespace {

Tensor one_hot_masks(int streams, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor m({1, streams, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) m.at(0, static_cast<int>(rng() % streams), y, x) = 1.0;
  }
  return m;
}

GeneratorConfig small_generator(GeneratorVariant v) {
  GeneratorConfig cfg;
  cfg.variant = v;
  cfg.encoder.n_streams = 3;
  cfg.encoder.scales = {1, 2};
  cfg.encoder.base_channels = 4;
  cfg.enhancer.scales = {1, 2};
  cfg.enhancer.channels = {4, 8};
  cfg.enhancer.blocks_per_stage = 1;
  cfg.enhancer.rad_blocks = 1;
  cfg.enhancer.spade_hidden = 4;
  return cfg;
}

std::map<std::string, Var> by_name(const ParamSet& ps) {
  std::map<std::string, Var> m;
  for (const auto& p : ps.params) m[p.name] = p.var;
  return m;
}

}  // namespace

TEST_CASE("residual block skip path") {
  Rng rng(1);
  ResidualBlock same(4, 4, 1, rng);
  CHECK_FALSE(same.has_projection());
  CHECK(ResidualBlock(4, 6, 1, rng).has_projection());
  CHECK(ResidualBlock(4, 4, 2, rng).has_projection());

  const Var x(random_tensor({1, 4, 6, 6}, 2));
  same.conv2.weight.mutable_value().fill(0.0);
  same.conv2.bias.mutable_value().fill(0.0);
  CHECK(same.forward(x).value().vec() == x.value().vec());
  same.conv1.weight.mutable_value().fill(0.0);
  same.conv1.bias.mutable_value().fill(0.0);
  CHECK(same.forward(x).value().vec() == x.value().vec());

  ResidualBlock down(4, 6, 2, rng);
  CHECK(down.forward(x).shape() == Shape{1, 6, 3, 3});
  CHECK_THROWS_AS(down.forward(Var(random_tensor({1, 5, 6, 6}, 3))), ShapeError);
}

TEST_CASE("fusion matches a per-pixel oracle") {
  Tensor f0({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}), f1({1, 1, 2, 2}, {-1.0, 0.5, 7.0, 0.25});
  Tensor m({1, 2, 2, 2}, {1, 0, 0.25, 1, 0, 1, 0.75, 0});
  const Var feats[] = {Var(f0), Var(f1)};
  const Tensor out = fuse_streams(feats, m).value();
  for (int p = 0; p < 4; ++p) CHECK(std::abs(out[p] - (m[p] * f0[p] + m[4 + p] * f1[p])) <= 1e-12);

  // Linearity in the features and locality of each mask.
  const Var scaled[] = {scale(Var(f0), 2.5), scale(Var(f1), 2.5)};
  const Tensor out2 = fuse_streams(scaled, m).value();
  for (int p = 0; p < 4; ++p) CHECK(out2[p] == doctest::Approx(2.5 * out[p]).epsilon(1e-15));
  Tensor f1b = f1;
  f1b[0] = 100.0;  // stream 1 has zero mask at pixel 0
  const Var feats_b[] = {Var(f0), Var(f1b)};
  CHECK(fuse_streams(feats_b, m).value().vec() == out.vec());
}

TEST_CASE("fusion gradient reaches every stream") {
  Var f0(random_tensor({1, 2, 4, 4}, 5), true), f1(random_tensor({1, 2, 4, 4}, 6), true);
  const Tensor m = one_hot_masks(2, 4, 4, 7);
  auto f = [&] {
    const Var parts[] = {f0, f1};
    return mul(fuse_streams(parts, m), Var(random_tensor({1, 2, 4, 4}, 8)));
  };
  CHECK(check_gradient(f, f0).relative_error < 1e-8);
  CHECK(check_gradient(f, f1).relative_error < 1e-8);
}

TEST_CASE("mask downsampling preserves the partition") {
  const Tensor m = one_hot_masks(3, 8, 8, 9);
  const Tensor d = downsample_masks(m, 2, 2);
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) CHECK(d.at(0, 0, y, x) + d.at(0, 1, y, x) + d.at(0, 2, y, x) == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(downsample_masks(m, 3, 3), ShapeError);
}

TEST_CASE("encoder pyramid shapes and stream symmetry") {
  EncoderConfig cfg;
  cfg.n_streams = 3;
  cfg.base_channels = 4;
  Rng rng(10);
  GBufferEncoder enc(cfg, rng);
  NoGradGuard no_grad;
  const Var g(random_tensor({1, 14, 16, 16}, 11));
  Tensor masks = one_hot_masks(3, 16, 16, 12);
  const FeaturePyramid pyr = enc.forward(g, masks);
  REQUIRE(pyr.size() == 4);
  for (int s : {1, 2, 4, 8}) {
    REQUIRE(pyr.count(s) == 1);
    CHECK(pyr.at(s).shape() == Shape{1, cfg.width_at_scale(s), 16 / s, 16 / s});
    CHECK(pyr.at(s).value().all_finite());
  }

  // Swap streams 0 and 2 together with their masks.
  std::swap(enc.streams[0], enc.streams[2]);
  Tensor swapped = masks;
  for (std::size_t p = 0; p < masks.shape().plane(); ++p) std::swap(swapped.plane(0, 0)[p], swapped.plane(0, 2)[p]);
  const FeaturePyramid pyr2 = enc.forward(g, swapped);
  for (int s : {1, 2, 4, 8}) CHECK(pyr2.at(s).value().vec() == pyr.at(s).value().vec());

  CHECK_THROWS_AS(enc.forward(Var(random_tensor({1, 13, 16, 16}, 13)), masks), ShapeError);
}

TEST_CASE("encoder gradient with respect to one G-buffer channel") {
  EncoderConfig cfg;
  cfg.n_streams = 2;
  cfg.scales = {1, 2};
  cfg.base_channels = 3;
  Rng rng(14);
  GBufferEncoder enc(cfg, rng);
  const Tensor g = random_tensor({1, 14, 16, 16}, 15);
  const Tensor masks = one_hot_masks(2, 16, 16, 16);
  Var depth(g.channels(3, 1), true);
  const Var before(g.channels(0, 3)), after(g.channels(4, 10));
  const Var w1(random_tensor({1, 3, 16, 16}, 17)), w2(random_tensor({1, 6, 8, 8}, 18));
  FreezeSpectralNorm freeze;
  auto f = [&] {
    const Var parts[] = {before, depth, after};
    const FeaturePyramid p = enc.forward(concat(parts), masks);
    return add(sum(mul(p.at(1), w1)), sum(mul(p.at(2), w2)));
  };
  const auto r = check_gradient(f, depth, 64, 1e-6);
  CHECK(r.analytic_norm > 0.0);
  CHECK(r.relative_error < 1e-4);
}

TEST_CASE("RAD identities") {
  Rng rng(20);
  RadModule rad(4, 8, 3, 8, rng);
  const Var x(random_tensor({1, 8, 6, 6}, 21));
  const Var g(random_tensor({1, 4, 6, 6}, 22));
  rad.to_gamma.weight.mutable_value().fill(0.0);
  rad.to_gamma.bias.mutable_value().fill(1.0);
  rad.to_beta.weight.mutable_value().fill(0.0);
  rad.to_beta.bias.mutable_value().fill(0.0);
  const Tensor out = rad_forward(x, g, rad).value();
  const Tensor gn = group_norm(x, rad.groups).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) diff = std::max(diff, std::abs(out[i] - gn[i]));
  CHECK(diff <= 1e-6);

  // Constant input per group: only beta survives.
  NoGradGuard no_grad;
  Rng rng2(23);
  RadModule rad2(4, 8, 3, 8, rng2);
  Tensor xc({1, 8, 6, 6});
  for (int c = 0; c < 8; ++c) {
    for (std::size_t p = 0; p < 36; ++p) xc.plane(0, c)[p] = 0.5 * (c / 2);
  }
  const Tensor out2 = rad_forward(Var(xc), g, rad2).value();
  const Tensor beta = rad2.modulation(g).second.value();
  for (std::size_t i = 0; i < out2.numel(); ++i) CHECK(out2[i] == beta[i]);

  CHECK_THROWS_AS(rad_forward(x, Var(random_tensor({1, 4, 3, 3}, 24)), rad), ShapeError);
}

TEST_CASE("RAD gradient with respect to the G-buffer features") {
  Rng rng(25);
  RadModule rad(3, 4, 3, 8, rng);
  const Var x(random_tensor({1, 4, 8, 8}, 26));
  Var g(random_tensor({1, 3, 8, 8}, 27), true);
  const Var w(random_tensor({1, 4, 8, 8}, 28));
  FreezeSpectralNorm freeze;
  auto f = [&] { return mul(rad_forward(x, g, rad), w); };
  const auto r = check_gradient(f, g, 96, 1e-6);
  CHECK(r.relative_error < 1e-4);
}

TEST_CASE("generator variants keep the image shape and stay in range") {
  for (auto v : {GeneratorVariant::rad, GeneratorVariant::concat, GeneratorVariant::no_gbuffer, GeneratorVariant::spade,
                 GeneratorVariant::group_affine}) {
    CAPTURE(generator_variant_name(v));
    Rng rng(30);
    Generator gen(small_generator(v), rng);
    for (int size : {8, 16}) {
      const Var img(random_tensor({1, 3, size, size + 8}, 31, 0.0, 1.0));
      const Var gb(random_tensor({1, 14, size, size + 8}, 32));
      const Var out = gen.forward(img, gb, one_hot_masks(3, size, size + 8, 33));
      CHECK(out.shape() == img.shape());
      CHECK(out.value().all_finite());
      CHECK(*std::min_element(out.value().vec().begin(), out.value().vec().end()) >= 0.0);
      CHECK(*std::max_element(out.value().vec().begin(), out.value().vec().end()) <= 1.0);
    }
    CHECK(gen.trunk.stem_resolution(16, 24) == std::pair{16, 24});
  }
}

TEST_CASE("gradients reach every generator parameter") {
  Rng rng(40);
  Generator gen(small_generator(GeneratorVariant::rad), rng);
  ParamSet ps;
  gen.collect(ps);
  const Var img(random_tensor({1, 3, 8, 8}, 41, 0.3, 0.7));
  const Var gb(random_tensor({1, 14, 8, 8}, 42));
  const Var out = gen.forward(img, gb, one_hot_masks(3, 8, 8, 43));
  backward(mean(mul(out, Var(random_tensor(out.shape(), 44)))));
  for (const auto& p : ps.params) {
    CAPTURE(p.name);
    CHECK(p.var.grad().max_abs() > 0.0);
  }
}

TEST_CASE("RAD with constant modulation equals the affine group-norm trunk") {
  Rng rng_a(50), rng_b(51);
  Generator rad(small_generator(GeneratorVariant::rad), rng_a);
  Generator gn(small_generator(GeneratorVariant::group_affine), rng_b);
  ParamSet pr, pg;
  rad.collect(pr);
  gn.collect(pg);
  Rng noise(52);
  for (auto& p : pr.params) {
    if (p.name.find(".rad.gamma.bias") != std::string::npos || p.name.find(".rad.beta.bias") != std::string::npos) {
      for (auto& v : p.var.mutable_value().values()) v = noise.normal(p.name.find("gamma") != std::string::npos ? 1.0 : 0.0, 0.3);
    }
  }
  zero_params(pr, ".rad.gamma.weight");
  zero_params(pr, ".rad.beta.weight");
  auto rp = by_name(pr);
  int copied = 0;
  for (auto& p : pg.params) {
    // "<norm>.gamma" in the affine trunk corresponds to "<norm>.rad.gamma.bias".
    std::string src = p.name;
    for (const std::string suffix : {".gamma", ".beta"}) {
      if (src.size() > suffix.size() && src.compare(src.size() - suffix.size(), suffix.size(), suffix) == 0) {
        src = src.substr(0, src.size() - suffix.size()) + ".rad" + suffix + ".bias";
        break;
      }
    }
    REQUIRE(rp.count(src) == 1);
    Tensor v = rp.at(src).value();
    p.var.mutable_value() = v.reshaped(p.var.shape());
    ++copied;
  }
  CHECK(copied == static_cast<int>(pg.params.size()));
  const Var img(random_tensor({1, 3, 16, 16}, 53, 0.0, 1.0));
  const Var gb(random_tensor({1, 14, 16, 16}, 54));
  const Tensor a = rad.forward(img, gb, one_hot_masks(3, 16, 16, 55)).value();
  const Tensor b = gn.forward(img, gb, one_hot_masks(3, 16, 16, 55)).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  CHECK(diff <= 1e-6);
}

TEST_CASE("zeroed G-buffers in the concatenated variant match a three-channel stem") {
  Rng rng_a(60), rng_b(61);
  Generator concat(small_generator(GeneratorVariant::concat), rng_a);
  Generator none(small_generator(GeneratorVariant::no_gbuffer), rng_b);
  ParamSet pc, pn;
  concat.collect(pc);
  none.collect(pn);
  auto cp = by_name(pc);
  for (auto& p : pn.params) p.var.mutable_value() = cp.at(p.name).value();
  const Var img(random_tensor({1, 3, 16, 16}, 62, 0.0, 1.0));
  const Var zeros(Tensor({1, 14, 16, 16}));
  const Tensor masks = one_hot_masks(3, 16, 16, 63);
  const Tensor a = concat.forward(img, zeros, masks).value();
  const Tensor b = none.forward(img, Var(random_tensor({1, 14, 16, 16}, 64)), masks).value();
  CHECK(a.vec() == b.vec());

  // The stem only sees the image: truncate its weight to the first three input channels.
  EnhancerConfig ec = concat.config().enhancer;
  ec.in_channels = 3;
  Rng rng_c(65);
  Enhancer trunk3(ec, {}, rng_c);
  ParamSet p3;
  trunk3.collect(p3, "generator.trunk");
  for (auto& p : p3.params) {
    const Tensor& src = cp.at(p.name).value();
    if (p.name == "generator.trunk.stem.conv.weight") {
      Tensor w(p.var.shape());
      for (int o = 0; o < w.shape().n; ++o) {
        for (int i = 0; i < 3; ++i) {
          for (int k = 0; k < 9; ++k) w[(static_cast<std::size_t>(o) * 3 + i) * 9 + k] = src[(static_cast<std::size_t>(o) * 17 + i) * 9 + k];
        }
      }
      p.var.mutable_value() = w;
    } else {
      p.var.mutable_value() = src;
    }
  }
  NormContext ctx;
  const Tensor c = trunk3.forward(img, ctx).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a[i] - c[i]));
  CHECK(diff <= 1e-12);
}

TEST_CASE("generator output is deterministic") {
  Rng rng_a(70), rng_b(70);
  Generator a(small_generator(GeneratorVariant::rad), rng_a), b(small_generator(GeneratorVariant::rad), rng_b);
  const Var img(random_tensor({1, 3, 16, 16}, 71, 0.0, 1.0));
  const Var gb(random_tensor({1, 14, 16, 16}, 72));
  const Tensor masks = one_hot_masks(3, 16, 16, 73);
  NoGradGuard ng;
  CHECK(a.forward(img, gb, masks).value().vec() == b.forward(img, gb, masks).value().vec());
}

TEST_CASE("missing pyramid scale is a configuration error") {
  Rng rng(80);
  GeneratorConfig cfg = small_generator(GeneratorVariant::rad);
  cfg.encoder.scales = {1};
  CHECK_THROWS_AS(Generator(cfg, rng), ConfigError);
  Generator gen(small_generator(GeneratorVariant::rad), rng);
  FeaturePyramid partial;
  partial[1] = Var(random_tensor({1, 4, 8, 8}, 81));
  NormContext ctx;
  ctx.pyramid = &partial;
  CHECK_THROWS_AS(gen.trunk.forward(Var(random_tensor({1, 3, 8, 8}, 82)), ctx), ConfigError);
}
