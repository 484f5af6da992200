#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gbe/discriminator.hpp"
#include "support.hpp"

using namespace gbe;
using gbe::testing::random_tensor;

namespace {

BackboneConfig small_backbone() {
  BackboneConfig c;
  c.widths = {4, 6, 8, 8, 8};
  c.convs_per_stage = 1;
  c.seed = 7;
  return c;
}

LabelMap stripes(int h, int w, int classes) {
  LabelMap m(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) m.at(y, x) = (x + 2 * y) % classes;
  }
  return m;
}

Var image_var(int h, int w, std::uint64_t seed, bool grad = false) {
  return Var(random_tensor({1, 3, h, w}, seed, 0.0, 1.0), grad);
}

}  // namespace

TEST_CASE("backbone taps halve in resolution and are deterministic") {
  RandomBackbone bb(small_backbone());
  const Var img = image_var(32, 32, 3);
  const auto a = bb.taps(img);
  const auto b = bb.taps(img);
  REQUIRE(a.size() == 5);
  for (int k = 0; k < 5; ++k) {
    CHECK(a[k].shape().h == 32 >> k);
    CHECK(a[k].shape().c == bb.tap_channels(k));
    CHECK(a[k].value().vec() == b[k].value().vec());
  }
  CHECK(RandomBackbone(small_backbone()).weight_hash() == bb.weight_hash());
}

TEST_CASE("backbone receptive field recurrence") {
  BackboneConfig two = small_backbone();
  two.convs_per_stage = 2;
  CHECK(RandomBackbone(small_backbone()).receptive_field() == 33);
  CHECK(RandomBackbone(two).receptive_field() == 95);
  CHECK(RandomBackbone(two).tap_receptive_field(0) == 5);
}

TEST_CASE("impulse probe stays inside the computed receptive field") {
  RandomBackbone bb(small_backbone());
  const int rf = bb.receptive_field();
  Var img = image_var(64, 64, 11, true);
  const auto taps = bb.taps(img);
  // Seed one spatial position of the deepest tap, all channels.
  Tensor seed(taps.back().shape());
  for (int c = 0; c < seed.shape().c; ++c) seed.at(0, c, 2, 2) = 1.0;
  backward(taps.back(), &seed);
  const Tensor& g = img.grad();
  int y0 = 64, y1 = -1, x0 = 64, x1 = -1;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        if (g.at(0, c, y, x) != 0.0) {
          y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
        }
      }
    }
  }
  REQUIRE(y1 >= 0);
  CHECK(y1 - y0 + 1 <= rf);
  CHECK(x1 - x0 + 1 <= rf);
  CHECK(y1 - y0 + 1 > bb.tap_receptive_field(3));
  CHECK(y0 >= 0);
}

TEST_CASE("backbone weights never receive gradients") {
  auto bb = std::make_shared<RandomBackbone>(small_backbone());
  Rng rng(1);
  EnsembleConfig ec;
  ec.width = 8;
  DiscriminatorEnsemble ens(ec, bb, rng);
  Var img = image_var(32, 32, 5, true);
  const LabelMap labels = stripes(32, 32, kNumClasses);
  const auto v = ens.score(img, &labels);
  REQUIRE(v.scores.size() == 5);
  backward(add_n(std::vector<Var>{sum(v.scores[0]), sum(v.scores[4])}));
  for (const auto& st : bb->stages) {
    for (const auto& conv : st) {
      CHECK_FALSE(conv.weight.has_grad());
      CHECK_FALSE(conv.bias.has_grad());
    }
  }
  CHECK(img.grad().max_abs() > 0.0);
}

TEST_CASE("projection score equals head plus label embedding inner product") {
  Rng rng(3);
  LevelConfig lc;
  lc.in_channels = 4;
  lc.width = 8;
  LevelDiscriminator d(lc, rng);
  const Var f(random_tensor({1, 4, 16, 16}, 9));
  const LabelMap labels = stripes(16, 16, kNumClasses);
  const auto out = d.forward(f, &labels);
  const Shape ys = out.y.shape();
  CHECK(ys.c == 8);
  CHECK(ys.h == 4);
  const LabelMap small = resample_nearest(labels, ys.h, ys.w);
  for (int y = 0; y < ys.h; ++y) {
    for (int x = 0; x < ys.w; ++x) {
      double dot = 0.0;
      for (int c = 0; c < ys.c; ++c) dot += out.y.value().at(0, c, y, x) * d.embedding.value().at(small.at(y, x), c, 0, 0);
      CHECK(out.score.value().at(0, 0, y, x) == doctest::Approx(out.z.value().at(0, 0, y, x) + dot).epsilon(1e-12));
    }
  }
}

TEST_CASE("single-pixel score by hand") {
  Rng rng(4);
  LevelConfig lc;
  lc.in_channels = 2;
  lc.width = 2;
  lc.strides = {1};
  lc.num_classes = 3;
  LevelDiscriminator d(lc, rng);
  // With one pixel, group norm zeroes the stem output; beta then sets y directly.
  d.gn_beta[0].mutable_value() = Tensor({1, 2, 1, 1}, std::vector<double>{0.5, -2.0});
  d.embedding.mutable_value() = Tensor({3, 2, 1, 1}, std::vector<double>{1, 1, 3.0, 0.25, 0, 0});
  LabelMap lab(1, 1, 1);
  const auto out = d.forward(Var(Tensor({1, 2, 1, 1}, std::vector<double>{0.3, -0.7})), &lab);
  const double y0 = 0.5, y1 = -2.0 * 0.2;  // leaky slope 0.2
  CHECK(out.y.value()[0] == doctest::Approx(y0));
  CHECK(out.y.value()[1] == doctest::Approx(y1));
  CHECK(out.score.value()[0] == doctest::Approx(out.z.value()[0] + 3.0 * y0 + 0.25 * y1).epsilon(1e-12));
}

TEST_CASE("vanishing projection leaves the head score") {
  Rng rng(5);
  LevelConfig lc;
  lc.in_channels = 3;
  lc.width = 8;
  LevelDiscriminator d(lc, rng);
  const Var f(random_tensor({1, 3, 8, 8}, 2));
  const LabelMap labels = stripes(8, 8, kNumClasses);

  SUBCASE("zero embedding table") {
    d.embedding.mutable_value().fill(0.0);
    const auto out = d.forward(f, &labels);
    CHECK(out.score.value().vec() == out.z.value().vec());
  }
  SUBCASE("zero stem output") {
    d.gn_gamma.back().mutable_value().fill(0.0);
    d.gn_beta.back().mutable_value().fill(0.0);
    const auto out = d.forward(f, &labels);
    CHECK(out.y.value().max_abs() == 0.0);
    CHECK(out.score.value().vec() == out.z.value().vec());
  }
  SUBCASE("projection disabled") {
    lc.projection = false;
    Rng r2(5);
    LevelDiscriminator plain(lc, r2);
    const auto out = plain.forward(f, nullptr);
    CHECK(out.score.value().vec() == out.z.value().vec());
  }
}

TEST_CASE("score is linear in the embedding table") {
  Rng rng(6);
  LevelConfig lc;
  lc.in_channels = 3;
  lc.width = 8;
  LevelDiscriminator d(lc, rng);
  const Var f(random_tensor({1, 3, 8, 8}, 12));
  const LabelMap labels = stripes(8, 8, kNumClasses);
  const Tensor e1 = random_tensor(d.embedding.shape(), 21);
  const Tensor e2 = random_tensor(d.embedding.shape(), 22);
  auto score_with = [&](const Tensor& e) {
    d.embedding.mutable_value() = e;
    return d.forward(f, &labels).score.value();
  };
  const Tensor z = score_with(Tensor(d.embedding.shape()));
  const Tensor s1 = score_with(e1), s2 = score_with(e2);
  Tensor combo = e1;
  combo *= 2.0;
  Tensor e2s = e2;
  e2s *= -0.5;
  combo += e2s;
  const Tensor sc = score_with(combo);
  for (std::size_t i = 0; i < sc.numel(); ++i) {
    const double expect = z[i] + 2.0 * (s1[i] - z[i]) - 0.5 * (s2[i] - z[i]);
    CHECK(sc[i] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("unknown class id is rejected") {
  Rng rng(7);
  LevelConfig lc;
  lc.in_channels = 3;
  lc.width = 4;
  LevelDiscriminator d(lc, rng);
  LabelMap bad = stripes(8, 8, kNumClasses);
  for (auto& id : bad.ids) id = kNumClasses;
  CHECK_THROWS_AS(d.forward(Var(random_tensor({1, 3, 8, 8}, 1)), &bad), ConfigError);
}

TEST_CASE("identical images give identical verdicts") {
  auto bb = std::make_shared<RandomBackbone>(small_backbone());
  Rng rng(8);
  EnsembleConfig ec;
  ec.width = 8;
  DiscriminatorEnsemble ens(ec, bb, rng);
  const LabelMap labels = stripes(32, 32, kNumClasses);
  const Tensor t = random_tensor({1, 3, 32, 32}, 40, 0.0, 1.0);
  NoGradGuard ng;
  const auto a = ens.score(Var(t), &labels);
  const auto b = ens.score(Var(Tensor(t)), &labels);
  for (std::size_t k = 0; k < a.scores.size(); ++k) CHECK(a.scores[k].value().vec() == b.scores[k].value().vec());
}

TEST_CASE("default backbone yields five score maps") {
  auto bb = std::make_shared<RandomBackbone>();
  Rng rng(9);
  EnsembleConfig ec;
  ec.width = 8;
  DiscriminatorEnsemble ens(ec, bb, rng);
  const LabelMap labels = stripes(32, 32, kNumClasses);
  NoGradGuard ng;
  const auto v = ens.score(image_var(32, 32, 1), &labels);
  CHECK(v.scores.size() == 5);
  CHECK(bb->tap_channels(4) == 512);
}

TEST_CASE("levels are independent") {
  auto bb = std::make_shared<RandomBackbone>(small_backbone());
  Rng rng(10);
  EnsembleConfig ec;
  ec.width = 8;
  DiscriminatorEnsemble ens(ec, bb, rng);
  const LabelMap labels = stripes(32, 32, kNumClasses);
  const Var img = image_var(32, 32, 13);
  ParamSet p0;
  ens.collect_level(0, p0);
  const auto v = ens.score(img, &labels);
  const Tensor alone = gradient(sum(v.scores[0]), p0.params[0].var);
  const Tensor with_zeroed = gradient(add(sum(v.scores[0]), scale(sum(v.scores[2]), 0.0)), p0.params[0].var);
  CHECK(alone.vec() == with_zeroed.vec());
  ParamSet p2;
  ens.collect_level(2, p2);
  CHECK(gradient(sum(v.scores[0]), p2.params[0].var).max_abs() == 0.0);
}

TEST_CASE("patchgan baseline reads four image scales without projection") {
  Rng rng(11);
  EnsembleConfig ec;
  ec.kind = EnsembleKind::patchgan;
  ec.width = 8;
  DiscriminatorEnsemble ens(ec, nullptr, rng);
  REQUIRE(ens.levels() == 4);
  CHECK_FALSE(ens.config().projection);
  const Var img = image_var(64, 64, 2);
  const auto inputs = ens.level_inputs(img);
  for (int k = 0; k < 4; ++k) CHECK(inputs[k].shape().h == 64 >> k);
  NoGradGuard ng;
  const auto v = ens.score(img, nullptr);
  for (int k = 0; k < 4; ++k) {
    CHECK(v.scores[k].shape().h == (64 >> k) / 4);
    CHECK(v.scores[k].value().vec() == ens.level(k).forward(inputs[k], nullptr).z.value().vec());
  }
}

TEST_CASE("accuracy tracker arithmetic") {
  AccuracyTracker t(1);
  CHECK(t.value(0) == 0.5);
  t.update(0, Tensor({1, 1, 2, 2}, 0.9), true);
  CHECK(t.value(0) == doctest::Approx(0.505).epsilon(1e-15));
  CHECK(AccuracyTracker::correctness(Tensor({1, 1, 1, 4}, std::vector<double>{0.1, 0.6, 0.5, 0.7}), true) == 0.5);
}

TEST_CASE("perfect separation drives accuracy monotonically to one") {
  AccuracyTracker t(2);
  const Tensor real({1, 1, 3, 3}, 0.8), fake({1, 1, 3, 3}, 0.2);
  double prev = t.value(0);
  for (int i = 0; i < 2000; ++i) {
    t.update(Verdict{{Var(i % 2 ? real : fake), Var(i % 2 ? real : fake)}}, i % 2 == 1);
    CHECK(t.value(0) > prev);
    prev = t.value(0);
  }
  CHECK(t.value(0) > 0.99);
}

TEST_CASE("symmetric random scores keep accuracy near one half") {
  AccuracyTracker t(1);
  std::mt19937_64 gen(77);
  std::normal_distribution<double> dist(0.5, 0.3);
  for (int i = 0; i < 1000; ++i) {
    Tensor s({1, 1, 4, 4});
    for (auto& v : s.values()) v = dist(gen);
    t.update(0, s, i % 2 == 0);
  }
  CHECK(std::abs(t.value(0) - 0.5) < 0.05);
}

TEST_CASE("label cache round trip and coherence") {
  const auto dir = std::filesystem::temp_directory_path() / "gbe_label_cache_test";
  std::filesystem::remove_all(dir);
  LayoutConfig cfg;
  const SceneSample s = render_scene(cfg, Style::source, 17);
  auto truth = std::make_shared<GroundTruthLabels>();
  CachedLabelProvider cached(truth, LabelCache(dir));
  CHECK_FALSE(LabelCache(dir).load(s.image).has_value());
  CHECK(cached.labels(s) == s.labels);
  REQUIRE(std::filesystem::exists(LabelCache(dir).path_for(s.image)));
  CHECK(cached.labels(s) == truth->labels(s));
  CHECK(*LabelCache(dir).load(s.image) == s.labels);

  const SceneSample other = render_scene(cfg, Style::source, 18);
  CHECK(LabelCache(dir).path_for(other.image) != LabelCache(dir).path_for(s.image));

  {
    std::fstream f(LabelCache(dir).path_for(s.image), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  CHECK_THROWS((void)LabelCache(dir).load(s.image));
  std::filesystem::remove_all(dir);
}
