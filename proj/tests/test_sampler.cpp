#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gbe/sampler.hpp"
#include "support.hpp"

using namespace gbe;
using gbe::testing::random_tensor;

namespace {

PatchRef with_embedding(std::vector<double> e, int image = 0) {
  PatchRef p;
  p.image = image;
  p.size = 1;
  p.embedding = std::move(e);
  return p;
}

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.widths = {4, 8, 8, 16, 16};
  c.convs_per_stage = 1;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("uniform crops lie inside the image") {
  Rng rng(1);
  const auto ps = crop_patches(40, 64, 0, 3, 17, 500, rng);
  REQUIRE(ps.size() == 500);
  int max_x = 0, max_y = 0;
  for (const auto& p : ps) {
    CHECK(p.x >= 0);
    CHECK(p.y >= 0);
    CHECK(p.x + p.size <= 64);
    CHECK(p.y + p.size <= 40);
    CHECK(p.image == 3);
    max_x = std::max(max_x, p.x);
    max_y = std::max(max_y, p.y);
  }
  CHECK(max_x == 64 - 17);
  CHECK(max_y == 40 - 17);
}

TEST_CASE("full-size crop has one position and oversize crops are rejected") {
  Rng rng(2);
  for (const auto& p : crop_patches(32, 32, 1, 0, 32, 20, rng)) {
    CHECK(p.x == 0);
    CHECK(p.y == 0);
  }
  CHECK(grid_patches(32, 32, 0, 0, 32, 4).size() == 1);
  CHECK_THROWS_AS(crop_patches(32, 48, 0, 0, 33, 1, rng), ConfigError);
  CHECK_THROWS_AS(grid_patches(32, 48, 0, 0, 0, 1), ConfigError);
}

TEST_CASE("receptive-field crop covers about seven percent of a 526x1052 frame") {
  const double ratio = 196.0 * 196.0 / (526.0 * 1052.0);
  CHECK(ratio == doctest::Approx(0.07).epsilon(0.05));
}

TEST_CASE("grid crops reach the border") {
  const auto ps = grid_patches(64, 64, 0, 0, 33, 8);
  std::set<std::pair<int, int>> pos;
  for (const auto& p : ps) pos.insert({p.y, p.x});
  CHECK(pos.count({31, 31}) == 1);
  CHECK(pos.count({0, 0}) == 1);
  CHECK(pos.size() == 25);
}

TEST_CASE("patch extraction agrees between image and labels") {
  LayoutConfig cfg;
  const SceneSample s = render_scene(cfg, Style::target, 4);
  PatchRef p;
  p.x = 10;
  p.y = 20;
  p.size = 16;
  const Tensor img = extract_patch(s.image, p);
  const LabelMap lab = extract_patch(s.labels, p);
  CHECK(img.shape() == Shape{1, 3, 16, 16});
  CHECK(img.at(0, 1, 3, 5) == s.image.at(0, 1, 23, 15));
  CHECK(lab.at(3, 5) == s.labels.at(23, 15));
  p.x = 50;
  CHECK_THROWS_AS(extract_patch(s.image, p), ShapeError);
}

TEST_CASE("patch embeddings are unit vectors of the deepest tap width") {
  RandomBackbone bb(tiny_backbone());
  const int rf = bb.receptive_field();
  const Tensor patch = random_tensor({1, 3, rf, rf}, 5, 0.0, 1.0);
  const auto a = embed_patch(patch, bb, rf);
  const auto b = embed_patch(Tensor(patch), bb, rf);
  CHECK(a.size() == 16);
  CHECK(a == b);
  double n = 0.0;
  for (const double v : a) n += v * v;
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(embed_patch(random_tensor({1, 3, rf - 1, rf - 1}, 5), bb, rf), ShapeError);

  // A patch always matches itself.
  PatchRef r = with_embedding(a);
  const MatchIndex index({r});
  CHECK(index.query(a) == std::vector<int>{0});
}

TEST_CASE("default backbone embedding has 512 entries") {
  RandomBackbone bb;
  const int rf = bb.receptive_field();
  CHECK(rf == 95);
  CHECK(embed_patch(random_tensor({1, 3, rf, rf}, 8, 0.0, 1.0), bb, rf).size() == 512);
}

TEST_CASE("match threshold is strict") {
  const MatchIndex index({with_embedding({1, 0, 0, 0}), with_embedding({0.5, 0.5, 0.5, 0.5}),
                          with_embedding({0, 1, 0, 0})});
  // Every off-diagonal similarity here is exactly 0.5, so only identical directions match.
  CHECK(index.query({1, 0, 0, 0}) == std::vector<int>{0});
  CHECK(index.query({1, 1, 1, 1}) == std::vector<int>{1});
  CHECK(index.query({0, 0, 1, 0}).empty());
  CHECK(MatchIndex().query({1, 2}).empty());
}

TEST_CASE("orthogonal vectors never match") {
  const MatchIndex index({with_embedding({0, 3, 0})}, 0.0);
  CHECK(index.query({1, 0, 0}).empty());
  CHECK(index.query({0, 0, -1}).empty());
}

TEST_CASE("index query equals a brute-force cosine scan") {
  std::mt19937_64 gen(99);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 2.0);
  const int d = 512;
  std::vector<double> common(d);
  for (auto& v : common) v = nd(gen);
  auto draw = [&] {
    const double a = ud(gen);
    std::vector<double> e(d);
    for (int k = 0; k < d; ++k) e[k] = a * common[k] + nd(gen);
    return e;
  };
  std::vector<PatchRef> rows;
  for (int i = 0; i < 200; ++i) rows.push_back(with_embedding(draw(), i));
  const MatchIndex index(rows);
  long total = 0;
  for (int q = 0; q < 200; ++q) {
    const auto phi = draw();
    std::vector<int> brute;
    double qn = 0.0;
    for (const double v : phi) qn += v * v;
    for (int r = 0; r < 200; ++r) {
      double dot = 0.0, rn = 0.0;
      for (int k = 0; k < d; ++k) {
        dot += phi[k] * rows[r].embedding[k];
        rn += rows[r].embedding[k] * rows[r].embedding[k];
      }
      const double cosine = dot / std::sqrt(qn * rn);
      if (std::abs(cosine - 0.5) < 1e-9) continue;  // too close to call in floating point
      if (cosine > 0.5) brute.push_back(r);
    }
    auto got = index.query(phi);
    std::erase_if(got, [&](int r) {
      double dot = 0.0, rn = 0.0;
      for (int k = 0; k < d; ++k) {
        dot += phi[k] * rows[r].embedding[k];
        rn += rows[r].embedding[k] * rows[r].embedding[k];
      }
      return std::abs(dot / std::sqrt(qn * rn) - 0.5) < 1e-9;
    });
    CHECK(got == brute);
    total += static_cast<long>(brute.size());
  }
  CHECK(total > 0);
  CHECK(total < 200L * 200L);
}

TEST_CASE("query is scale invariant and stored rows have unit norm") {
  std::vector<PatchRef> rows;
  for (int i = 0; i < 30; ++i) {
    const Tensor t = random_tensor({1, 8, 1, 1}, 100 + i, -0.2, 1.0);
    rows.push_back(with_embedding(t.vec(), i));
  }
  const MatchIndex index(rows, 0.7);
  for (int r = 0; r < index.size(); ++r) {
    double n = 0.0;
    for (int k = 0; k < index.dim(); ++k) n += std::pow(index.matrix()[static_cast<std::size_t>(r) * 8 + k], 2);
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }
  const Tensor q = random_tensor({1, 8, 1, 1}, 7, -0.2, 1.0);
  std::vector<double> q2 = q.vec();
  for (auto& v : q2) v *= 2.0;
  CHECK(index.query(q.vec()) == index.query(q2));
}

TEST_CASE("one match per synthetic patch makes the pairing deterministic") {
  std::vector<PatchRef> real, synth;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> e(4, 0.0);
    e[i] = 1.0;
    real.push_back(with_embedding(e, i));
    synth.push_back(with_embedding(e, i));
  }
  const MatchIndex index(real);
  const PairSampler sampler(synth, index);
  CHECK(sampler.matched_count() == 4);
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto pair = sampler.sample(rng);
    CHECK(pair.real == pair.synthetic);
  }
}

TEST_CASE("duplicate real patches are drawn with equal frequency") {
  const std::vector<double> e{0.6, 0.8};
  std::vector<PatchRef> real{with_embedding(e, 0), with_embedding(e, 1), with_embedding(e, 2),
                             with_embedding({-1, 0}, 3)};
  const MatchIndex index(real);
  const PairSampler sampler({with_embedding(e), with_embedding({0, -1})}, index);
  CHECK(sampler.unmatched_count() == 1);
  Rng rng(4);
  std::array<int, 3> counts{};
  const int n = 10000;
  for (int t = 0; t < n; ++t) {
    const auto pair = sampler.sample(rng);
    REQUIRE(pair.synthetic == 0);
    REQUIRE(pair.real < 3);
    ++counts[static_cast<std::size_t>(pair.real)];
  }
  double chi2 = 0.0;
  for (const int c : counts) chi2 += std::pow(c - n / 3.0, 2) / (n / 3.0);
  CHECK(chi2 < 9.21);  // 2 degrees of freedom, p = 0.01
}

TEST_CASE("impossible threshold exhausts sampling") {
  const std::vector<double> e{1, 0};
  const MatchIndex index({with_embedding(e)}, 1.01);
  CHECK_THROWS_AS(PairSampler({with_embedding(e)}, index), SamplingExhausted);
  CHECK_THROWS_AS(PairSampler({with_embedding(e)}, MatchIndex()), SamplingExhausted);
}

TEST_CASE("embedding store round trip and corruption") {
  const auto stem = std::filesystem::temp_directory_path() / "gbe_emb_test" / "real";
  std::filesystem::remove_all(stem.parent_path());
  std::vector<PatchRef> rows;
  for (int i = 0; i < 5; ++i) {
    PatchRef p = with_embedding(random_tensor({1, 6, 1, 1}, 50 + i).vec(), i);
    p.dataset = 1;
    p.x = i;
    p.y = 2 * i;
    p.size = 33;
    rows.push_back(p);
  }
  write_embeddings(stem, rows);
  const auto back = read_embeddings(stem);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].embedding == rows[i].embedding);
    CHECK(back[i].x == rows[i].x);
    CHECK(back[i].y == rows[i].y);
    CHECK(back[i].size == 33);
    CHECK(back[i].dataset == 1);
  }
  {
    std::fstream f(stem.string() + ".emb", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20);
    f.put('\x55');
  }
  CHECK_THROWS(read_embeddings(stem));
  std::filesystem::remove_all(stem.parent_path());
}
