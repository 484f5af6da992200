#include <Eigen/Dense>

#include "doctest.h"
#include "gbe/nn.hpp"
#include "gbe/ops.hpp"
#include "support.hpp"

using namespace gbe;
using gbe::testing::check_gradient;
using gbe::testing::random_tensor;

namespace {

// Weighted sum so that every output element carries a distinct gradient.
Var weighted(const Var& y, std::uint64_t seed) {
  return mul(y, Var(random_tensor(y.shape(), seed)));
}

}  // namespace

TEST_CASE("elementwise and reduction ops have correct gradients") {
  Var a(random_tensor({2, 3, 4, 5}, 1), true);
  Var b(random_tensor({2, 3, 4, 5}, 2), true);
  CHECK(check_gradient([&] { return weighted(mul(add(a, b), sub(a, b)), 3); }, a).relative_error < 1e-7);
  CHECK(check_gradient([&] { return weighted(leaky_relu(a, 0.2), 4); }, a).relative_error < 1e-7);
  CHECK(check_gradient([&] { return weighted(relu(scale(a, 1.5)), 5); }, a).relative_error < 1e-7);
  CHECK(check_gradient([&] { return weighted(clamp01(add_scalar(a, 0.3)), 6); }, a).relative_error < 1e-7);
  CHECK(check_gradient([&] { return mean_squared_diff(a, b); }, b).relative_error < 1e-7);
  CHECK(check_gradient([&] { return mean_squared_to(a, 1.0); }, a).relative_error < 1e-7);
  CHECK(check_gradient([&] { return weighted(global_avg_pool(a), 7); }, a).relative_error < 1e-7);
}

TEST_CASE("convolution gradients agree with finite differences") {
  for (int stride : {1, 2}) {
    Var x(random_tensor({2, 3, 7, 6}, 10), true);
    Var w(random_tensor({4, 3, 3, 3}, 11), true);
    Var bias(random_tensor({4, 1, 1, 1}, 12), true);
    auto f = [&] { return weighted(conv2d(x, w, bias, stride, 1), 13); };
    CHECK(check_gradient(f, x).relative_error < 1e-7);
    CHECK(check_gradient(f, w).relative_error < 1e-7);
    CHECK(check_gradient(f, bias).relative_error < 1e-7);
  }
}

TEST_CASE("normalisation, resampling and channel ops have correct gradients") {
  Var x(random_tensor({1, 6, 5, 4}, 20), true);
  Var gm(random_tensor({1, 6, 1, 1}, 21), true);
  Var bt(random_tensor({1, 6, 1, 1}, 22), true);
  CHECK(check_gradient([&] { return weighted(group_norm(x, 3), 23); }, x).relative_error < 1e-6);
  CHECK(check_gradient([&] { return weighted(channel_affine(x, gm, bt), 24); }, gm).relative_error < 1e-7);
  CHECK(check_gradient([&] { return weighted(resize_bilinear(x, 9, 7), 25); }, x).relative_error < 1e-7);
  CHECK(check_gradient([&] { return weighted(resize_bilinear(x, 3, 2), 26); }, x).relative_error < 1e-7);
  Var y(random_tensor({1, 2, 8, 6}, 27), true);
  CHECK(check_gradient([&] { return weighted(avg_pool(y, 2), 28); }, y).relative_error < 1e-7);
  CHECK(check_gradient([&] { return weighted(unit_normalize_channels(x), 29); }, x).relative_error < 1e-6);
  const Var parts[] = {x, Var(random_tensor({1, 2, 5, 4}, 30), true)};
  CHECK(check_gradient([&] { return weighted(slice_channels(concat(parts), 3, 4), 31); }, x).relative_error <
        1e-7);
  CHECK(check_gradient([&] { return weighted(crop(y, 1, 2, 5, 3), 32); }, y).relative_error < 1e-7);
  CHECK_THROWS_AS(crop(y, 4, 0, 5, 3), ShapeError);
}

TEST_CASE("resize_bilinear is the identity at equal size") {
  const Tensor t = random_tensor({1, 2, 5, 3}, 40);
  const Var r = resize_bilinear(Var(t), 5, 3);
  CHECK(r.value().vec() == t.vec());
}

TEST_CASE("fuse_streams validates the mask partition") {
  Var f0(random_tensor({1, 2, 3, 3}, 50)), f1(random_tensor({1, 2, 3, 3}, 51));
  const Var feats[] = {f0, f1};
  Tensor masks({1, 2, 3, 3});
  CHECK_THROWS_AS(fuse_streams(feats, masks), ShapeError);
  for (std::size_t i = 0; i < 9; ++i) masks[i] = 1.0;
  const Var out = fuse_streams(feats, masks);
  CHECK(out.value().vec() == f0.value().vec());
  CHECK_THROWS_AS(fuse_streams(feats, Tensor({1, 2, 2, 3})), ShapeError);
}

TEST_CASE("project_embedding gradients and palette check") {
  Var y(random_tensor({1, 4, 3, 2}, 60), true);
  Var table(random_tensor({3, 4, 1, 1}, 61), true);
  LabelMap labels(3, 2);
  labels.ids = {0, 1, 2, 2, 1, 0};
  auto f = [&] { return weighted(project_embedding(y, table, labels), 62); };
  CHECK(check_gradient(f, y).relative_error < 1e-7);
  CHECK(check_gradient(f, table).relative_error < 1e-7);
  labels.ids[3] = 3;
  CHECK_THROWS_AS(project_embedding(y, table, labels), ConfigError);
}

TEST_CASE("spectral normalisation bounds the top singular value") {
  Rng rng(70);
  Conv2d conv(5, 7, 3, 1, rng, true, true);
  for (int i = 0; i < 200; ++i) (void)spectral_normalize(conv.weight, conv.sn, 1);
  const Tensor w = conv.effective_weight();
  Eigen::MatrixXd m(7, 45);
  for (int r = 0; r < 7; ++r) {
    for (int c = 0; c < 45; ++c) m(r, c) = w[static_cast<std::size_t>(r) * 45 + c];
  }
  const double top = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
  CHECK(top <= 1.0 + 1e-3);
  CHECK(top >= 1.0 - 1e-3);
}

TEST_CASE("spectral normalisation gradient treats the singular vectors as constant") {
  Rng rng(71);
  Conv2d conv(3, 4, 3, 1, rng, false, true);
  Var x(random_tensor({1, 3, 5, 5}, 72), true);
  FreezeSpectralNorm freeze;
  auto f = [&] { return weighted(conv.forward(x), 73); };
  CHECK(check_gradient(f, conv.weight).relative_error < 1e-7);
  CHECK(check_gradient(f, x).relative_error < 1e-7);
}

TEST_CASE("backward through a shared subgraph accumulates once per use") {
  Var a(Tensor({1, 1, 1, 2}, {1.0, 2.0}), true);
  const Var b = mul(a, a);
  const Var c = add(b, b);
  backward(sum(c));
  CHECK(a.grad()[0] == doctest::Approx(4.0));
  CHECK(a.grad()[1] == doctest::Approx(8.0));
  const Tensor g = gradient(sum(c), a);
  CHECK(g[1] == doctest::Approx(8.0));
  CHECK(a.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("no-grad scope records no history") {
  Var a(Tensor({1, 1, 1, 1}, 3.0), true);
  NoGradGuard guard;
  const Var b = mul(a, a);
  CHECK_FALSE(b.requires_grad());
}

TEST_CASE("adam and clipping arithmetic") {
  Var p(Tensor({1, 1, 1, 2}, {3.0, -4.0}), true);
  ParamSet ps;
  ps.add("p", p);
  p.mutable_grad() = Tensor({1, 1, 1, 2}, {1200.0, 1600.0});
  CHECK(clip_grad_norm(ps, 1000.0) == doctest::Approx(2000.0));
  CHECK(ps.grad_norm() == doctest::Approx(1000.0).epsilon(1e-15));
  p.mutable_grad() = Tensor({1, 1, 1, 2}, {3.0, 4.0});
  CHECK(clip_grad_norm(ps, 1000.0) == 5.0);
  CHECK(p.grad()[0] == 3.0);
  Adam opt(ps, AdamConfig{0.9, 0.999, 1e-8, 0.0});
  opt.step(0.1);
  // The first bias-corrected Adam step moves each coordinate by lr * sign(g).
  CHECK(p.value()[0] == doctest::Approx(2.9).epsilon(1e-9));
  CHECK(p.value()[1] == doctest::Approx(-4.1).epsilon(1e-9));
  CHECK(opt.steps() == 1);
}
