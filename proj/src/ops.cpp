#include "gbe/ops.hpp"

#include <algorithm>
#include <cmath>

#include "gbe/kernels.hpp"

namespace gbe {
namespace {

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + a.shape().str() + " vs " + b.shape().str());
  }
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

Var scalar_result(double v, std::vector<Var> inputs, std::function<void(Node&)> bw) {
  return make_result(Tensor({1, 1, 1, 1}, v), std::move(inputs), std::move(bw));
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Shape xs = x.shape(), ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  if (bias && static_cast<int>(bias.value().numel()) != ws.n) throw ShapeError("conv2d: bias size");
  kernels::ConvGeometry g{xs.c, ws.n, ws.h, stride, pad, xs.h, xs.w};
  if (g.out_h() <= 0 || g.out_w() <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());
  Tensor y({xs.n, ws.n, g.out_h(), g.out_w()});
  std::span<const double> b;
  if (bias) b = bias.value().values();
  kernels::conv2d_forward(g, xs.n, x.value().data(), weight.value().data(), b, y.data());
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return make_result(std::move(y), std::move(inputs), [g, has_bias](Node& self) {
    Node& xn = in(self, 0);
    Node& wn = in(self, 1);
    const int batch = xn.value.shape().n;
    if (needs_grad(xn)) {
      Tensor dx(xn.value.shape());
      kernels::conv2d_backward_input(g, batch, self.grad.data(), wn.value.data(), dx.data());
      accumulate_grad(xn, dx);
    }
    const bool need_b = has_bias && needs_grad(in(self, 2));
    if (needs_grad(wn) || need_b) {
      Tensor dw(wn.value.shape());
      Tensor db(need_b ? in(self, 2).value.shape() : Shape{0, 0, 0, 0});
      kernels::conv2d_backward_weight(g, batch, xn.value.data(), self.grad.data(), dw.data(),
                                      need_b ? db.values() : std::span<double>());
      accumulate_grad(wn, dw);
      if (need_b) accumulate_grad(in(self, 2), db);
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor y = a.value();
  y += b.value();
  return make_result(std::move(y), {a, b}, [](Node& self) {
    accumulate_grad(in(self, 0), self.grad);
    accumulate_grad(in(self, 1), self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    accumulate_grad(in(self, 0), self.grad);
    if (in(self, 1).requires_grad) {
      Tensor g = self.grad;
      g *= -1.0;
      accumulate_grad(in(self, 1), g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& me = in(self, k);
      if (!me.requires_grad) continue;
      const Tensor& other = in(self, 1 - k).value;
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= other[i];
      accumulate_grad(me, g);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor y = a.value();
  y *= s;
  return make_result(std::move(y), {a}, [s](Node& self) {
    Tensor g = self.grad;
    g *= s;
    accumulate_grad(in(self, 0), g);
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (auto& v : y.values()) v += s;
  return make_result(std::move(y), {a}, [](Node& self) { accumulate_grad(in(self, 0), self.grad); });
}

Var add_n(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("add_n of nothing");
  Tensor y = parts[0].value();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    require_same(parts[0], parts[i], "add_n");
    y += parts[i].value();
  }
  return make_result(std::move(y), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) accumulate_grad(in(self, i), self.grad);
  });
}

Var relu(const Var& x) {
  Tensor y = x.value();
  for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(y), {x}, [](Node& self) {
    Tensor g = self.grad;
    const Tensor& yv = self.value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (yv[i] <= 0.0) g[i] = 0.0;
    }
    accumulate_grad(in(self, 0), g);
  });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor y = x.value();
  for (auto& v : y.values()) v = v > 0.0 ? v : v * slope;
  return make_result(std::move(y), {x}, [slope](Node& self) {
    Tensor g = self.grad;
    const Tensor& xv = in(self, 0).value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] <= 0.0) g[i] *= slope;
    }
    accumulate_grad(in(self, 0), g);
  });
}

Var clamp01(const Var& x) {
  Tensor y = x.value();
  for (auto& v : y.values()) v = std::clamp(v, 0.0, 1.0);
  return make_result(std::move(y), {x}, [](Node& self) {
    Tensor g = self.grad;
    const Tensor& xv = in(self, 0).value;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] <= 0.0 || xv[i] >= 1.0) g[i] = 0.0;
    }
    accumulate_grad(in(self, 0), g);
  });
}

Var group_norm(const Var& x, int groups, double eps) {
  const Shape s = x.shape();
  if (groups <= 0 || s.c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(s.c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  Tensor y(s);
  std::vector<double> mean(static_cast<std::size_t>(s.n) * groups), inv_std(mean.size());
  kernels::group_norm_forward(s.n, s.c, groups, static_cast<int>(s.plane()), eps, x.value().data(),
                              y.data(), mean.data(), inv_std.data());
  return make_result(std::move(y), {x}, [groups, inv_std](Node& self) {
    const Shape s = self.value.shape();
    Tensor dx(s);
    kernels::group_norm_backward(s.n, s.c, groups, static_cast<int>(s.plane()), self.value.data(),
                                 inv_std.data(), self.grad.data(), dx.data());
    accumulate_grad(in(self, 0), dx);
  });
}

Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
  const Shape s = x.shape();
  if (static_cast<int>(gamma.value().numel()) != s.c || static_cast<int>(beta.value().numel()) != s.c) {
    throw ShapeError("channel_affine: parameter size vs " + s.str());
  }
  Tensor y(s);
  const auto plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double gm = gamma.value()[c], bt = beta.value()[c];
      const double* xp = x.value().plane(n, c);
      double* yp = y.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) yp[p] = xp[p] * gm + bt;
    }
  }
  return make_result(std::move(y), {x, gamma, beta}, [](Node& self) {
    Node& xn = in(self, 0);
    Node& gn = in(self, 1);
    Node& bn = in(self, 2);
    const Shape s = xn.value.shape();
    const auto plane = s.plane();
    Tensor dx(s), dg(gn.value.shape()), db(bn.value.shape());
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const double gm = gn.value[c];
        const double* xp = xn.value.plane(n, c);
        const double* gp = self.grad.plane(n, c);
        double* dxp = dx.plane(n, c);
        double sg = 0.0, sb = 0.0;
        for (std::size_t p = 0; p < plane; ++p) {
          dxp[p] = gp[p] * gm;
          sg += gp[p] * xp[p];
          sb += gp[p];
        }
        dg[c] += sg;
        db[c] += sb;
      }
    }
    accumulate_grad(xn, dx);
    accumulate_grad(gn, dg);
    accumulate_grad(bn, db);
  });
}

Var concat(std::span<const Var> parts) {
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor y = concat_channels(values);
  return make_result(std::move(y), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
    int c0 = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      Node& p = in(self, i);
      const int cc = p.value.shape().c;
      if (p.requires_grad) accumulate_grad(p, self.grad.channels(c0, cc));
      c0 += cc;
    }
  });
}

Var slice_channels(const Var& x, int c0, int count) {
  Tensor y = x.value().channels(c0, count);
  return make_result(std::move(y), {x}, [c0, count](Node& self) {
    Node& xn = in(self, 0);
    const Shape s = xn.value.shape();
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n) {
      std::copy(self.grad.plane(n, 0), self.grad.plane(n, 0) + count * s.plane(), dx.plane(n, c0));
    }
    accumulate_grad(xn, dx);
  });
}

Var crop(const Var& x, int y0, int x0, int h, int w) {
  const Shape s = x.shape();
  if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > s.h || x0 + w > s.w) {
    throw ShapeError("crop window outside " + s.str());
  }
  return make_result(x.value().crop(y0, x0, h, w), {x}, [y0, x0, h, w](Node& self) {
    Node& xn = in(self, 0);
    const Shape xs = xn.value.shape();
    Tensor dx(xs);
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        for (int y = 0; y < h; ++y) {
          std::copy_n(&self.grad.at(n, c, y, 0), w, &dx.at(n, c, y0 + y, x0));
        }
      }
    }
    accumulate_grad(xn, dx);
  });
}

namespace {

struct LinearTap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LinearTap> bilinear_taps(int in_size, int out_size) {
  std::vector<LinearTap> taps(out_size);
  const double ratio = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in_size - 1) i0 = in_size - 1;
    const int i1 = std::min(i0 + 1, in_size - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  const Shape s = x.shape();
  if (s.h == out_h && s.w == out_w) return x;
  const auto ty = bilinear_taps(s.h, out_h);
  const auto tx = bilinear_taps(s.w, out_w);
  Tensor y({s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.value().plane(n, c);
      double* dst = y.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[ox];
          const double top = src[a.i0 * s.w + b.i0] * (1 - b.w1) + src[a.i0 * s.w + b.i1] * b.w1;
          const double bot = src[a.i1 * s.w + b.i0] * (1 - b.w1) + src[a.i1 * s.w + b.i1] * b.w1;
          dst[oy * out_w + ox] = top * (1 - a.w1) + bot * a.w1;
        }
      }
    }
  }
  return make_result(std::move(y), {x}, [ty, tx](Node& self) {
    Node& xn = in(self, 0);
    const Shape s = xn.value.shape();
    const int out_h = self.value.shape().h, out_w = self.value.shape().w;
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const double* g = self.grad.plane(n, c);
        double* d = dx.plane(n, c);
        for (int oy = 0; oy < out_h; ++oy) {
          const auto& a = ty[oy];
          for (int ox = 0; ox < out_w; ++ox) {
            const auto& b = tx[ox];
            const double v = g[oy * out_w + ox];
            d[a.i0 * s.w + b.i0] += v * (1 - a.w1) * (1 - b.w1);
            d[a.i0 * s.w + b.i1] += v * (1 - a.w1) * b.w1;
            d[a.i1 * s.w + b.i0] += v * a.w1 * (1 - b.w1);
            d[a.i1 * s.w + b.i1] += v * a.w1 * b.w1;
          }
        }
      }
    }
    accumulate_grad(xn, dx);
  });
}

Var avg_pool(const Var& x, int k) {
  const Shape s = x.shape();
  if (k == 1) return x;
  if (k <= 0 || s.h % k != 0 || s.w % k != 0) {
    throw ShapeError("avg_pool: " + s.str() + " not divisible by " + std::to_string(k));
  }
  const int oh = s.h / k, ow = s.w / k;
  const double inv = 1.0 / (k * k);
  Tensor y({s.n, s.c, oh, ow});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.value().plane(n, c);
      double* dst = y.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * s.w + ox * k + dx];
          }
          dst[oy * ow + ox] = acc * inv;
        }
      }
    }
  }
  return make_result(std::move(y), {x}, [k, inv](Node& self) {
    Node& xn = in(self, 0);
    const Shape s = xn.value.shape();
    const int ow = s.w / k;
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const double* g = self.grad.plane(n, c);
        double* d = dx.plane(n, c);
        for (int y = 0; y < s.h; ++y) {
          for (int xx = 0; xx < s.w; ++xx) d[y * s.w + xx] = g[(y / k) * ow + xx / k] * inv;
        }
      }
    }
    accumulate_grad(xn, dx);
  });
}

Var global_avg_pool(const Var& x) {
  const Shape s = x.shape();
  Tensor y({s.n, s.c, 1, 1});
  const auto plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* p = x.value().plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      y.at(n, c, 0, 0) = acc / static_cast<double>(plane);
    }
  }
  return make_result(std::move(y), {x}, [](Node& self) {
    Node& xn = in(self, 0);
    const Shape s = xn.value.shape();
    const auto plane = s.plane();
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const double g = self.grad.at(n, c, 0, 0) / static_cast<double>(plane);
        std::fill(dx.plane(n, c), dx.plane(n, c) + plane, g);
      }
    }
    accumulate_grad(xn, dx);
  });
}

Var sum(const Var& x) {
  return scalar_result(x.value().sum(), {x}, [](Node& self) {
    Node& xn = in(self, 0);
    accumulate_grad(xn, Tensor(xn.value.shape(), self.grad[0]));
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().numel());
  return scalar_result(x.value().sum() / n, {x}, [n](Node& self) {
    Node& xn = in(self, 0);
    accumulate_grad(xn, Tensor(xn.value.shape(), self.grad[0] / n));
  });
}

Var mean_squared_to(const Var& x, double target) {
  const auto& v = x.value();
  double acc = 0.0;
  for (double e : v.values()) acc += (e - target) * (e - target);
  const double n = static_cast<double>(v.numel());
  return scalar_result(acc / n, {x}, [target, n](Node& self) {
    Node& xn = in(self, 0);
    Tensor g(xn.value.shape());
    const double k = 2.0 * self.grad[0] / n;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = k * (xn.value[i] - target);
    accumulate_grad(xn, g);
  });
}

Var mean_squared_diff(const Var& a, const Var& b) {
  require_same(a, b, "mean_squared_diff");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  const double n = static_cast<double>(a.value().numel());
  return scalar_result(acc / n, {a, b}, [n](Node& self) {
    Node& an = in(self, 0);
    Node& bn = in(self, 1);
    Tensor g(an.value.shape());
    const double k = 2.0 * self.grad[0] / n;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = k * (an.value[i] - bn.value[i]);
    if (bn.requires_grad) {
      Tensor gb = g;
      gb *= -1.0;
      accumulate_grad(bn, gb);
    }
    accumulate_grad(an, g);
  });
}

Var unit_normalize_channels(const Var& x, double eps) {
  const Shape s = x.shape();
  const auto plane = s.plane();
  Tensor y(s);
  std::vector<double> norms(static_cast<std::size_t>(s.n) * plane);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      double ss = 0.0;
      for (int c = 0; c < s.c; ++c) ss += x.value().plane(n, c)[p] * x.value().plane(n, c)[p];
      const double nv = std::sqrt(ss);
      norms[n * plane + p] = nv;
      for (int c = 0; c < s.c; ++c) y.plane(n, c)[p] = x.value().plane(n, c)[p] / (nv + eps);
    }
  }
  return make_result(std::move(y), {x}, [norms, eps](Node& self) {
    Node& xn = in(self, 0);
    const Shape s = xn.value.shape();
    const auto plane = s.plane();
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double nv = norms[n * plane + p];
        const double d = nv + eps;
        double fg = 0.0;
        for (int c = 0; c < s.c; ++c) fg += xn.value.plane(n, c)[p] * self.grad.plane(n, c)[p];
        const double k = nv > 0.0 ? fg / (d * d * nv) : 0.0;
        for (int c = 0; c < s.c; ++c) {
          dx.plane(n, c)[p] = self.grad.plane(n, c)[p] / d - xn.value.plane(n, c)[p] * k;
        }
      }
    }
    accumulate_grad(xn, dx);
  });
}

Var fuse_streams(std::span<const Var> features, const Tensor& masks) {
  if (features.empty()) throw ShapeError("fuse_streams: no streams");
  const Shape fs = features[0].shape();
  const int streams = static_cast<int>(features.size());
  if (fs.n != 1) throw ShapeError("fuse_streams: batch must be 1");
  if (masks.shape().c != streams || masks.shape().h != fs.h || masks.shape().w != fs.w) {
    throw ShapeError("fuse_streams: masks " + masks.shape().str() + " vs " + std::to_string(streams) +
                     " streams of " + fs.str());
  }
  const int plane = static_cast<int>(fs.plane());
  for (int p = 0; p < plane; ++p) {
    double total = 0.0;
    for (int c = 0; c < streams; ++c) total += masks[static_cast<std::size_t>(c) * plane + p];
    if (std::abs(total - 1.0) > 1e-6) {
      throw ShapeError("fuse_streams: masks do not partition pixel " + std::to_string(p) +
                       " (sum " + std::to_string(total) + ")");
    }
  }
  std::vector<double> stacked(static_cast<std::size_t>(streams) * fs.numel());
  for (int c = 0; c < streams; ++c) {
    if (features[c].shape() != fs) throw ShapeError("fuse_streams: stream shapes differ");
    std::copy(features[c].value().data(), features[c].value().data() + fs.numel(),
              stacked.begin() + static_cast<long>(c) * fs.numel());
  }
  Tensor y(fs);
  kernels::fuse_masked(streams, fs.c, plane, stacked.data(), masks.data(), y.data());
  return make_result(std::move(y), std::vector<Var>(features.begin(), features.end()),
                     [masks](Node& self) {
                       const Shape s = self.value.shape();
                       const int plane = static_cast<int>(s.plane());
                       for (std::size_t c = 0; c < self.inputs.size(); ++c) {
                         Node& f = in(self, c);
                         if (!f.requires_grad) continue;
                         Tensor g(s);
                         const double* m = masks.data() + c * plane;
                         for (int ch = 0; ch < s.c; ++ch) {
                           const double* gi = self.grad.plane(0, ch);
                           double* go = g.plane(0, ch);
                           for (int p = 0; p < plane; ++p) go[p] = gi[p] * m[p];
                         }
                         accumulate_grad(f, g);
                       }
                     });
}

Var project_embedding(const Var& y, const Var& table, const LabelMap& labels) {
  const Shape ys = y.shape(), ts = table.shape();
  if (ys.n != 1) throw ShapeError("project_embedding: batch must be 1");
  if (ts.c != ys.c) throw ShapeError("project_embedding: embedding width " + std::to_string(ts.c) +
                                     " vs feature channels " + std::to_string(ys.c));
  if (labels.h != ys.h || labels.w != ys.w) throw ShapeError("project_embedding: label resolution");
  const int plane = static_cast<int>(ys.plane());
  const int classes = ts.n, width = ts.c;
  for (auto id : labels.ids) {
    if (id < 0 || id >= classes) {
      throw ConfigError("project_embedding: class id " + std::to_string(id) + " outside palette of " +
                        std::to_string(classes));
    }
  }
  Tensor out({1, 1, ys.h, ys.w});
  for (int p = 0; p < plane; ++p) {
    const double* e = table.value().data() + static_cast<std::size_t>(labels.ids[p]) * width;
    double acc = 0.0;
    for (int ch = 0; ch < width; ++ch) acc += y.value().plane(0, ch)[p] * e[ch];
    out[p] = acc;
  }
  return make_result(std::move(out), {y, table}, [labels](Node& self) {
    Node& yn = in(self, 0);
    Node& tn = in(self, 1);
    const int plane = static_cast<int>(yn.value.shape().plane());
    const int width = tn.value.shape().c;
    if (yn.requires_grad) {
      Tensor dy(yn.value.shape());
      for (int p = 0; p < plane; ++p) {
        const double* e = tn.value.data() + static_cast<std::size_t>(labels.ids[p]) * width;
        for (int ch = 0; ch < width; ++ch) dy.plane(0, ch)[p] = self.grad[p] * e[ch];
      }
      accumulate_grad(yn, dy);
    }
    if (tn.requires_grad) {
      Tensor dt(tn.value.shape());
      for (int p = 0; p < plane; ++p) {
        double* e = dt.data() + static_cast<std::size_t>(labels.ids[p]) * width;
        for (int ch = 0; ch < width; ++ch) e[ch] += self.grad[p] * yn.value.plane(0, ch)[p];
      }
      accumulate_grad(tn, dt);
    }
  });
}

namespace {

// v = W^T u / |W^T u|; returns |W^T u|.
double right_vector(const Tensor& w, int rows, int cols, const Tensor& u, std::vector<double>& v) {
  v.assign(cols, 0.0);
  for (int r = 0; r < rows; ++r) {
    const double ur = u[r];
    const double* wr = w.data() + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) v[c] += wr[c] * ur;
  }
  double nv = 0.0;
  for (double e : v) nv += e * e;
  nv = std::sqrt(nv);
  if (nv > 0.0) {
    for (auto& e : v) e /= nv;
  }
  return nv;
}

}  // namespace

double spectral_sigma(const Tensor& weight, const SpectralState& state) {
  const int rows = weight.shape().n;
  const int cols = static_cast<int>(weight.numel() / rows);
  std::vector<double> v;
  return right_vector(weight, rows, cols, state.u, v);
}

Var spectral_normalize(const Var& weight, SpectralState& state, int iterations) {
  const Tensor& w = weight.value();
  const int rows = w.shape().n;
  const int cols = static_cast<int>(w.numel() / rows);
  if (static_cast<int>(state.u.numel()) != rows) throw ShapeError("spectral_normalize: u size");
  std::vector<double> v;
  for (int it = 0; it < iterations; ++it) {
    right_vector(w, rows, cols, state.u, v);
    double nu = 0.0;
    for (int r = 0; r < rows; ++r) {
      const double* wr = w.data() + static_cast<std::size_t>(r) * cols;
      double acc = 0.0;
      for (int c = 0; c < cols; ++c) acc += wr[c] * v[c];
      state.u[r] = acc;
      nu += acc * acc;
    }
    nu = std::sqrt(nu);
    if (nu > 0.0) state.u *= 1.0 / nu;
  }
  const double sigma = right_vector(w, rows, cols, state.u, v);
  if (!(sigma > 0.0)) {
    // An all-zero weight has nothing to normalise; pass it through unchanged.
    return make_result(w, {weight}, [](Node& self) { accumulate_grad(in(self, 0), self.grad); });
  }
  Tensor y = w;
  y *= 1.0 / sigma;
  Tensor u = state.u;
  return make_result(std::move(y), {weight}, [sigma, u, v, rows, cols](Node& self) {
    Node& wn = in(self, 0);
    // dL/dW = G/sigma - <G, W>/sigma^2 * u v^T
    double gw = 0.0;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) gw += self.grad[i] * wn.value[i];
    const double k = gw / (sigma * sigma);
    Tensor g(wn.value.shape());
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * cols + c;
        g[i] = self.grad[i] / sigma - k * u[r] * v[c];
      }
    }
    accumulate_grad(wn, g);
  });
}

}  // namespace gbe
