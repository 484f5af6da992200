// Serial reference kernels. Direct loops, no blocking, no unfolding.

#include <cmath>

#include "gbe/kernels.hpp"

namespace gbe::kernels::reference {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda,
          const double* b, int ldb, double* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const double bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        s += av * bv;
      }
      c[i * ldc + j] += s;
    }
  }
}

void conv2d_forward(const ConvGeometry& g, int batch, const double* x, const double* w,
                    std::span<const double> bias, double* y) {
  const int oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  for (int n = 0; n < batch; ++n) {
    for (int co = 0; co < g.cout; ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double s = bias.empty() ? 0.0 : bias[co];
          for (int ci = 0; ci < g.cin; ++ci) {
            for (int ky = 0; ky < kk; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (int kx = 0; kx < kk; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                s += w[((co * g.cin + ci) * kk + ky) * kk + kx] *
                     x[((static_cast<long>(n) * g.cin + ci) * g.h + iy) * g.w + ix];
              }
            }
          }
          y[((static_cast<long>(n) * g.cout + co) * oh + oy) * ow + ox] = s;
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, int batch, const double* dy, const double* w,
                           double* dx) {
  const int oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  for (int n = 0; n < batch; ++n) {
    for (int co = 0; co < g.cout; ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double d = dy[((static_cast<long>(n) * g.cout + co) * oh + oy) * ow + ox];
          for (int ci = 0; ci < g.cin; ++ci) {
            for (int ky = 0; ky < kk; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (int kx = 0; kx < kk; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                dx[((static_cast<long>(n) * g.cin + ci) * g.h + iy) * g.w + ix] +=
                    d * w[((co * g.cin + ci) * kk + ky) * kk + kx];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, int batch, const double* x, const double* dy,
                            double* dw, std::span<double> dbias) {
  const int oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  for (int n = 0; n < batch; ++n) {
    for (int co = 0; co < g.cout; ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double d = dy[((static_cast<long>(n) * g.cout + co) * oh + oy) * ow + ox];
          if (!dbias.empty()) dbias[co] += d;
          for (int ci = 0; ci < g.cin; ++ci) {
            for (int ky = 0; ky < kk; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (int kx = 0; kx < kk; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                dw[((co * g.cin + ci) * kk + ky) * kk + kx] +=
                    d * x[((static_cast<long>(n) * g.cin + ci) * g.h + iy) * g.w + ix];
              }
            }
          }
        }
      }
    }
  }
}

void group_norm_forward(int batch, int channels, int groups, int plane, double eps, const double* x,
                        double* y, double* mean, double* inv_std) {
  const int cpg = channels / groups;
  const long count = static_cast<long>(cpg) * plane;
  for (int n = 0; n < batch; ++n) {
    for (int g = 0; g < groups; ++g) {
      const long base = (static_cast<long>(n) * channels + g * cpg) * plane;
      double mu = 0.0;
      for (long i = 0; i < count; ++i) mu += x[base + i];
      mu /= static_cast<double>(count);
      double var = 0.0;
      for (long i = 0; i < count; ++i) var += (x[base + i] - mu) * (x[base + i] - mu);
      var /= static_cast<double>(count);
      const double is = 1.0 / std::sqrt(var + eps);
      for (long i = 0; i < count; ++i) y[base + i] = (x[base + i] - mu) * is;
      mean[n * groups + g] = mu;
      inv_std[n * groups + g] = is;
    }
  }
}

void group_norm_backward(int batch, int channels, int groups, int plane, const double* y,
                         const double* inv_std, const double* dy, double* dx) {
  const int cpg = channels / groups;
  const long count = static_cast<long>(cpg) * plane;
  for (int n = 0; n < batch; ++n) {
    for (int g = 0; g < groups; ++g) {
      const long base = (static_cast<long>(n) * channels + g * cpg) * plane;
      double mean_dy = 0.0, mean_dy_y = 0.0;
      for (long i = 0; i < count; ++i) {
        mean_dy += dy[base + i];
        mean_dy_y += dy[base + i] * y[base + i];
      }
      mean_dy /= static_cast<double>(count);
      mean_dy_y /= static_cast<double>(count);
      const double is = inv_std[n * groups + g];
      for (long i = 0; i < count; ++i) {
        dx[base + i] += is * (dy[base + i] - mean_dy - y[base + i] * mean_dy_y);
      }
    }
  }
}

void fuse_masked(int streams, int channels, int plane, const double* features, const double* masks,
                 double* out) {
  for (int ch = 0; ch < channels; ++ch) {
    for (int p = 0; p < plane; ++p) {
      double s = 0.0;
      for (int c = 0; c < streams; ++c) {
        s += masks[static_cast<long>(c) * plane + p] *
             features[(static_cast<long>(c) * channels + ch) * plane + p];
      }
      out[static_cast<long>(ch) * plane + p] = s;
    }
  }
}

KernelSums polynomial_kernel_sums(const double* x, int n, const double* y, int m, int d) {
  auto k = [d](const double* a, const double* b) {
    double dot = 0.0;
    for (int i = 0; i < d; ++i) dot += a[i] * b[i];
    const double v = dot / d + 1.0;
    return v * v * v;
  };
  KernelSums s;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) s.xx_offdiag += k(x + static_cast<long>(i) * d, x + static_cast<long>(j) * d);
    }
  }
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (i != j) s.yy_offdiag += k(y + static_cast<long>(i) * d, y + static_cast<long>(j) * d);
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) s.xy += k(x + static_cast<long>(i) * d, y + static_cast<long>(j) * d);
  }
  return s;
}

std::vector<BestMatch> best_equal_count(const std::int32_t* queries, int nq, const std::int32_t* pool,
                                        int np, int len) {
  std::vector<BestMatch> out(nq);
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < np; ++j) {
      int count = 0;
      for (int k = 0; k < len; ++k) {
        count += queries[static_cast<long>(i) * len + k] == pool[static_cast<long>(j) * len + k];
      }
      if (out[i].index < 0 || count > out[i].count) out[i] = {j, count};
    }
  }
  return out;
}

std::vector<int> dot_above(const double* query, const double* rows, int m, int d, double threshold) {
  std::vector<int> hits;
  for (int j = 0; j < m; ++j) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += query[i] * rows[static_cast<long>(j) * d + i];
    if (s > threshold) hits.push_back(j);
  }
  return hits;
}

}  // namespace gbe::kernels::reference
