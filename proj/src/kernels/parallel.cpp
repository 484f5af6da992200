#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "gbe/kernels.hpp"

namespace gbe::kernels {
namespace {

constexpr int kMr = 4;
constexpr int kNr = 16;

// Register-blocked kMr x kNr tile of C += A * B over the full depth k.
inline void tile_full(int k, const double* a, int lda, const double* b, int ldb, double* c, int ldc) {
  double acc[kMr][kNr] = {};
  for (int p = 0; p < k; ++p) {
    const double* bp = b + static_cast<long>(p) * ldb;
    for (int r = 0; r < kMr; ++r) {
      const double av = a[static_cast<long>(r) * lda + p];
#pragma omp simd
      for (int j = 0; j < kNr; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (int r = 0; r < kMr; ++r) {
    double* cr = c + static_cast<long>(r) * ldc;
#pragma omp simd
    for (int j = 0; j < kNr; ++j) cr[j] += acc[r][j];
  }
}

inline void tile_edge(int mr, int nr, int k, const double* a, int lda, const double* b, int ldb,
                      double* c, int ldc) {
  double acc[kMr][kNr] = {};
  for (int p = 0; p < k; ++p) {
    const double* bp = b + static_cast<long>(p) * ldb;
    for (int r = 0; r < mr; ++r) {
      const double av = a[static_cast<long>(r) * lda + p];
      for (int j = 0; j < nr; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (int r = 0; r < mr; ++r) {
    for (int j = 0; j < nr; ++j) c[static_cast<long>(r) * ldc + j] += acc[r][j];
  }
}

void gemm_nn(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c,
             int ldc) {
  const int mb = (m + kMr - 1) / kMr;
  const int nb = (n + kNr - 1) / kNr;
  // Each k x kNr panel of B is packed contiguously: rows of B that sit a
  // power-of-two stride apart would otherwise collide in the same cache sets.
#pragma omp parallel
  {
    std::vector<double> panel(static_cast<std::size_t>(k) * kNr);
#pragma omp for schedule(static)
    for (int jb = 0; jb < nb; ++jb) {
      const int j0 = jb * kNr;
      const int nr = std::min(kNr, n - j0);
      for (int p = 0; p < k; ++p) {
        const double* src = b + static_cast<long>(p) * ldb + j0;
        double* dst = panel.data() + static_cast<long>(p) * kNr;
        std::copy(src, src + nr, dst);
        std::fill(dst + nr, dst + kNr, 0.0);
      }
      for (int ib = 0; ib < mb; ++ib) {
        const int i0 = ib * kMr;
        const int mr = std::min(kMr, m - i0);
        const double* ap = a + static_cast<long>(i0) * lda;
        double* cp = c + static_cast<long>(i0) * ldc + j0;
        if (mr == kMr && nr == kNr) {
          tile_full(k, ap, lda, panel.data(), kNr, cp, ldc);
        } else {
          tile_edge(mr, nr, k, ap, lda, panel.data(), kNr, cp, ldc);
        }
      }
    }
  }
}

constexpr int kLanes = 8;
constexpr int kTb = 4;

// C[i][j] += sum_p A[i][p] * B[j][p] for a tile of up to kTb x kTb outputs.
// Lane-wise partial sums are folded in a fixed order, so the result does not
// depend on how tiles are distributed over threads.
inline void tile_nt(int mr, int nr, int k, const double* a, int lda, const double* b, int ldb, double* c,
                    int ldc) {
  double acc[kTb][kTb][kLanes] = {};
  const int kv = k - k % kLanes;
  for (int p = 0; p < kv; p += kLanes) {
    for (int r = 0; r < mr; ++r) {
      const double* ar = a + static_cast<long>(r) * lda + p;
      for (int s = 0; s < nr; ++s) {
        const double* bs = b + static_cast<long>(s) * ldb + p;
#pragma omp simd
        for (int l = 0; l < kLanes; ++l) acc[r][s][l] += ar[l] * bs[l];
      }
    }
  }
  for (int r = 0; r < mr; ++r) {
    for (int s = 0; s < nr; ++s) {
      double t = 0.0;
      for (int l = 0; l < kLanes; ++l) t += acc[r][s][l];
      for (int p = kv; p < k; ++p) t += a[static_cast<long>(r) * lda + p] * b[static_cast<long>(s) * ldb + p];
      c[static_cast<long>(r) * ldc + s] += t;
    }
  }
}

// C (m x n) += A (m x k) * B^T where B is stored n x k.
void gemm_nt(int m, int n, int k, const double* a, int lda, const double* b, int ldb, double* c, int ldc) {
  const int mb = (m + kTb - 1) / kTb;
  const int nb = (n + kTb - 1) / kTb;
#pragma omp parallel for collapse(2) schedule(static)
  for (int ib = 0; ib < mb; ++ib) {
    for (int jb = 0; jb < nb; ++jb) {
      const int i0 = ib * kTb, j0 = jb * kTb;
      tile_nt(std::min(kTb, m - i0), std::min(kTb, n - j0), k, a + static_cast<long>(i0) * lda, lda,
              b + static_cast<long>(j0) * ldb, ldb, c + static_cast<long>(i0) * ldc + j0, ldc);
    }
  }
}

// rows x cols (ld) -> cols x rows, contiguous.
std::vector<double> transpose(const double* src, int rows, int cols, int ld) {
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) out[static_cast<std::size_t>(j) * rows + i] = src[static_cast<long>(i) * ld + j];
  }
  return out;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda,
          const double* b, int ldb, double* c, int ldc) {
  if (m <= 0 || n <= 0 || k <= 0) return;
  std::vector<double> pa, pb;
  if (trans_a) {
    pa = transpose(a, k, m, lda);  // stored k x m
    a = pa.data();
    lda = k;
  }
  if (trans_b) {
    pb = transpose(b, n, k, ldb);  // stored n x k
    b = pb.data();
    ldb = n;
  }
  gemm_nn(m, n, k, a, lda, b, ldb, c, ldc);
}

namespace {

// Output columns [lo, hi) whose input column ox * stride - pad + kx lies inside [0, w).
inline void valid_columns(const ConvGeometry& g, int kx, int ow, int& lo, int& hi) {
  const int off = kx - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.w - off <= 0 ? 0 : std::min(ow, (g.w - off - 1) / g.stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

void im2col(const ConvGeometry& g, const double* x, double* col) {
  const int oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  const long plane = static_cast<long>(oh) * ow;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < kk; ++ky) {
      for (int kx = 0; kx < kk; ++kx) {
        double* dst = col + ((static_cast<long>(ci) * kk + ky) * kk + kx) * plane;
        int lo = 0, hi = 0;
        valid_columns(g, kx, ow, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* d = dst + static_cast<long>(oy) * ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(d, d + ow, 0.0);
            continue;
          }
          const double* srow = x + (static_cast<long>(ci) * g.h + iy) * g.w;
          std::fill(d, d + lo, 0.0);
          if (g.stride == 1) {
            std::copy(srow + lo + off, srow + hi + off, d + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) d[ox] = srow[ox * g.stride + off];
          }
          std::fill(d + hi, d + ow, 0.0);
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* x) {
  const int oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  const long plane = static_cast<long>(oh) * ow;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < kk; ++ky) {
      for (int kx = 0; kx < kk; ++kx) {
        const double* src = col + ((static_cast<long>(ci) * kk + ky) * kk + kx) * plane;
        int lo = 0, hi = 0;
        valid_columns(g, kx, ow, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          double* drow = x + (static_cast<long>(ci) * g.h + iy) * g.w;
          const double* sp = src + static_cast<long>(oy) * ow;
          if (g.stride == 1) {
#pragma omp simd
            for (int ox = lo; ox < hi; ++ox) drow[ox + off] += sp[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) drow[ox * g.stride + off] += sp[ox];
          }
        }
      }
    }
  }
}

void conv2d_forward(const ConvGeometry& g, int batch, const double* x, const double* w,
                    std::span<const double> bias, double* y) {
  const int oh = g.out_h(), ow = g.out_w();
  const long out_plane = static_cast<long>(oh) * ow;
  const long in_size = static_cast<long>(g.cin) * g.h * g.w;
  std::vector<double> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(g.patch()) * out_plane);
  for (int n = 0; n < batch; ++n) {
    double* yn = y + n * g.cout * out_plane;
    for (int co = 0; co < g.cout; ++co) {
      std::fill(yn + co * out_plane, yn + (co + 1) * out_plane, bias.empty() ? 0.0 : bias[co]);
    }
    const double* src = x + n * in_size;
    if (!g.pointwise()) {
      im2col(g, src, col.data());
      src = col.data();
    }
    gemm_nn(g.cout, static_cast<int>(out_plane), g.patch(), w, g.patch(), src, static_cast<int>(out_plane),
            yn, static_cast<int>(out_plane));
  }
}

void conv2d_backward_input(const ConvGeometry& g, int batch, const double* dy, const double* w,
                           double* dx) {
  const int oh = g.out_h(), ow = g.out_w();
  const long out_plane = static_cast<long>(oh) * ow;
  const long in_size = static_cast<long>(g.cin) * g.h * g.w;
  const std::vector<double> wt = transpose(w, g.cout, g.patch(), g.patch());
  std::vector<double> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(g.patch()) * out_plane);
  for (int n = 0; n < batch; ++n) {
    const double* dyn = dy + n * g.cout * out_plane;
    if (g.pointwise()) {
      gemm_nn(g.cin, static_cast<int>(out_plane), g.cout, wt.data(), g.cout, dyn,
              static_cast<int>(out_plane), dx + n * in_size, static_cast<int>(out_plane));
      continue;
    }
    std::fill(col.begin(), col.end(), 0.0);
    gemm_nn(g.patch(), static_cast<int>(out_plane), g.cout, wt.data(), g.cout, dyn,
            static_cast<int>(out_plane), col.data(), static_cast<int>(out_plane));
    col2im(g, col.data(), dx + n * in_size);
  }
}

void conv2d_backward_weight(const ConvGeometry& g, int batch, const double* x, const double* dy,
                            double* dw, std::span<double> dbias) {
  const int oh = g.out_h(), ow = g.out_w();
  const long out_plane = static_cast<long>(oh) * ow;
  const long in_size = static_cast<long>(g.cin) * g.h * g.w;
  std::vector<double> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(g.patch()) * out_plane);
  for (int n = 0; n < batch; ++n) {
    const double* dyn = dy + n * g.cout * out_plane;
    const double* src = x + n * in_size;
    if (!g.pointwise()) {
      im2col(g, src, col.data());
      src = col.data();
    }
    gemm_nt(g.cout, g.patch(), static_cast<int>(out_plane), dyn, static_cast<int>(out_plane), src,
            static_cast<int>(out_plane), dw, g.patch());
    if (!dbias.empty()) {
#pragma omp parallel for schedule(static)
      for (int co = 0; co < g.cout; ++co) {
        double s = 0.0;
        for (long p = 0; p < out_plane; ++p) s += dyn[co * out_plane + p];
        dbias[co] += s;
      }
    }
  }
}

void group_norm_forward(int batch, int channels, int groups, int plane, double eps, const double* x,
                        double* y, double* mean, double* inv_std) {
  const int cpg = channels / groups;
  const long count = static_cast<long>(cpg) * plane;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int g = 0; g < groups; ++g) {
      const long base = (static_cast<long>(n) * channels + g * cpg) * plane;
      const double* xs = x + base;
      double mu = 0.0;
      for (long i = 0; i < count; ++i) mu += xs[i];
      mu /= static_cast<double>(count);
      double var = 0.0;
      for (long i = 0; i < count; ++i) var += (xs[i] - mu) * (xs[i] - mu);
      var /= static_cast<double>(count);
      const double is = 1.0 / std::sqrt(var + eps);
      double* ys = y + base;
#pragma omp simd
      for (long i = 0; i < count; ++i) ys[i] = (xs[i] - mu) * is;
      mean[n * groups + g] = mu;
      inv_std[n * groups + g] = is;
    }
  }
}

void group_norm_backward(int batch, int channels, int groups, int plane, const double* y,
                         const double* inv_std, const double* dy, double* dx) {
  const int cpg = channels / groups;
  const long count = static_cast<long>(cpg) * plane;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int g = 0; g < groups; ++g) {
      const long base = (static_cast<long>(n) * channels + g * cpg) * plane;
      const double* ys = y + base;
      const double* ds = dy + base;
      double mean_dy = 0.0, mean_dy_y = 0.0;
      for (long i = 0; i < count; ++i) {
        mean_dy += ds[i];
        mean_dy_y += ds[i] * ys[i];
      }
      mean_dy /= static_cast<double>(count);
      mean_dy_y /= static_cast<double>(count);
      const double is = inv_std[n * groups + g];
      double* dxs = dx + base;
#pragma omp simd
      for (long i = 0; i < count; ++i) dxs[i] += is * (ds[i] - mean_dy - ys[i] * mean_dy_y);
    }
  }
}

void fuse_masked(int streams, int channels, int plane, const double* features, const double* masks,
                 double* out) {
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < channels; ++ch) {
    double* o = out + static_cast<long>(ch) * plane;
    std::fill(o, o + plane, 0.0);
    for (int c = 0; c < streams; ++c) {
      const double* m = masks + static_cast<long>(c) * plane;
      const double* f = features + (static_cast<long>(c) * channels + ch) * plane;
#pragma omp simd
      for (int p = 0; p < plane; ++p) o[p] += m[p] * f[p];
    }
  }
}

KernelSums polynomial_kernel_sums(const double* x, int n, const double* y, int m, int d) {
  auto k = [d](const double* a, const double* b) {
    double dot = 0.0;
#pragma omp simd reduction(+ : dot)
    for (int i = 0; i < d; ++i) dot += a[i] * b[i];
    const double v = dot / d + 1.0;
    return v * v * v;
  };
  // Per-row partials, combined serially in row order.
  std::vector<double> xx(n, 0.0), yy(m, 0.0), xy(n, 0.0);
#pragma omp parallel for schedule(dynamic, 4)
  for (int i = 0; i < n; ++i) {
    const double* xi = x + static_cast<long>(i) * d;
    double sxx = 0.0, sxy = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j != i) sxx += k(xi, x + static_cast<long>(j) * d);
    }
    for (int j = 0; j < m; ++j) sxy += k(xi, y + static_cast<long>(j) * d);
    xx[i] = sxx;
    xy[i] = sxy;
  }
#pragma omp parallel for schedule(dynamic, 4)
  for (int i = 0; i < m; ++i) {
    const double* yi = y + static_cast<long>(i) * d;
    double s = 0.0;
    for (int j = 0; j < m; ++j) {
      if (j != i) s += k(yi, y + static_cast<long>(j) * d);
    }
    yy[i] = s;
  }
  KernelSums out;
  for (int i = 0; i < n; ++i) {
    out.xx_offdiag += xx[i];
    out.xy += xy[i];
  }
  for (int i = 0; i < m; ++i) out.yy_offdiag += yy[i];
  return out;
}

std::vector<BestMatch> best_equal_count(const std::int32_t* queries, int nq, const std::int32_t* pool,
                                        int np, int len) {
  std::vector<BestMatch> out(nq);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < nq; ++i) {
    const std::int32_t* q = queries + static_cast<long>(i) * len;
    BestMatch best;
    for (int j = 0; j < np; ++j) {
      const std::int32_t* p = pool + static_cast<long>(j) * len;
      int count = 0;
#pragma omp simd reduction(+ : count)
      for (int k = 0; k < len; ++k) count += q[k] == p[k] ? 1 : 0;
      if (count > best.count || best.index < 0) best = {j, count};
    }
    out[i] = best;
  }
  return out;
}

std::vector<int> dot_above(const double* query, const double* rows, int m, int d, double threshold) {
  std::vector<unsigned char> hit(m, 0);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < m; ++j) {
    const double* r = rows + static_cast<long>(j) * d;
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += query[i] * r[i];
    hit[j] = s > threshold ? 1 : 0;
  }
  std::vector<int> out;
  for (int j = 0; j < m; ++j) {
    if (hit[j]) out.push_back(j);
  }
  return out;
}

}  // namespace gbe::kernels
