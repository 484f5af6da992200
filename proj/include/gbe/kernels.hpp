#pragma once

// Data-parallel numeric kernels. Every kernel in `gbe::kernels` is OpenMP
// parallel; `gbe::kernels::reference` holds plain serial loops with identical
// contracts that the tests compare against.
//
// Parallel kernels only split work over independent output elements and keep
// the floating-point summation order of each element fixed, so results are
// bit-identical for any thread count.

#include <cstdint>
#include <span>
#include <vector>

namespace gbe::kernels {

struct ConvGeometry {
  int cin = 0;
  int cout = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int h = 0;  // input height
  int w = 0;  // input width

  [[nodiscard]] int out_h() const { return (h + 2 * pad - kernel) / stride + 1; }
  [[nodiscard]] int out_w() const { return (w + 2 * pad - kernel) / stride + 1; }
  [[nodiscard]] int patch() const { return cin * kernel * kernel; }
  [[nodiscard]] bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

/// C[MxN] += op(A) * op(B), row-major. op(A) is MxK, op(B) is KxN.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda,
          const double* b, int ldb, double* c, int ldc);

/// Unfold one image (cin x h x w) into columns (cin*k*k x oh*ow).
void im2col(const ConvGeometry& g, const double* x, double* col);
/// Scatter-add columns back into an image gradient (cin x h x w).
void col2im(const ConvGeometry& g, const double* col, double* x);

/// y (n x cout x oh x ow) = conv(x, w) + bias. `bias` may be empty.
void conv2d_forward(const ConvGeometry& g, int batch, const double* x, const double* w,
                    std::span<const double> bias, double* y);
/// dx += conv^T(dy, w). dx must be zero-initialised by the caller or hold a gradient to accumulate.
void conv2d_backward_input(const ConvGeometry& g, int batch, const double* dy, const double* w,
                           double* dx);
/// dw += dy * x^T, dbias += sum(dy). `dbias` may be empty.
void conv2d_backward_weight(const ConvGeometry& g, int batch, const double* x, const double* dy,
                            double* dw, std::span<double> dbias);

/// Group normalisation without affine terms. Writes normalised values and per
/// (sample, group) mean and inverse standard deviation.
void group_norm_forward(int batch, int channels, int groups, int plane, double eps, const double* x,
                        double* y, double* mean, double* inv_std);
/// dx += GN^T(dy) given the normalised output `y` saved from the forward pass.
void group_norm_backward(int batch, int channels, int groups, int plane, const double* y,
                         const double* inv_std, const double* dy, double* dx);

/// out(p) = sum_c masks[c](p) * features[c](p) for a c-stream stack.
/// features: streams x (channels*plane); masks: streams x plane.
void fuse_masked(int streams, int channels, int plane, const double* features, const double* masks,
                 double* out);

struct KernelSums {
  double xx_offdiag = 0.0;  // sum_{i != j} k(x_i, x_j)
  double yy_offdiag = 0.0;
  double xy = 0.0;          // sum_{i, j} k(x_i, y_j)
};

/// Sums of the cubic polynomial kernel k(a,b) = (a.b/d + 1)^3 needed by the
/// unbiased MMD estimator. x: n x d, y: m x d (row-major).
KernelSums polynomial_kernel_sums(const double* x, int n, const double* y, int m, int d);

struct BestMatch {
  int index = -1;
  int count = 0;
};

/// For every row of `queries` (nq x len) find the row of `pool` (np x len)
/// with the most equal entries; ties resolve to the lowest pool index.
std::vector<BestMatch> best_equal_count(const std::int32_t* queries, int nq, const std::int32_t* pool,
                                        int np, int len);

/// Indices of rows of `rows` (m x d) whose dot product with `query` is
/// strictly greater than `threshold`, in ascending order.
std::vector<int> dot_above(const double* query, const double* rows, int m, int d, double threshold);

namespace reference {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda,
          const double* b, int ldb, double* c, int ldc);
void conv2d_forward(const ConvGeometry& g, int batch, const double* x, const double* w,
                    std::span<const double> bias, double* y);
void conv2d_backward_input(const ConvGeometry& g, int batch, const double* dy, const double* w,
                           double* dx);
void conv2d_backward_weight(const ConvGeometry& g, int batch, const double* x, const double* dy,
                            double* dw, std::span<double> dbias);
void group_norm_forward(int batch, int channels, int groups, int plane, double eps, const double* x,
                        double* y, double* mean, double* inv_std);
void group_norm_backward(int batch, int channels, int groups, int plane, const double* y,
                         const double* inv_std, const double* dy, double* dx);
void fuse_masked(int streams, int channels, int plane, const double* features, const double* masks,
                 double* out);
KernelSums polynomial_kernel_sums(const double* x, int n, const double* y, int m, int d);
std::vector<BestMatch> best_equal_count(const std::int32_t* queries, int nq, const std::int32_t* pool,
                                        int np, int len);
std::vector<int> dot_above(const double* query, const double* rows, int m, int d, double threshold);

}  // namespace reference

}  // namespace gbe::kernels
