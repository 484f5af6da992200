#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gbe {

/// Raised when tensor shapes disagree with an operation's contract.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for invalid configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NCHW extent. Matrices and vectors use the trailing dimensions set to 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  [[nodiscard]] std::string str() const;
  bool operator==(const Shape&) const = default;
};

/// Dense double-precision NCHW tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t numel() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] double* data() { return data_.data(); }
  [[nodiscard]] const double* data() const { return data_.data(); }
  [[nodiscard]] std::span<double> values() { return data_; }
  [[nodiscard]] std::span<const double> values() const { return data_; }
  [[nodiscard]] const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  [[nodiscard]] double at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  /// Pointer to the start of channel plane (n, c).
  double* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  [[nodiscard]] const double* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(double v);
  /// Same data, new extent with equal element count.
  [[nodiscard]] Tensor reshaped(Shape s) const;

  Tensor& operator+=(const Tensor& o);
  Tensor& operator*=(double s);

  [[nodiscard]] double sum() const;
  [[nodiscard]] double squared_norm() const;
  [[nodiscard]] double max_abs() const;
  [[nodiscard]] bool all_finite() const;

  /// Spatial window [y0, y0+hh) x [x0, x0+ww) of every (n, c) plane.
  [[nodiscard]] Tensor crop(int y0, int x0, int hh, int ww) const;
  /// Channels [c0, c0+cc).
  [[nodiscard]] Tensor channels(int c0, int cc) const;

 private:
  [[nodiscard]] std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

/// Concatenate along the channel axis; all inputs share n, h, w.
Tensor concat_channels(std::span<const Tensor> parts);

/// Integer label map (one image), row-major H x W.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<std::int32_t> ids;

  LabelMap() = default;
  LabelMap(int hh, int ww, std::int32_t fill = 0) : h(hh), w(ww), ids(static_cast<std::size_t>(hh) * ww, fill) {}

  std::int32_t& at(int y, int x) { return ids[static_cast<std::size_t>(y) * w + x]; }
  [[nodiscard]] std::int32_t at(int y, int x) const { return ids[static_cast<std::size_t>(y) * w + x]; }
  [[nodiscard]] LabelMap crop(int y0, int x0, int hh, int ww) const;
  bool operator==(const LabelMap&) const = default;
};

/// Nearest-neighbour resampling of a categorical map (pixel centres).
LabelMap resample_nearest(const LabelMap& labels, int out_h, int out_w);

}  // namespace gbe
