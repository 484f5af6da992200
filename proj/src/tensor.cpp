#include "gbe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace gbe {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape s) const {
  if (s.numel() != numel()) throw ShapeError("reshape " + shape_.str() + " -> " + s.str());
  return Tensor(s, data_);
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (o.shape_ != shape_) throw ShapeError("add " + shape_.str() + " vs " + o.shape_.str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::squared_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::crop(int y0, int x0, int hh, int ww) const {
  if (y0 < 0 || x0 < 0 || hh <= 0 || ww <= 0 || y0 + hh > shape_.h || x0 + ww > shape_.w) {
    throw ShapeError("crop window outside tensor " + shape_.str());
  }
  Tensor out({shape_.n, shape_.c, hh, ww});
  for (int n = 0; n < shape_.n; ++n) {
    for (int c = 0; c < shape_.c; ++c) {
      for (int y = 0; y < hh; ++y) {
        std::memcpy(&out.at(n, c, y, 0), &data_[index(n, c, y0 + y, x0)], sizeof(double) * ww);
      }
    }
  }
  return out;
}

Tensor Tensor::channels(int c0, int cc) const {
  if (c0 < 0 || cc <= 0 || c0 + cc > shape_.c) throw ShapeError("channel slice outside " + shape_.str());
  Tensor out({shape_.n, cc, shape_.h, shape_.w});
  for (int n = 0; n < shape_.n; ++n) {
    std::memcpy(out.plane(n, 0), plane(n, c0), sizeof(double) * cc * shape_.plane());
  }
  return out;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.shape().n != s.n || p.shape().h != s.h || p.shape().w != s.w) {
      throw ShapeError("concat mismatch " + s.str() + " vs " + p.shape().str());
    }
    total += p.shape().c;
  }
  Tensor out({s.n, total, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const auto& p : parts) {
      std::memcpy(out.plane(n, c0), p.plane(n, 0), sizeof(double) * p.shape().c * s.plane());
      c0 += p.shape().c;
    }
  }
  return out;
}

LabelMap LabelMap::crop(int y0, int x0, int hh, int ww) const {
  if (y0 < 0 || x0 < 0 || y0 + hh > h || x0 + ww > w) throw ShapeError("label crop outside map");
  LabelMap out(hh, ww);
  for (int y = 0; y < hh; ++y) {
    for (int x = 0; x < ww; ++x) out.at(y, x) = at(y0 + y, x0 + x);
  }
  return out;
}

LabelMap resample_nearest(const LabelMap& labels, int out_h, int out_w) {
  if (out_h == labels.h && out_w == labels.w) return labels;
  LabelMap out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(labels.h - 1, static_cast<int>((y + 0.5) * labels.h / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(labels.w - 1, static_cast<int>((x + 0.5) * labels.w / out_w));
      out.at(y, x) = labels.at(sy, sx);
    }
  }
  return out;
}

}  // namespace gbe
