#include "gbe/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace gbe {
namespace {

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  const Shape s = rgb.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("write_ppm expects (1, 3, H, W), got " + s.str());
  std::vector<unsigned char> bytes(s.plane() * 3);
  for (std::size_t p = 0; p < s.plane(); ++p) {
    for (int c = 0; c < 3; ++c) bytes[p * 3 + c] = to_byte(rgb.plane(0, c)[p]);
  }
  std::ofstream f(path, std::ios::binary);
  f << "P6\n" << s.w << " " << s.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void write_pgm(const std::filesystem::path& path, const double* plane, int h, int w) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  for (std::size_t p = 0; p < bytes.size(); ++p) bytes[p] = to_byte(plane[p]);
  std::ofstream f(path, std::ios::binary);
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  f.get();
  if (!f || magic != "P6" || maxval != 255 || w <= 0 || h <= 0) throw std::runtime_error("not a binary PPM: " + path.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("truncated PPM: " + path.string());
  Tensor t({1, 3, h, w});
  for (std::size_t p = 0; p < t.shape().plane(); ++p) {
    for (int c = 0; c < 3; ++c) t.plane(0, c)[p] = bytes[p * 3 + c] / 255.0;
  }
  return t;
}

}  // namespace gbe
