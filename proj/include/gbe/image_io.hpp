#pragma once

// Netpbm writers for enhanced images and density maps.

#include <filesystem>

#include "gbe/tensor.hpp"

namespace gbe {

/// Writes a (1, 3, H, W) tensor in [0, 1] as binary PPM.
void write_ppm(const std::filesystem::path& path, const Tensor& rgb);
/// Writes an H x W plane in [0, 1] as binary PGM.
void write_pgm(const std::filesystem::path& path, const double* plane, int h, int w);
/// Reads a binary PPM into a (1, 3, H, W) tensor in [0, 1].
Tensor read_ppm(const std::filesystem::path& path);

}  // namespace gbe
