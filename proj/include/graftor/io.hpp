#pragma once

#include <filesystem>

#include "graftor/grid.hpp"

namespace graftor {

/// 8-bit RGB PNG. Reading accepts gray/alpha/palette inputs and converts to RGB.
PixelImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const PixelImage& image);

// Binary container: "FGRD" or "BMSK", then u32 rows, cols, dim (little endian).
// FGRD payload is rows*cols*dim little-endian f32. BMSK has dim = 1 and a payload
// of ceil(rows*cols/8) bytes, bit i stored at byte i/8, bit position i%8.
void write_fgrd(const std::filesystem::path& path, const FeatureGrid& grid);
FeatureGrid read_fgrd(const std::filesystem::path& path);
void write_bmsk(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_bmsk(const std::filesystem::path& path);

}  // namespace graftor
