#pragma once

#include "refground/core.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace refground {

/// Half-open pixel index ranges [x_begin,x_end) x [y_begin,y_end).
struct PixelRect {
  int x_begin = 0, y_begin = 0, x_end = 0, y_end = 0;

  int count() const { return empty() ? 0 : (x_end - x_begin) * (y_end - y_begin); }
  bool empty() const { return x_end <= x_begin || y_end <= y_begin; }
};

/// Pixels whose centers fall inside `box`: x1 <= x+0.5 < x2 (same for y),
/// restricted to a width x height lattice.
PixelRect covered_pixels(const BoundingBox& box, int width, int height);

/// Interleaved RGB raster with channel values in [0,1].
///
/// Crops remember where they came from (source_id plus the origin of
/// pixel (0,0) in the source frame) so that fixture-driven backends can
/// look up scene content for any region.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;
  std::string source_id;
  double origin_x = 0.0;
  double origin_y = 0.0;

  Image() = default;
  Image(int h, int w, float fill = 0.0f);

  bool empty() const { return height <= 0 || width <= 0; }
  float& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  /// Region of the source frame this raster covers.
  BoundingBox region() const {
    return {origin_x, origin_y, origin_x + width, origin_y + height};
  }
};

/// Pixels of `img` covered by `box`; nullopt when the clipped box covers none.
std::optional<Image> crop(const Image& img, const BoundingBox& box);

/// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path, std::string source_id = {});

/// 8-bit grayscale PGM (P5), with an optional single-line header comment.
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
               int width, int height, const std::string& comment = {});

}  // namespace refground
