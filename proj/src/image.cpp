#include "refground/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace refground {

PixelRect covered_pixels(const BoundingBox& box, int width, int height) {
  auto lo = [](double edge, int limit) {
    return std::clamp(static_cast<int>(std::ceil(edge - 0.5)), 0, limit);
  };
  return {lo(box.x1(), width), lo(box.y1(), height), lo(box.x2(), width), lo(box.y2(), height)};
}

Image::Image(int h, int w, float fill)
    : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {
  if (h <= 0 || w <= 0) throw DomainError("Image: dimensions must be positive");
}

std::optional<Image> crop(const Image& img, const BoundingBox& box) {
  const PixelRect r = covered_pixels(box, img.width, img.height);
  if (r.empty()) return std::nullopt;
  Image out(r.y_end - r.y_begin, r.x_end - r.x_begin);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(r.y_begin + y, r.x_begin + x, c);
    }
  }
  out.source_id = img.source_id;
  out.origin_x = img.origin_x + r.x_begin;
  out.origin_y = img.origin_y + r.y_begin;
  return out;
}

namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v * 255.0f + 0.5f), 0.0f, 255.0f));
}

// Skips whitespace and '#' comments between PNM header tokens.
int read_header_int(std::istream& in) {
  while (true) {
    in >> std::ws;
    if (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      continue;
    }
    int value = 0;
    if (!(in >> value)) throw DomainError("read_ppm: malformed header");
    return value;
  }
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<char> bytes(img.rgb.size());
  std::transform(img.rgb.begin(), img.rgb.end(), bytes.begin(),
                 [](float v) { return static_cast<char>(to_byte(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image read_ppm(const std::filesystem::path& path, std::string source_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DomainError("read_ppm: only binary P6 is supported: " + path.string());
  const int w = read_header_int(in);
  const int h = read_header_int(in);
  const int maxval = read_header_int(in);
  if (maxval <= 0 || maxval > 255) throw DomainError("read_ppm: unsupported maxval");
  in.get();
  Image img(h, w);
  std::vector<unsigned char> bytes(img.rgb.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DomainError("read_ppm: truncated pixel data");
  }
  std::transform(bytes.begin(), bytes.end(), img.rgb.begin(),
                 [maxval](unsigned char b) { return static_cast<float>(b) / maxval; });
  img.source_id = source_id.empty() ? path.stem().string() : std::move(source_id);
  return img;
}

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
               int width, int height, const std::string& comment) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw DomainError("write_pgm: pixel count mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path.string());
  out << "P5\n";
  if (!comment.empty()) out << "# " << comment << '\n';
  out << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace refground
