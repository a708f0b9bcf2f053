#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "eqtrack/error.hpp"
#include "eqtrack/geometry.hpp"

namespace eqtrack::imaging {

// Single-channel image, values in [0,1]. Storage is row-major with row 0 at
// the top; all coordinate-taking interfaces use mathematical orientation:
// (0,0) at the bottom-left of the referenced region, +y up. A pixel at
// column j, row-from-bottom i covers [j,j+1]x[i,i+1] in pixel units, so its
// center sits at (j+0.5, i+0.5).
struct GrayImage {
  int width = 0, height = 0;
  std::vector<float> data;  // width*height, row 0 = top

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int col, int row_from_bottom) {
    return data[static_cast<std::size_t>(height - 1 - row_from_bottom) * width + col];
  }
  float at(int col, int row_from_bottom) const {
    return data[static_cast<std::size_t>(height - 1 - row_from_bottom) * width + col];
  }
  bool in_bounds(int col, int row_from_bottom) const {
    return col >= 0 && col < width && row_from_bottom >= 0 && row_from_bottom < height;
  }
};

struct CropSpec {
  int col = 0, row = 0;  // lower-left corner, math orientation
  int size = 32;
};

inline double mean(const GrayImage& img) {
  double s = 0;
  for (float v : img.data) s += v;
  return img.data.empty() ? 0.0 : s / static_cast<double>(img.data.size());
}

inline double stddev(const GrayImage& img) {
  const double m = mean(img);
  double s = 0;
  for (float v : img.data) s += (v - m) * (v - m);
  return img.data.empty() ? 0.0 : std::sqrt(s / static_cast<double>(img.data.size()));
}

// Bilinear sample at a mathematical pixel coordinate; zero outside.
inline double sample_bilinear(const GrayImage& img, double sx, double sy) {
  const double gx = sx - 0.5, gy = sy - 0.5;
  const int j0 = static_cast<int>(std::floor(gx));
  const int i0 = static_cast<int>(std::floor(gy));
  const double fx = gx - j0, fy = gy - i0;
  double acc = 0.0;
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj) {
      const int j = j0 + dj, i = i0 + di;
      if (!img.in_bounds(j, i)) continue;
      const double w = (dj ? fx : 1.0 - fx) * (di ? fy : 1.0 - fy);
      acc += w * img.at(j, i);
    }
  return acc;
}

// Inverse-mapped affine warp. M maps input points to output points; both are
// expressed in units of `unit_px` pixels relative to `origin` (a math pixel
// coordinate). Samples falling outside the source are zero.
inline GrayImage warp_affine(const GrayImage& img, const geometry::Affine& M, double origin_x,
                             double origin_y, double unit_px = 32.0) {
  const geometry::Affine inv = M.inverse();  // throws SingularTransform
  GrayImage out(img.width, img.height);
  for (int i = 0; i < img.height; ++i) {
    for (int j = 0; j < img.width; ++j) {
      const double px = (j + 0.5 - origin_x) / unit_px;
      const double py = (i + 0.5 - origin_y) / unit_px;
      const auto q = inv.apply(px, py);
      const double v =
          sample_bilinear(img, origin_x + unit_px * q[0], origin_y + unit_px * q[1]);
      out.at(j, i) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

inline GrayImage crop(const GrayImage& img, const CropSpec& spec) {
  if (spec.col < 0 || spec.row < 0 || spec.col + spec.size > img.width ||
      spec.row + spec.size > img.height)
    throw OutOfBounds("crop outside image");
  GrayImage out(spec.size, spec.size);
  for (int i = 0; i < spec.size; ++i)
    for (int j = 0; j < spec.size; ++j) out.at(j, i) = img.at(spec.col + j, spec.row + i);
  return out;
}

inline GrayImage downscale(const GrayImage& img, int factor) {
  if (factor <= 0 || img.width % factor != 0 || img.height % factor != 0)
    throw IndivisibleSize("image size not divisible by downscale factor");
  GrayImage out(img.width / factor, img.height / factor);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int i = 0; i < out.height; ++i)
    for (int j = 0; j < out.width; ++j) {
      double acc = 0;
      for (int di = 0; di < factor; ++di)
        for (int dj = 0; dj < factor; ++dj) acc += img.at(j * factor + dj, i * factor + di);
      out.at(j, i) = static_cast<float>(acc * inv);
    }
  return out;
}

// Real-data conditioning: downscale x4, map [lo,hi] onto [0,1] with clamping,
// optionally invert.
inline GrayImage preprocess_real(const GrayImage& img, bool invert, double lo, double hi) {
  if (!(lo < hi)) throw BadRange("expected lo < hi");
  GrayImage out = downscale(img, 4);
  const double scale = 1.0 / (hi - lo);
  for (float& v : out.data) {
    double t = std::clamp((v - lo) * scale, 0.0, 1.0);
    if (invert) t = 1.0 - t;
    v = static_cast<float>(t);
  }
  return out;
}

inline double percentile(const GrayImage& img, double p) {
  std::vector<float> v = img.data;
  const std::size_t k =
      static_cast<std::size_t>(std::clamp(p, 0.0, 1.0) * (v.size() - 1) + 0.5);
  std::nth_element(v.begin(), v.begin() + k, v.end());
  return v[k];
}

// Gaussian-profile line rendering: value = amp * exp(-d^2 / (2 t^2)) with d
// the perpendicular pixel distance; cut to zero beyond 5 widths. The track is
// given in crop units of the rendered square.
inline GrayImage render_line(int size, const geometry::TrackXYCS& tp, double thickness_px,
                             double amplitude) {
  if (!(thickness_px > 0)) throw BadRange("thickness must be positive");
  GrayImage out(size, size);
  const double phi = geometry::phi_of(tp);
  const double nx = -std::sin(phi), ny = std::cos(phi);
  const double px = tp.x * size, py = tp.y * size;
  const double cutoff = 5.0 * thickness_px;
  const double inv2t2 = 1.0 / (2.0 * thickness_px * thickness_px);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double d = nx * (j + 0.5 - px) + ny * (i + 0.5 - py);
      if (std::abs(d) > cutoff) continue;
      out.at(j, i) = static_cast<float>(std::clamp(amplitude * std::exp(-d * d * inv2t2), 0.0, 1.0));
    }
  return out;
}

struct Tile {
  CropSpec spec;
  GrayImage img;
};

inline std::vector<Tile> tile_split(const GrayImage& img, int tile_px) {
  if (tile_px <= 0 || img.width % tile_px != 0 || img.height % tile_px != 0)
    throw IndivisibleSize("image size not divisible by tile size");
  std::vector<Tile> tiles;
  for (int i = 0; i < img.height / tile_px; ++i)
    for (int j = 0; j < img.width / tile_px; ++j) {
      CropSpec spec{j * tile_px, i * tile_px, tile_px};
      tiles.push_back({spec, crop(img, spec)});
    }
  return tiles;
}

inline GrayImage tile_assemble(const std::vector<Tile>& tiles, int width, int height) {
  GrayImage out(width, height);
  for (const Tile& t : tiles) {
    if (t.spec.col + t.spec.size > width || t.spec.row + t.spec.size > height)
      throw OutOfBounds("tile outside assembly");
    for (int i = 0; i < t.spec.size; ++i)
      for (int j = 0; j < t.spec.size; ++j)
        out.at(t.spec.col + j, t.spec.row + i) = t.img.at(j, i);
  }
  return out;
}

// --- 8-bit binary PGM (P5) ---

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * img.height);
  for (std::size_t k = 0; k < row.size(); ++k)
    row[k] = static_cast<unsigned char>(
        std::lround(std::clamp(static_cast<double>(img.data[k]), 0.0, 1.0) * 255.0));
  f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

namespace detail {
inline int pgm_next_int(std::istream& in) {
  // skips whitespace and '#' comments
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = in.get();
    c = in.get();
  }
  if (c == EOF) throw IoError("truncated pgm header");
  int v = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw IoError("malformed pgm header");
  return v;
}
}  // namespace detail

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '5') throw BadMagic("not a binary pgm: " + path.string());
  const int w = detail::pgm_next_int(f);
  const int h = detail::pgm_next_int(f);
  const int maxval = detail::pgm_next_int(f);
  if (maxval != 255) throw IoError("unsupported pgm maxval");
  GrayImage img(w, h);
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError("truncated pgm data: " + path.string());
  for (std::size_t k = 0; k < buf.size(); ++k) img.data[k] = buf[k] / 255.0f;
  return img;
}

// Raster a bright segment between two math pixel points (overlay drawing).
inline void draw_segment(GrayImage& img, double x0, double y0, double x1, double y1,
                         float value) {
  const double dx = x1 - x0, dy = y1 - y0;
  const int steps = std::max(2, static_cast<int>(std::ceil(std::max(std::abs(dx), std::abs(dy)) * 2)));
  for (int k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) / steps;
    const int j = static_cast<int>(std::floor(x0 + dx * t));
    const int i = static_cast<int>(std::floor(y0 + dy * t));
    if (img.in_bounds(j, i)) img.at(j, i) = std::max(img.at(j, i), value);
  }
}

inline void draw_marker(GrayImage& img, double x, double y, int half = 2, float value = 1.0f) {
  const int cj = static_cast<int>(std::floor(x)), ci = static_cast<int>(std::floor(y));
  for (int d = -half; d <= half; ++d) {
    if (img.in_bounds(cj + d, ci)) img.at(cj + d, ci) = value;
    if (img.in_bounds(cj, ci + d)) img.at(cj, ci + d) = value;
  }
}

}  // namespace eqtrack::imaging
