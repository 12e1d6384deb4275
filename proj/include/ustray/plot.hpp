#pragma once

// Minimal raster output: binary PPM images of maps and sinograms, line plots of
// convergence curves, and CSV tables.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/io.hpp"

namespace ustray::plot {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<Rgb> pixels;  // row-major, top row first

  Image(std::size_t w, std::size_t h, Rgb fill = {255, 255, 255}) : width(w), height(h), pixels(w * h, fill) {}
  Rgb& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }

  void set(long x, long y, Rgb c) {
    if (x >= 0 && y >= 0 && static_cast<std::size_t>(x) < width && static_cast<std::size_t>(y) < height)
      at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = c;
  }

  std::string ppm() const {
    std::ostringstream os;
    os << "P6\n" << width << " " << height << "\n255\n";
    std::string out = os.str();
    out.reserve(out.size() + pixels.size() * 3);
    for (const auto& p : pixels) {
      out.push_back(static_cast<char>(p.r));
      out.push_back(static_cast<char>(p.g));
      out.push_back(static_cast<char>(p.b));
    }
    return out;
  }

  void write(const std::filesystem::path& path) const { io::atomic_write(path, ppm()); }
};

/// Perceptually ordered dark-blue to yellow ramp, t in [0, 1].
inline Rgb colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 6> stops{{{0.267, 0.005, 0.329},
                                                               {0.230, 0.322, 0.546},
                                                               {0.128, 0.567, 0.551},
                                                               {0.369, 0.789, 0.383},
                                                               {0.741, 0.873, 0.150},
                                                               {0.993, 0.906, 0.144}}};
  if (!std::isfinite(t)) return {255, 255, 255};
  t = std::clamp(t, 0.0, 1.0) * static_cast<double>(stops.size() - 1);
  const auto i = std::min(static_cast<std::size_t>(t), stops.size() - 2);
  const double u = t - static_cast<double>(i);
  auto ch = [&](std::size_t c) {
    return static_cast<std::uint8_t>(std::lround(255.0 * ((1 - u) * stops[i][c] + u * stops[i + 1][c])));
  };
  return {ch(0), ch(1), ch(2)};
}

/// Map of rows × cols values (row-major), each cell drawn as a scale × scale block.
/// NaN cells are white. Row 0 is drawn at the top.
inline Image heatmap(const std::vector<double>& v, std::size_t rows, std::size_t cols, std::size_t scale, double lo,
                     double hi) {
  Image img(cols * scale, rows * scale);
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const Rgb c = colormap((v[i * cols + j] - lo) / span);
      for (std::size_t a = 0; a < scale; ++a)
        for (std::size_t b = 0; b < scale; ++b) img.at(j * scale + b, i * scale + a) = c;
    }
  return img;
}

inline std::pair<double, double> finite_range(const std::vector<double>& v) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double x : v)
    if (std::isfinite(x)) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (!(lo <= hi)) return {0.0, 1.0};
  return {lo, hi};
}

/// Grid map with axis 2 pointing up, as in a Cartesian picture.
inline Image field_image(const std::vector<double>& values, std::size_t n1, std::size_t n2, std::size_t scale,
                         double lo, double hi) {
  std::vector<double> flipped(values.size());
  for (std::size_t i = 0; i < n1; ++i)
    for (std::size_t j = 0; j < n2; ++j) flipped[(n2 - 1 - j) * n1 + i] = values[i * n2 + j];
  return heatmap(flipped, n2, n1, scale, lo, hi);
}

inline void line(Image& img, long x0, long y0, long x1, long y1, Rgb c) {
  const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    img.set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

/// Curves sharing the x axis 0..n-1, each scaled into a common range.
inline Image line_plot(const std::vector<std::vector<double>>& curves, std::size_t width = 480, std::size_t height = 320,
                       bool log_y = false) {
  static const std::array<Rgb, 4> colours{{{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}}};
  Image img(width, height);
  const long m = 30;
  const long W = static_cast<long>(width), H = static_cast<long>(height);
  line(img, m, H - m, W - m, H - m, {0, 0, 0});
  line(img, m, m, m, H - m, {0, 0, 0});
  auto tr = [&](double v) { return log_y ? (v > 0 ? std::log10(v) : std::numeric_limits<double>::quiet_NaN()) : v; };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& c : curves) {
    n = std::max(n, c.size());
    for (double v : c)
      if (std::isfinite(tr(v))) {
        lo = std::min(lo, tr(v));
        hi = std::max(hi, tr(v));
      }
  }
  if (!(lo < hi)) {
    hi = lo + 1.0;
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  }
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& c = curves[k];
    long px = -1, py = -1;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double v = tr(c[i]);
      if (!std::isfinite(v)) continue;
      const long x = m + static_cast<long>(std::lround(static_cast<double>(W - 2 * m) * static_cast<double>(i) /
                                                       static_cast<double>(std::max<std::size_t>(1, n - 1))));
      const long y = H - m - static_cast<long>(std::lround(static_cast<double>(H - 2 * m) * (v - lo) / (hi - lo)));
      if (px >= 0) line(img, px, py, x, y, colours[k % colours.size()]);
      for (long a = -2; a <= 2; ++a) img.set(x + a, y, colours[k % colours.size()]), img.set(x, y + a, colours[k % colours.size()]);
      px = x;
      py = y;
    }
  }
  return img;
}

/// Comma-separated table with a header row.
inline std::string csv(const std::vector<std::string>& columns, const std::vector<std::vector<double>>& rows) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << "\n";
  }
  return os.str();
}

}  // namespace ustray::plot
