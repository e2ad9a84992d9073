#pragma once

#include <torch/torch.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "cmi/core/errors.hpp"
#include "cmi/io/png.hpp"

namespace cmi {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::array<std::uint8_t, 3> color{31, 119, 180};
};

namespace detail {

// 3x5 glyphs for tick labels, one row per 3-bit mask.
inline const std::array<std::uint8_t, 5>* glyph(char ch) {
  static const std::array<std::array<std::uint8_t, 5>, 12> table{{
      {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1}, {7, 4, 7, 1, 7},
      {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}, {0, 0, 0, 0, 2}, {0, 0, 7, 0, 0},
  }};
  if (ch >= '0' && ch <= '9') return &table[static_cast<std::size_t>(ch - '0')];
  if (ch == '.') return &table[10];
  if (ch == '-') return &table[11];
  return nullptr;
}

class Canvas {
 public:
  Canvas(std::int64_t w, std::int64_t h) : w_(w), h_(h), px_(torch::full({3, h, w}, 255, torch::kUInt8)) {}

  void set(std::int64_t x, std::int64_t y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    auto a = px_.accessor<std::uint8_t, 3>();
    for (int k = 0; k < 3; ++k) a[k][y][x] = c[static_cast<std::size_t>(k)];
  }

  void line(double x0, double y0, double x1, double y1, const std::array<std::uint8_t, 3>& c, int thick = 1) {
    const auto steps = static_cast<std::int64_t>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
    for (std::int64_t i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(steps);
      const auto x = std::llround(x0 + t * (x1 - x0));
      const auto y = std::llround(y0 + t * (y1 - y0));
      for (int dy = -(thick / 2); dy <= thick / 2; ++dy)
        for (int dx = -(thick / 2); dx <= thick / 2; ++dx) set(x + dx, y + dy, c);
    }
  }

  void text(std::int64_t x, std::int64_t y, const std::string& s, const std::array<std::uint8_t, 3>& c, int scale = 2) {
    for (char ch : s) {
      if (const auto* g = glyph(ch)) {
        for (int r = 0; r < 5; ++r)
          for (int col = 0; col < 3; ++col)
            if (((*g)[static_cast<std::size_t>(r)] >> (2 - col)) & 1)
              for (int sy = 0; sy < scale; ++sy)
                for (int sx = 0; sx < scale; ++sx) set(x + col * scale + sx, y + r * scale + sy, c);
      }
      x += 4 * scale;
    }
  }

  const torch::Tensor& pixels() const { return px_; }

 private:
  std::int64_t w_, h_;
  torch::Tensor px_;
};

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace detail

/// Rasterized line plot (axes, numeric ticks at the data extremes, one
/// polyline with square markers per series) as a uint8 (3, H, W) tensor.
inline torch::Tensor line_plot(const std::vector<PlotSeries>& series, std::int64_t width = 480,
                               std::int64_t height = 320) {
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw InvalidArgument("plot series '" + s.label + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  detail::Canvas cv(width, height);
  const std::array<std::uint8_t, 3> black{0, 0, 0}, grey{200, 200, 200};
  const double left = 70, right = static_cast<double>(width) - 20, top = 20, bottom = static_cast<double>(height) - 40;
  cv.line(left, bottom, right, bottom, black);
  cv.line(left, top, left, bottom, black);
  if (!std::isfinite(xmin)) return cv.pixels();
  if (xmax == xmin) { xmin -= 0.5; xmax += 0.5; }
  if (ymax == ymin) { ymin -= 0.5; ymax += 0.5; }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  const auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (right - left - 10) + 5; };
  const auto sy = [&](double y) { return bottom - (y - ymin) / (ymax - ymin) * (bottom - top); };
  for (double yv : {ymin + ypad, ymax - ypad}) {
    cv.line(left, sy(yv), right, sy(yv), grey);
    cv.text(4, static_cast<std::int64_t>(sy(yv)) - 5, detail::tick_label(yv), black);
  }
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const auto px = sx(s.x[i]);
      cv.line(px, bottom, px, bottom + 5, black);
      cv.text(static_cast<std::int64_t>(px) - 8, static_cast<std::int64_t>(bottom) + 10, detail::tick_label(s.x[i]), black);
      if (i > 0) cv.line(sx(s.x[i - 1]), sy(s.y[i - 1]), px, sy(s.y[i]), s.color, 2);
      for (int d = -3; d <= 3; ++d) cv.line(px - 3, sy(s.y[i]) + d, px + 3, sy(s.y[i]) + d, s.color);
    }
  }
  return cv.pixels();
}

inline void save_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series) {
  write_png(path, line_plot(series));
}

}  // namespace cmi
