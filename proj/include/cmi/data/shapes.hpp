#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "cmi/data/dataset.hpp"

namespace cmi {

/// Procedural dataset of colored shapes on noisy backgrounds. Class k is the
/// k-th entry of {disk, square, triangle, cross}.
struct ShapesConfig {
  std::int64_t count = 4096;
  std::int64_t num_classes = 4;
  std::int64_t size = 16;
  std::int64_t channels = 3;
  double noise = 0.08;
  std::uint64_t seed = 0;

  void validate() const {
    if (count < 1) throw InvalidArgument("shapes: count must be positive");
    if (num_classes < 2 || num_classes > 4) throw InvalidArgument("shapes: num_classes must lie in [2, 4]");
    if (size < 8) throw InvalidArgument("shapes: image size must be >= 8");
    if (channels != 1 && channels != 3) throw InvalidArgument("shapes: channels must be 1 or 3");
    if (noise < 0) throw InvalidArgument("shapes: noise must be >= 0");
  }
};

namespace detail {

inline bool inside_shape(std::int64_t cls, double dx, double dy, double r) {
  switch (cls) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 2: {
      // Upward triangle with apex at -r and base at +0.8r.
      if (dy < -r || dy > 0.8 * r) return false;
      const double half = (dy + r) / 1.8;
      return std::abs(dx) <= half;
    }
    default: {
      const double arm = 0.3 * r;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
  }
}

}  // namespace detail

/// Balanced (label = i mod num_classes) and a pure function of the config.
inline LabeledImages make_shapes(const ShapesConfig& cfg) {
  cfg.validate();
  const auto n = cfg.count, s = cfg.size, c = cfg.channels;
  auto images = torch::empty({n, c, s, s}, torch::kFloat);
  auto labels = torch::empty({n}, torch::kLong);
  auto img = images.accessor<float, 4>();
  auto lab = labels.accessor<std::int64_t, 1>();
  std::mt19937_64 rng(derive_seed(cfg.seed, "shapes"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sz = static_cast<double>(s);

  for (std::int64_t i = 0; i < n; ++i) {
    const auto cls = i % cfg.num_classes;
    lab[i] = cls;
    std::array<double, 3> bg{}, fg{};
    for (auto& v : bg) v = -0.9 + 0.8 * u01(rng);
    // Foreground stays well separated from the background in brightness.
    const double lift = 0.7 + 0.6 * u01(rng);
    for (std::size_t k = 0; k < 3; ++k) fg[k] = std::min(1.0, bg[k] + lift * (0.6 + 0.4 * u01(rng)));
    if (u01(rng) < 0.5) std::swap(bg, fg);
    // Below ~2.5 px a disk and a square rasterize to the same blob.
    const double r = std::max(sz * (0.2 + 0.15 * u01(rng)), 2.5);
    const double cx = r + (sz - 2 * r) * u01(rng);
    const double cy = r + (sz - 2 * r) * u01(rng);
    for (std::int64_t y = 0; y < s; ++y) {
      for (std::int64_t x = 0; x < s; ++x) {
        const bool in = detail::inside_shape(cls, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double base = (in ? fg : bg)[static_cast<std::size_t>(c == 1 ? 0 : ch)];
          img[i][ch][y][x] = static_cast<float>(std::clamp(base + cfg.noise * gauss(rng), -1.0, 1.0));
        }
      }
    }
  }
  return {images, labels, cfg.num_classes};
}

}  // namespace cmi
