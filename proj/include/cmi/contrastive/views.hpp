#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cmi/core/errors.hpp"

namespace cmi {

struct AugConfig {
  double crop_min = 0.25;  // minimum crop area fraction of the local view
  double crop_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  bool flip = true;
  double flip_prob = 0.5;

  void validate() const {
    if (!(crop_min > 0.0 && crop_min <= 1.0)) throw InvalidArgument("crop_min must lie in (0, 1]");
    if (!(crop_max >= crop_min && crop_max <= 1.0)) throw InvalidArgument("crop_max must lie in [crop_min, 1]");
    if (!(ratio_min > 0.0 && ratio_max >= ratio_min)) throw InvalidArgument("invalid crop aspect-ratio range");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw InvalidArgument("flip_prob must lie in [0, 1]");
  }
};

struct CropBox {
  std::int64_t x0 = 0, y0 = 0, w = 0, h = 0;
  bool flip_local = false;
  bool flip_global = false;
};

/// Index-aligned local (resized crop + flip) and global (flip only) views.
struct ViewPair {
  torch::Tensor local;
  torch::Tensor global;
  std::vector<CropBox> boxes;
};

namespace detail {

inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<std::int64_t>(rng() % span);
}

inline torch::Tensor flip_where(const torch::Tensor& x, const std::vector<bool>& mask) {
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  auto sel = torch::tensor(m, torch::kBool).view({-1, 1, 1, 1});
  return torch::where(sel, x.flip({3}), x);
}

}  // namespace detail

/// Samples per-instance crop boxes and flips, then resamples the crops back
/// to full resolution with bilinear interpolation. Differentiable with
/// respect to `images`; bit-identical for identical (images, cfg, seed).
/// Samples whose crop covers the full frame are copied, not resampled.
inline ViewPair make_views(const torch::Tensor& images, const AugConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (images.dim() != 4) throw ShapeMismatch("make_views expects images (N,C,H,W)");
  const auto n = images.size(0);
  const auto H = images.size(2);
  const auto W = images.size(3);
  std::mt19937_64 rng(seed);

  ViewPair out;
  out.boxes.resize(static_cast<std::size_t>(n));
  std::vector<bool> flip_local(static_cast<std::size_t>(n)), flip_global(static_cast<std::size_t>(n)),
      full(static_cast<std::size_t>(n));
  auto theta = torch::zeros({n, 2, 3}, torch::kDouble);
  auto acc = theta.accessor<double, 3>();
  for (std::int64_t i = 0; i < n; ++i) {
    auto& b = out.boxes[static_cast<std::size_t>(i)];
    const double area = cfg.crop_min + (cfg.crop_max - cfg.crop_min) * detail::unit_uniform(rng);
    // Ratio range restricted so the box always fits inside the frame.
    const double lo = std::log(std::max(cfg.ratio_min, area));
    const double hi = std::log(std::min(cfg.ratio_max, 1.0 / area));
    const double ratio = std::exp(hi > lo ? lo + (hi - lo) * detail::unit_uniform(rng) : 0.5 * (lo + hi));
    b.w = std::clamp<std::int64_t>(std::llround(std::sqrt(area * ratio) * static_cast<double>(W)), 1, W);
    b.h = std::clamp<std::int64_t>(std::llround(std::sqrt(area / ratio) * static_cast<double>(H)), 1, H);
    b.x0 = detail::uniform_int(rng, 0, W - b.w);
    b.y0 = detail::uniform_int(rng, 0, H - b.h);
    b.flip_local = cfg.flip && detail::unit_uniform(rng) < cfg.flip_prob;
    b.flip_global = cfg.flip && detail::unit_uniform(rng) < cfg.flip_prob;
    flip_local[static_cast<std::size_t>(i)] = b.flip_local;
    flip_global[static_cast<std::size_t>(i)] = b.flip_global;
    full[static_cast<std::size_t>(i)] = b.w == W && b.h == H;

    const double sx = static_cast<double>(b.w) / static_cast<double>(W);
    const double sy = static_cast<double>(b.h) / static_cast<double>(H);
    const double cx = -1.0 + static_cast<double>(2 * b.x0 + b.w) / static_cast<double>(W);
    const double cy = -1.0 + static_cast<double>(2 * b.y0 + b.h) / static_cast<double>(H);
    acc[i][0][0] = b.flip_local ? -sx : sx;
    acc[i][0][2] = cx;
    acc[i][1][1] = sy;
    acc[i][1][2] = cy;
  }

  out.global = detail::flip_where(images, flip_global);
  const auto copied = detail::flip_where(images, flip_local);
  if (std::all_of(full.begin(), full.end(), [](bool f) { return f; })) {
    out.local = copied;
    return out;
  }
  theta = theta.to(images.scalar_type());
  const auto grid = torch::nn::functional::affine_grid(theta, images.sizes(), /*align_corners=*/false);
  const auto resampled = torch::nn::functional::grid_sample(
      images, grid,
      torch::nn::functional::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
  std::vector<std::uint8_t> fm(full.begin(), full.end());
  const auto full_mask = torch::tensor(fm, torch::kBool).view({-1, 1, 1, 1});
  out.local = torch::where(full_mask, copied, resampled);
  return out;
}

}  // namespace cmi
