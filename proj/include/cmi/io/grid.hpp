#pragma once

#include <torch/torch.h>

#include <filesystem>

#include "cmi/data/dataset.hpp"
#include "cmi/io/png.hpp"

namespace cmi {

struct GridOptions {
  std::int64_t rows = 8;
  std::int64_t cols = 8;
  std::int64_t upscale = 0;  // 0: x4 for 32-pixel inputs, scaled so tiles are ~128 px
  std::int64_t padding = 2;
};

/// Montage of the first rows*cols images, nearest-neighbor upscaled, as a
/// uint8 (C, H, W) tensor. Missing tiles stay at the padding color.
inline torch::Tensor make_grid(const torch::Tensor& images, const GridOptions& opt = {}) {
  if (images.dim() != 4) throw ShapeMismatch("make_grid expects (N,C,H,W)");
  if (opt.rows < 1 || opt.cols < 1 || opt.padding < 0) throw InvalidArgument("invalid grid layout");
  const auto c = images.size(1), h = images.size(2), w = images.size(3);
  const auto scale = opt.upscale > 0 ? opt.upscale : std::max<std::int64_t>(1, 128 / std::max(h, w));
  const auto th = h * scale, tw = w * scale, p = opt.padding;
  auto grid = torch::full({c, opt.rows * (th + p) + p, opt.cols * (tw + p) + p}, 255, torch::kUInt8);
  const auto n = std::min(images.size(0), opt.rows * opt.cols);
  if (n == 0) return grid;
  auto tiles = to_uint8(images.slice(0, 0, n));
  if (scale > 1) tiles = tiles.repeat_interleave(scale, 2).repeat_interleave(scale, 3);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto r = i / opt.cols, col = i % opt.cols;
    const auto y0 = p + r * (th + p), x0 = p + col * (tw + p);
    grid.slice(1, y0, y0 + th).slice(2, x0, x0 + tw).copy_(tiles[i]);
  }
  return grid;
}

inline void save_grid(const std::filesystem::path& path, const torch::Tensor& images, const GridOptions& opt = {}) {
  write_png(path, make_grid(images, opt));
}

}  // namespace cmi
