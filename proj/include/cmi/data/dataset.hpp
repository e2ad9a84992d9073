#pragma once

#include <torch/torch.h>

#include "cmi/core/errors.hpp"
#include "cmi/core/random.hpp"

namespace cmi {

/// Images in [-1, 1] with integer class labels.
struct LabeledImages {
  torch::Tensor images;  // (N, C, H, W) float
  torch::Tensor labels;  // (N) long
  std::int64_t num_classes = 0;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  bool empty() const { return size() == 0; }

  void validate() const {
    if (!images.defined() || images.dim() != 4) throw ShapeMismatch("dataset images must be (N,C,H,W)");
    if (!labels.defined() || labels.dim() != 1 || labels.size(0) != images.size(0)) {
      throw ShapeMismatch("dataset labels must be (N)");
    }
  }

  LabeledImages slice(std::int64_t begin, std::int64_t end) const {
    return {images.slice(0, begin, end), labels.slice(0, begin, end), num_classes};
  }

  LabeledImages select(const torch::Tensor& idx) const {
    return {images.index_select(0, idx), labels.index_select(0, idx), num_classes};
  }

  /// First `n` items of a seeded permutation.
  LabeledImages subsample(std::int64_t n, std::uint64_t seed) const {
    if (n >= size()) return *this;
    auto gen = make_generator(seed);
    return select(torch::randperm(size(), gen, torch::kLong).slice(0, 0, n));
  }
};

/// Maps 8-bit pixels to [-1, 1].
inline torch::Tensor from_uint8(const torch::Tensor& u8) {
  return u8.to(torch::kFloat).div(127.5).sub(1.0);
}

/// Maps [-1, 1] images to 8-bit pixels (round to nearest).
inline torch::Tensor to_uint8(const torch::Tensor& x) {
  return x.detach().to(torch::kFloat).add(1.0).mul(127.5).round().clamp(0, 255).to(torch::kUInt8);
}

}  // namespace cmi
