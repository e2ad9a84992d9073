#pragma once

#include <png.h>
#include <torch/torch.h>

#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>

#include "cmi/core/errors.hpp"

namespace cmi {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return f;
}

}  // namespace detail

/// Writes an 8-bit (C, H, W) tensor, C in {1, 3}, as a PNG.
inline void write_png(const std::filesystem::path& path, const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.scalar_type() != torch::kUInt8 || (chw.size(0) != 1 && chw.size(0) != 3)) {
    throw InvalidArgument("write_png expects a uint8 (C,H,W) tensor with C in {1,3}");
  }
  const auto hwc = chw.permute({1, 2, 0}).contiguous();
  const auto h = static_cast<png_uint_32>(hwc.size(0));
  const auto w = static_cast<png_uint_32>(hwc.size(1));
  const int color = chw.size(0) == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  auto f = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const auto* data = hwc.data_ptr<std::uint8_t>();
  const std::size_t stride = static_cast<std::size_t>(w) * static_cast<std::size_t>(chw.size(0));
  for (png_uint_32 y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads a PNG into an 8-bit (C, H, W) tensor; palette and 16-bit images are
/// converted, alpha is dropped. `channels` forces 1 or 3 output channels.
inline torch::Tensor read_png(const std::filesystem::path& path, int channels = 0) {
  auto f = detail::open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("'" + path.string() + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed reading '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  const bool gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (channels == 3 && gray) png_set_gray_to_rgb(png);
  if (channels == 1 && !gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  const auto h = png_get_image_height(png, info);
  const auto w = png_get_image_width(png, info);
  const auto c = png_get_channels(png, info);
  // Allocated before re-arming the jump buffer so a libpng error never skips its destructor.
  auto out = torch::empty({static_cast<std::int64_t>(h), static_cast<std::int64_t>(w), static_cast<std::int64_t>(c)},
                          torch::kUInt8);
  auto* data = out.data_ptr<std::uint8_t>();
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed reading rows of '" + path.string() + "'");
  }
  const std::size_t stride = static_cast<std::size_t>(w) * c;
  for (png_uint_32 y = 0; y < h; ++y) png_read_row(png, data + y * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out.permute({2, 0, 1}).contiguous();
}

}  // namespace cmi
