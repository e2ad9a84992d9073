#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <string_view>

namespace cmi {

// 64-bit FNV-1a. Used for parameter fingerprints and file fingerprints, never
// for anything security related.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) noexcept {
    for (auto b : bytes) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= kPrime;
    }
  }

  void update(std::string_view s) noexcept {
    update(std::as_bytes(std::span<const char>(s.data(), s.size())));
  }

  void update(std::uint64_t v) noexcept {
    update(std::as_bytes(std::span<const std::uint64_t>(&v, 1)));
  }

  void update(const torch::Tensor& t) {
    if (!t.defined()) {
      update(std::string_view("<undefined>"));
      return;
    }
    auto c = t.detach().contiguous().cpu();
    update(std::string_view(c.toString()));
    for (auto d : c.sizes()) update(static_cast<std::uint64_t>(d));
    const auto* p = static_cast<const std::byte*>(c.data_ptr());
    update(std::span<const std::byte>(p, c.nbytes()));
  }

  std::uint64_t digest() const noexcept { return state_; }

 private:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;
  std::uint64_t state_ = kOffset;
};

inline std::uint64_t checksum(const torch::Tensor& t) {
  Fnv1a h;
  h.update(t);
  return h.digest();
}

inline std::uint64_t checksum(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

/// Byte-level fingerprint of every named parameter and buffer of a module.
inline std::uint64_t checksum(const torch::nn::Module& m) {
  Fnv1a h;
  for (const auto& item : m.named_parameters(/*recurse=*/true)) {
    h.update(std::string_view(item.key()));
    h.update(item.value());
  }
  for (const auto& item : m.named_buffers(/*recurse=*/true)) {
    h.update(std::string_view(item.key()));
    h.update(item.value());
  }
  return h.digest();
}

inline std::string to_hex(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return out;
}

}  // namespace cmi
