#pragma once

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace cmi {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed, a purpose tag and
/// integer coordinates (timestamp, iteration, ...). Every random draw in the
/// toolkit goes through a seed derived this way so that runs are pure
/// functions of (config, seed).
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::initializer_list<std::uint64_t> coords = {}) noexcept {
  std::uint64_t s = splitmix64(base);
  for (char c : tag) s = splitmix64(s ^ static_cast<unsigned char>(c));
  for (auto c : coords) s = splitmix64(s ^ splitmix64(c + 0x632be59bd9b4e019ULL));
  return s;
}

inline at::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace cmi
