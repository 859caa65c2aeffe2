#pragma once

#include <cstdint>
#include <string_view>

namespace tkp {

/// SplitMix64 finalizer. Used to decorrelate seeds derived from counters.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Expands a global seed into an independent stream seed for a named purpose.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

/// Seed for the stream belonging to one item (pixel, start, ...) of a labelled purpose.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label,
                                    std::uint64_t counter) noexcept {
  return splitmix64(derive_seed(seed, label) + splitmix64(counter));
}

}  // namespace tkp
