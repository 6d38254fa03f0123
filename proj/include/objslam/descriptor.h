#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <string>
#include <string_view>

namespace objslam {

class Random;

// 256-bit binary feature descriptor (ORB-sized).
struct BinaryDescriptor {
  static constexpr int kBits = 256;
  static constexpr int kBytes = kBits / 8;

  std::array<uint64_t, 4> words{};

  bool bit(int i) const { return (words[i >> 6] >> (i & 63)) & 1ULL; }
  void set_bit(int i, bool value) {
    const uint64_t mask = 1ULL << (i & 63);
    if (value) {
      words[i >> 6] |= mask;
    } else {
      words[i >> 6] &= ~mask;
    }
  }
  void flip_bit(int i) { words[i >> 6] ^= 1ULL << (i & 63); }

  BinaryDescriptor complement() const {
    BinaryDescriptor out;
    for (int i = 0; i < 4; ++i) out.words[i] = ~words[i];
    return out;
  }

  uint8_t byte(int b) const { return static_cast<uint8_t>(words[b >> 3] >> (8 * (b & 7))); }
  void set_byte(int b, uint8_t value) {
    const int shift = 8 * (b & 7);
    words[b >> 3] = (words[b >> 3] & ~(0xffULL << shift)) | (uint64_t{value} << shift);
  }

  bool operator==(const BinaryDescriptor&) const = default;
  auto operator<=>(const BinaryDescriptor&) const = default;
};

inline int hamming(const BinaryDescriptor& a, const BinaryDescriptor& b) {
  return std::popcount(a.words[0] ^ b.words[0]) + std::popcount(a.words[1] ^ b.words[1]) +
         std::popcount(a.words[2] ^ b.words[2]) + std::popcount(a.words[3] ^ b.words[3]);
}

// 64 lowercase hex characters, byte 0 first, high nibble first.
std::string to_hex(const BinaryDescriptor& d);
BinaryDescriptor descriptor_from_hex(std::string_view hex);

BinaryDescriptor random_descriptor(Random& rng);

// Flips exactly `n` distinct bits chosen uniformly.
BinaryDescriptor flip_random_bits(const BinaryDescriptor& d, int n, Random& rng);

}  // namespace objslam
