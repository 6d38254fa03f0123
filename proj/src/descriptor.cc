#include "objslam/descriptor.h"

#include <numeric>
#include <vector>

#include "objslam/errors.h"
#include "objslam/random.h"

namespace objslam {
namespace {

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

std::string to_hex(const BinaryDescriptor& d) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(2 * BinaryDescriptor::kBytes, '0');
  for (int b = 0; b < BinaryDescriptor::kBytes; ++b) {
    const uint8_t value = d.byte(b);
    out[2 * b] = kDigits[value >> 4];
    out[2 * b + 1] = kDigits[value & 0xf];
  }
  return out;
}

BinaryDescriptor descriptor_from_hex(std::string_view hex) {
  if (hex.size() != 2 * BinaryDescriptor::kBytes) {
    throw FormatError("descriptor must be 64 hex characters, got " +
                      std::to_string(hex.size()));
  }
  BinaryDescriptor d;
  for (int b = 0; b < BinaryDescriptor::kBytes; ++b) {
    const int hi = hex_value(hex[2 * b]);
    const int lo = hex_value(hex[2 * b + 1]);
    if (hi < 0 || lo < 0) throw FormatError("invalid hex digit in descriptor");
    d.set_byte(b, static_cast<uint8_t>((hi << 4) | lo));
  }
  return d;
}

BinaryDescriptor random_descriptor(Random& rng) {
  BinaryDescriptor d;
  for (auto& w : d.words) w = rng.next();
  return d;
}

BinaryDescriptor flip_random_bits(const BinaryDescriptor& d, int n, Random& rng) {
  BinaryDescriptor out = d;
  if (n <= 0) return out;
  // Partial Fisher-Yates over bit positions.
  std::array<int, BinaryDescriptor::kBits> pos;
  std::iota(pos.begin(), pos.end(), 0);
  const int count = std::min(n, BinaryDescriptor::kBits);
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng.uniform_index(BinaryDescriptor::kBits - i));
    std::swap(pos[i], pos[j]);
    out.flip_bit(pos[i]);
  }
  return out;
}

}  // namespace objslam
