#pragma once

#include <cstdint>
#include <cstring>

namespace kvmix {

// IEEE 754 binary16 conversions, round-to-nearest-even.
//
// Quantization metadata (per-group scale and minimum) is kept at half
// precision: values are computed in full precision and then rounded through
// binary16, so the in-memory floats, the serialized 2-byte fields, and the
// memory accounting all describe the same numbers.

inline uint16_t half_from_float(float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  const uint16_t sign = static_cast<uint16_t>((bits >> 16) & 0x8000u);
  const int32_t fexp = static_cast<int32_t>((bits >> 23) & 0xffu);
  const uint32_t mant = bits & 0x007fffffu;

  if (fexp == 0xff) {  // inf / nan
    return static_cast<uint16_t>(sign | 0x7c00u | (mant ? 0x0200u : 0u));
  }
  const int32_t e = fexp - 127;
  if (e > 15) return static_cast<uint16_t>(sign | 0x7c00u);
  if (e >= -14) {
    // normal half: round 23-bit mantissa to 10 bits, carry may bump exponent
    const uint32_t rounded = (mant + 0x00000fffu + ((mant >> 13) & 1u)) >> 13;
    const uint32_t h = (static_cast<uint32_t>(e + 15) << 10) + rounded;
    if (h >= 0x7c00u) return static_cast<uint16_t>(sign | 0x7c00u);
    return static_cast<uint16_t>(sign | h);
  }
  if (e < -25) return sign;  // underflows to zero even after rounding
  // subnormal half: value becomes an integer multiple of 2^-24
  const uint32_t full = mant | 0x00800000u;
  const uint32_t sh = static_cast<uint32_t>(-e - 1);  // in [14, 24]
  const uint32_t half_bit = 1u << (sh - 1);
  uint32_t q = full >> sh;
  const uint32_t rem = full & ((half_bit << 1) - 1u);
  if (rem > half_bit || (rem == half_bit && (q & 1u))) ++q;
  return static_cast<uint16_t>(sign | q);
}

inline float float_from_half(uint16_t h) {
  const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
  const uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;
  uint32_t bits;
  if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else if (exp != 0) {
    bits = sign | ((exp + 112u) << 23) | (mant << 13);
  } else if (mant != 0) {
    uint32_t e = 0;  // value = mant * 2^-24; normalize to 1.x * 2^(-14-e)
    while (!(mant & 0x400u)) {
      mant <<= 1;
      ++e;
    }
    mant &= 0x3ffu;
    bits = sign | ((113u - e) << 23) | (mant << 13);
  } else {
    bits = sign;
  }
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

// Nearest binary16 value of x, returned as a float.
inline float round_through_half(float x) { return float_from_half(half_from_float(x)); }

}  // namespace kvmix
