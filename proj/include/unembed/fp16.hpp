#pragma once

#include <cstdint>
#include <cstring>

namespace unembed {

// Binary16 storage emulation. Arithmetic stays in fp32/fp64; these helpers
// round values onto the half-precision grid (round-to-nearest-even, with
// subnormals, overflow to inf). double -> half goes through float first,
// matching the float-typed pipelines the emulation models.

inline uint32_t float_bits(float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}

inline float bits_float(uint32_t u) {
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline uint16_t float_to_half_bits(float ff) {
  uint32_t f = float_bits(ff);
  const uint32_t f32inf = 255u << 23;
  const uint32_t f16max = (127u + 16u) << 23;
  const uint32_t denorm_magic_bits = ((127u - 15u) + (23u - 10u) + 1u) << 23;
  const uint32_t sign_mask = 0x80000000u;

  const uint32_t sign = f & sign_mask;
  f ^= sign;

  uint16_t o;
  if (f >= f16max) {
    o = (f > f32inf) ? 0x7e00 : 0x7c00;  // NaN -> qNaN, else inf
  } else if (f < (113u << 23)) {
    // Result is subnormal (or zero): rounding happens inside the float add.
    const float tmp = bits_float(f) + bits_float(denorm_magic_bits);
    o = static_cast<uint16_t>(float_bits(tmp) - denorm_magic_bits);
  } else {
    const uint32_t mant_odd = (f >> 13) & 1u;
    f += 0xc8000fffu;  // rebias exponent and set up round-to-nearest
    f += mant_odd;     // ties to even
    o = static_cast<uint16_t>(f >> 13);
  }
  return static_cast<uint16_t>(o | (sign >> 16));
}

inline float half_bits_to_float(uint16_t h) {
  const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;
  uint32_t f;
  if (exp == 0) {
    if (mant == 0) {
      f = 0;
    } else {
      int shift = 0;
      while (!(mant & 0x400u)) {
        mant <<= 1;
        ++shift;
      }
      // subnormal value mant * 2^-24 normalizes to exponent -14 - shift
      f = ((113u - shift) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 31) {
    f = 0x7f800000u | (mant << 13);
  } else {
    f = ((exp - 15u + 127u) << 23) | (mant << 13);
  }
  return bits_float(f | sign);
}

inline float round_to_half(float f) { return half_bits_to_float(float_to_half_bits(f)); }

inline double round_to_half(double x) {
  return static_cast<double>(round_to_half(static_cast<float>(x)));
}

inline double round_to_float(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace unembed
