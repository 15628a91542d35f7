#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>

namespace hwbd {

inline std::uint32_t float_to_bits(float v) noexcept { return std::bit_cast<std::uint32_t>(v); }
inline float bits_to_float(std::uint32_t bits) noexcept { return std::bit_cast<float>(bits); }

inline float flip_bit(float v, unsigned bit) noexcept {
  return bits_to_float(float_to_bits(v) ^ (std::uint32_t{1} << bit));
}

/// Maps floats onto a line of integers where adjacent representable values differ by one.
/// -0 and +0 share the key 0.
inline std::int64_t ordered_key(float v) noexcept {
  const std::uint32_t bits = float_to_bits(v);
  const auto magnitude = static_cast<std::int64_t>(bits & 0x7fffffffu);
  return (bits & 0x80000000u) ? -magnitude : magnitude;
}

inline float from_ordered_key(std::int64_t key) noexcept {
  if (key < 0) return bits_to_float(0x80000000u | static_cast<std::uint32_t>(-key));
  return bits_to_float(static_cast<std::uint32_t>(key));
}

/// Moves `v` by `steps` representable values, saturating at the largest finite magnitude.
inline float ulp_step(float v, std::int64_t steps) noexcept {
  constexpr std::int64_t kMaxKey = 0x7f7fffff;
  std::int64_t key = ordered_key(v) + steps;
  if (key > kMaxKey) key = kMaxKey;
  if (key < -kMaxKey) key = -kMaxKey;
  return from_ordered_key(key);
}

/// Number of representable values strictly between a and b, plus one (0 if equal).
inline std::int64_t ulp_distance(float a, float b) noexcept {
  const std::int64_t d = ordered_key(a) - ordered_key(b);
  return d < 0 ? -d : d;
}

inline float ulp_size(float v) noexcept {
  const float a = std::fabs(v);
  return std::nextafter(a, std::numeric_limits<float>::infinity()) - a;
}

/// Round-to-nearest-even onto bfloat16 (8 significand bits), returned widened to float.
/// Finite inputs that round past the bfloat16 range become infinity.
inline float round_to_bf16(float v) noexcept {
  std::uint32_t bits = float_to_bits(v);
  if ((bits & 0x7f800000u) == 0x7f800000u) return v;
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7fffu + lsb;
  return bits_to_float(bits & 0xffff0000u);
}

/// Round-to-nearest-even onto IEEE binary16, returned widened to float.
/// Subnormal halves are kept; overflow yields nullopt.
inline std::optional<float> round_to_f16(float v) noexcept {
  if (!std::isfinite(v)) return std::nullopt;
  const float a = std::fabs(v);
  if (a == 0.0f) return v;
  // Spacing of binary16 values near |v|: 2^(e-10) for normals, 2^-24 below 2^-14.
  int exponent = 0;
  std::frexp(a, &exponent);  // a = m * 2^exponent, m in [0.5, 1)
  const int unbiased = exponent - 1;
  const int quantum_exp = (unbiased < -14 ? -14 : unbiased) - 10;
  const double quantum = std::ldexp(1.0, quantum_exp);
  const double scaled = static_cast<double>(a) / quantum;  // exact: a has 24 bits
  const double rounded = std::nearbyint(scaled);           // default FE_TONEAREST: ties to even
  const double result = rounded * quantum;
  if (result > 65504.0) return std::nullopt;
  return static_cast<float>(std::copysign(result, static_cast<double>(v)));
}

}  // namespace hwbd
