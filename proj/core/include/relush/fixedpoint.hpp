#pragma once

#include <cmath>
#include <cstdint>

#include "relush/common.hpp"

namespace relush {

/// Arithmetic over Z_{2^l}, l in [8, 64]. Values live in the low l bits of a
/// uint64_t; every operation re-masks.
struct RingParams {
  int bits = 64;

  std::uint64_t mask() const {
    return bits >= 64 ? ~std::uint64_t{0}
                      : ((std::uint64_t{1} << bits) - 1);
  }
  void validate() const {
    if (bits < 8 || bits > 64) throw Error("ring width must be in [8, 64]");
  }
};

inline std::uint64_t ring_reduce(std::uint64_t v, const RingParams& r) {
  return v & r.mask();
}
inline std::uint64_t ring_add(std::uint64_t a, std::uint64_t b,
                              const RingParams& r) {
  return (a + b) & r.mask();
}
inline std::uint64_t ring_sub(std::uint64_t a, std::uint64_t b,
                              const RingParams& r) {
  return (a - b) & r.mask();
}
inline std::uint64_t ring_mul(std::uint64_t a, std::uint64_t b,
                              const RingParams& r) {
  return (a * b) & r.mask();
}
inline std::uint64_t ring_neg(std::uint64_t a, const RingParams& r) {
  return (~a + 1) & r.mask();
}

/// Two's-complement sign bit (bit l-1); 0 counts as non-negative.
inline bool ring_is_negative(std::uint64_t v, const RingParams& r) {
  return (v >> (r.bits - 1)) & 1u;
}

/// Back to a signed integer in [-2^(l-1), 2^(l-1)).
inline std::int64_t ring_to_signed(std::uint64_t v, const RingParams& r) {
  if (r.bits >= 64) return static_cast<std::int64_t>(v);
  if (ring_is_negative(v, r)) {
    return static_cast<std::int64_t>(v | ~r.mask());
  }
  return static_cast<std::int64_t>(v);
}

/// Arithmetic (sign-extending) right shift of the represented value.
inline std::uint64_t ring_arith_shift_right(std::uint64_t v, int shift,
                                            const RingParams& r) {
  const std::int64_t s = ring_to_signed(v, r);
  return static_cast<std::uint64_t>(s >> shift) & r.mask();
}

/// Fixed-point format: reals on the grid k * 2^-scale_bits, stored as
/// two's-complement ring elements.
struct FixedPointFormat {
  int ring_bits = 64;
  int scale_bits = 13;

  RingParams ring() const { return RingParams{ring_bits}; }
  double resolution() const { return std::ldexp(1.0, -scale_bits); }
  /// Largest representable magnitude (exclusive).
  double range() const { return std::ldexp(1.0, ring_bits - scale_bits - 1); }
};

/// round(x * 2^scale) as a two's-complement ring element. Throws
/// OverflowError when |x| does not fit the ring at this scale.
inline std::uint64_t fixed_encode(double x, const FixedPointFormat& fmt) {
  if (!std::isfinite(x) || std::abs(x) >= fmt.range()) {
    throw OverflowError("value " + std::to_string(x) +
                        " outside fixed-point range +-" +
                        std::to_string(fmt.range()));
  }
  const std::int64_t scaled =
      std::llround(x * std::ldexp(1.0, fmt.scale_bits));
  return static_cast<std::uint64_t>(scaled) & fmt.ring().mask();
}

/// Encode at an explicit scale (products carry twice the base scale).
inline std::uint64_t fixed_encode_at(double x, int scale_bits,
                                     const FixedPointFormat& fmt) {
  FixedPointFormat f = fmt;
  f.scale_bits = scale_bits;
  return fixed_encode(x, f);
}

inline double fixed_decode(std::uint64_t v, const FixedPointFormat& fmt) {
  return static_cast<double>(ring_to_signed(v, fmt.ring())) *
         fmt.resolution();
}

inline double fixed_decode_at(std::uint64_t v, int scale_bits,
                              const FixedPointFormat& fmt) {
  FixedPointFormat f = fmt;
  f.scale_bits = scale_bits;
  return fixed_decode(v, f);
}

}  // namespace relush
