#pragma once

#include <cstdint>

namespace fedtune {

inline constexpr double kHalfMax = 65504.0;
// Smallest |x| that rounds to infinity under IEEE binary16 round-to-nearest-even;
// values at or beyond it are saturated to +/-65504 instead.
inline constexpr double kHalfOverflow = 65520.0;

struct HalfResult {
    uint16_t bits;
    bool clamped;  // magnitude saturated to +/-65504
};

// Nearest IEEE-754 binary16 (ties to even), computed directly from the double
// so no intermediate f32 double-rounding occurs. Out-of-range magnitudes
// saturate and set `clamped`.
HalfResult half_bits_from_double(double x);

double double_from_half_bits(uint16_t bits);

// Convenience: value rounded through binary16 and back. `clamped` (when
// non-null) is set if saturation occurred.
double round_to_half(double x, bool* clamped = nullptr);

}  // namespace fedtune
