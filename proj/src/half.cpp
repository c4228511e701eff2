#include "fedtune/half.hpp"

#include <cmath>
#include <limits>

namespace fedtune {

namespace {

// Round non-negative r to the nearest integer, ties to even. r/quantum is a
// power-of-two division, so r and the fraction below are exact doubles.
double round_ties_even(double r) {
    double lo = std::floor(r);
    double frac = r - lo;
    if (frac > 0.5) return lo + 1.0;
    if (frac < 0.5) return lo;
    return (std::fmod(lo, 2.0) == 0.0) ? lo : lo + 1.0;
}

}  // namespace

HalfResult half_bits_from_double(double x) {
    uint16_t sign = std::signbit(x) ? 0x8000 : 0;
    if (std::isnan(x)) {
        return {static_cast<uint16_t>(0x7e00 | sign), false};
    }
    double a = std::abs(x);
    if (a == 0.0) return {sign, false};
    if (std::isinf(x) || a >= kHalfOverflow) {
        return {static_cast<uint16_t>(0x7bff | sign), true};  // +/-65504
    }

    if (a >= 0x1.0p-14) {
        // Normal range: quantum is one half-ulp spacing at a's binade.
        int e2;
        (void)std::frexp(a, &e2);       // a = m * 2^e2, m in [0.5, 1)
        int e = e2 - 1;                 // 2^e <= a < 2^(e+1)
        double quantum = std::ldexp(1.0, e - 10);
        double q = round_ties_even(a / quantum);
        double value = q * quantum;     // exact
        // Rounding may carry into the next binade (q == 2048); re-derive.
        int ve;
        double vm = std::frexp(value, &ve);
        int exp_field = ve - 1 + 15;
        auto mant = static_cast<uint16_t>((vm * 2.0 - 1.0) * 1024.0);
        return {static_cast<uint16_t>(sign | (exp_field << 10) | mant), false};
    }

    // Subnormal range: fixed quantum 2^-24.
    double q = round_ties_even(a * 0x1.0p24);
    if (q >= 1024.0) {
        // Carried into the smallest normal.
        return {static_cast<uint16_t>(sign | (1 << 10)), false};
    }
    return {static_cast<uint16_t>(sign | static_cast<uint16_t>(q)), false};
}

double double_from_half_bits(uint16_t bits) {
    double sign = (bits & 0x8000) ? -1.0 : 1.0;
    int exp_field = (bits >> 10) & 0x1f;
    int mant = bits & 0x3ff;
    if (exp_field == 0x1f) {
        if (mant != 0) return std::nan("");
        return sign * std::numeric_limits<double>::infinity();
    }
    if (exp_field == 0) {
        return sign * static_cast<double>(mant) * 0x1.0p-24;
    }
    double m = 1.0 + static_cast<double>(mant) / 1024.0;
    return sign * std::ldexp(m, exp_field - 15);
}

double round_to_half(double x, bool* clamped) {
    HalfResult r = half_bits_from_double(x);
    if (clamped) *clamped = r.clamped;
    return double_from_half_bits(r.bits);
}

}  // namespace fedtune
