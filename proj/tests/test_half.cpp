#include <doctest.h>

#include <cmath>
#include <vector>

#include "fedtune/half.hpp"
#include "fedtune/model.hpp"
#include "fedtune/rng.hpp"

using namespace fedtune;

namespace {

// Reference oracle: enumerate every finite binary16 value and pick the
// nearest by absolute distance, ties to the one with an even mantissa bit.
double nearest_half_bruteforce(double x, bool* clamped) {
    static std::vector<std::pair<double, uint16_t>> table;  // value, bits
    if (table.empty()) {
        for (uint32_t bits = 0; bits < 0x10000; ++bits) {
            uint16_t b = static_cast<uint16_t>(bits);
            int exp_field = (b >> 10) & 0x1f;
            if (exp_field == 0x1f) continue;  // inf/nan
            table.emplace_back(double_from_half_bits(b), b);
        }
    }
    double best = 0.0;
    double best_dist = 1e308;
    for (auto [v, b] : table) {
        double d = std::abs(x - v);
        // ties (exactly two adjacent candidates) resolve to the even mantissa
        if (d < best_dist || (d == best_dist && (b & 1) == 0)) {
            best = v;
            best_dist = d;
        }
    }
    // distance to the overflow boundary decides clamping
    *clamped = std::abs(x) >= kHalfOverflow;
    return *clamped ? std::copysign(kHalfMax, x) : best;
}

}  // namespace

TEST_CASE("exact values round to themselves") {
    for (double v : {0.0, 1.0, -1.0, 0.5, 2.0, 65504.0, -65504.0, 6.103515625e-05}) {
        bool clamped = true;
        CHECK(round_to_half(v, &clamped) == v);
        CHECK_FALSE(clamped);
    }
}

TEST_CASE("values below a half ulp vanish into the neighbor") {
    // ulp at 1.0 is 2^-10; 2^-13 is below half of that
    CHECK(round_to_half(1.0 + 0x1.0p-13) == 1.0);
    // exactly half an ulp above 1.0 -> tie -> even mantissa (stay at 1.0)
    CHECK(round_to_half(1.0 + 0x1.0p-11) == 1.0);
    // just above the tie goes up
    CHECK(round_to_half(1.0 + 0x1.0p-11 + 0x1.0p-20) == 1.0 + 0x1.0p-10);
}

TEST_CASE("out-of-range magnitudes clamp with a warning flag") {
    bool clamped = false;
    CHECK(round_to_half(70000.0, &clamped) == 65504.0);
    CHECK(clamped);
    clamped = false;
    CHECK(round_to_half(-70000.0, &clamped) == -65504.0);
    CHECK(clamped);
    // 65505 rounds back into range without clamping
    clamped = true;
    CHECK(round_to_half(65505.0, &clamped) == 65504.0);
    CHECK_FALSE(clamped);
}

TEST_CASE("matches the brute-force nearest-even oracle") {
    Rng rng(123);
    int checked = 0;
    for (int i = 0; i < 400; ++i) {
        double mag = std::exp(rng.uniform(-12.0, 11.5));
        double x = (rng.uniform() < 0.5 ? -1 : 1) * mag;
        bool want_clamped = false;
        double want = nearest_half_bruteforce(x, &want_clamped);
        bool got_clamped = false;
        double got = round_to_half(x, &got_clamped);
        CAPTURE(x);
        CHECK(got == want);
        CHECK(got_clamped == want_clamped);
        checked++;
    }
    // subnormal range
    for (int i = 0; i < 100; ++i) {
        double x = rng.uniform(-1.0, 1.0) * 6e-5;
        bool want_clamped = false;
        double want = nearest_half_bruteforce(x, &want_clamped);
        CAPTURE(x);
        CHECK(round_to_half(x) == want);
        checked++;
    }
    CHECK(checked == 500);
}

TEST_CASE("half bits round-trip") {
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        double x = rng.normal() * 8.0;
        double h = round_to_half(x);
        // idempotent
        CHECK(round_to_half(h) == h);
        // representable value reproduces its own bits
        CHECK(double_from_half_bits(half_bits_from_double(h).bits) == h);
    }
}

TEST_CASE("tree rounding records clamp warnings in the ledger") {
    ParamTree t;
    TensorF big = TensorF::zeros({2});
    big.data = {70000.0, 1.0};
    t.insert("w", big);
    CostLedger ledger;
    ParamTree r = round_half(t, &ledger);
    CHECK(r.get("w").data[0] == 65504.0);
    CHECK(r.get("w").data[1] == 1.0);
    REQUIRE(ledger.warnings.size() == 1);
    // applying the rounding twice changes nothing
    ParamTree r2 = round_half(r, nullptr);
    CHECK(r2.digest64() == r.digest64());
}
