#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedtune/errors.hpp"

namespace fedtune {

using u128 = unsigned __int128;

std::string u128_to_string(u128 v);

// Accumulated cost accounting for a federated course. All counters are
// monotone non-decreasing; wall_seconds is modeled transmission time (from
// the bandwidth setting), not measured wall clock, so reports stay
// deterministic.
struct CostLedger {
    uint64_t bytes_up = 0;
    uint64_t bytes_down = 0;
    u128 flops = 0;
    double wall_seconds = 0.0;
    uint64_t param_bytes_resident = 0;
    std::vector<std::string> warnings;

    void add_bytes_up(uint64_t n) { bytes_up += n; }
    void add_bytes_down(uint64_t n) { bytes_down += n; }
    void add_flops(u128 n) { flops += n; }
    void add_seconds(double s) {
        if (s < 0.0) throw UsageError("CostLedger: negative time delta");
        wall_seconds += s;
    }
    void warn(std::string msg) { warnings.push_back(std::move(msg)); }

    void merge(const CostLedger& other) {
        bytes_up += other.bytes_up;
        bytes_down += other.bytes_down;
        flops += other.flops;
        wall_seconds += other.wall_seconds;
        param_bytes_resident = std::max(param_bytes_resident, other.param_bytes_resident);
        warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
    }
};

// General delta record; negative values are usage errors.
struct LedgerEvent {
    uint64_t bytes_up = 0;
    uint64_t bytes_down = 0;
    u128 flops = 0;
    double seconds = 0.0;
};

CostLedger ledger_record(const CostLedger& ledger, const LedgerEvent& event);

}  // namespace fedtune
