#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fedtune/errors.hpp"
#include "fedtune/ledger.hpp"
#include "fedtune/rng.hpp"

namespace fedtune {

// One hyperparameter axis: an explicit candidate list, or a log-uniform
// continuous range for random search.
struct Axis {
    std::vector<double> values;          // categorical candidates
    std::optional<std::pair<double, double>> log_range;

    bool continuous() const { return log_range.has_value(); }
    void validate() const;
};

struct SearchSpace {
    std::map<std::string, Axis> axes;  // sorted by axis name

    static SearchSpace defaults();  // lr / lora scaling / dropout / v_tokens
    uint64_t grid_size() const;     // ConfigError if any axis is continuous
    void validate() const;
};

using ConfigPoint = std::map<std::string, double>;

struct Trial {
    ConfigPoint point;
    uint32_t fidelity = 0;  // rounds granted
    double val_loss = 0.0;
    double eval_score = 0.0;
    CostLedger ledger;
    bool failed = false;
    std::string failure;
};

// Runs one configuration at the given total fidelity. `token` identifies the
// trial so runners can resume from their own checkpoints; the same token is
// reused across SHA rungs.
using TrialRunner =
    std::function<Trial(const ConfigPoint& point, uint32_t fidelity, uint64_t token)>;

std::vector<ConfigPoint> grid_points(const SearchSpace& space);

std::vector<Trial> grid_search(const SearchSpace& space, uint32_t fidelity,
                               const TrialRunner& runner);

std::vector<Trial> random_search(const SearchSpace& space, uint32_t n, uint64_t seed,
                                 uint32_t fidelity, const TrialRunner& runner);

ConfigPoint sample_point(const SearchSpace& space, Rng& rng);

struct ShaResult {
    Trial best;
    std::vector<Trial> all;           // final state of every candidate
    uint64_t total_granted_rounds = 0;
    std::vector<uint32_t> rung_sizes;
    std::vector<uint32_t> rung_fidelities;
};

// Successive halving: rung i runs ceil(n0 / eta^i) survivors at fidelity
// r0 * eta^i rounds (resuming from the previous rung), keeping the top
// ceil(n_i / eta) by validation loss; ties break by lexicographic config
// order. Candidates are n0 distinct seeded draws (the whole grid when it has
// at most n0 points).
ShaResult successive_halving(const SearchSpace& space, uint32_t n0, uint32_t r0,
                             uint32_t eta, uint64_t seed, const TrialRunner& runner);

struct RankLandscape {
    std::vector<double> rank_by_val;   // ascending val_loss, ties averaged
    std::vector<double> rank_by_eval;  // descending eval_score, ties averaged
    double spearman_rho = 0.0;
    double discrepancy = 0.0;  // 1 - rho, in [0, 2]
};

RankLandscape rank_landscape(const std::vector<Trial>& trials);

// Exhaustive subset pick: the k columns whose per-config mean is closest (L2)
// to the all-column mean; ties -> lexicographically smallest index set.
std::vector<uint32_t> select_subtask_subset(
    const std::vector<std::vector<double>>& score_matrix, uint32_t k);

bool point_less(const ConfigPoint& a, const ConfigPoint& b);

}  // namespace fedtune
