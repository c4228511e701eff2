#include "fedtune/hpo.hpp"

#include <algorithm>
#include <cmath>

namespace fedtune {

void Axis::validate() const {
    if (continuous()) {
        auto [lo, hi] = *log_range;
        if (!(lo > 0.0) || !(hi > lo)) {
            throw ConfigError("axis: log range needs 0 < lo < hi");
        }
        return;
    }
    if (values.empty()) throw ConfigError("axis: empty candidate list");
}

SearchSpace SearchSpace::defaults() {
    SearchSpace s;
    s.axes["lr"] = Axis{{1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3}, std::nullopt};
    s.axes["scaling"] = Axis{{16, 32, 64, 128}, std::nullopt};
    s.axes["dropout"] = Axis{{0.0, 0.1}, std::nullopt};
    s.axes["v_tokens"] = Axis{{10, 20, 30}, std::nullopt};
    return s;
}

void SearchSpace::validate() const {
    if (axes.empty()) throw ConfigError("search space: no axes");
    for (const auto& [name, axis] : axes) axis.validate();
}

uint64_t SearchSpace::grid_size() const {
    validate();
    uint64_t n = 1;
    for (const auto& [name, axis] : axes) {
        if (axis.continuous()) {
            throw ConfigError("grid over continuous axis '" + name + "'");
        }
        n *= axis.values.size();
    }
    return n;
}

bool point_less(const ConfigPoint& a, const ConfigPoint& b) {
    return std::lexicographical_compare(
        a.begin(), a.end(), b.begin(), b.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first < y.first;
            return x.second < y.second;
        });
}

std::vector<ConfigPoint> grid_points(const SearchSpace& space) {
    space.grid_size();
    std::vector<ConfigPoint> points;
    points.emplace_back();
    for (const auto& [name, axis] : space.axes) {
        std::vector<ConfigPoint> next;
        next.reserve(points.size() * axis.values.size());
        for (const ConfigPoint& p : points) {
            for (double v : axis.values) {
                ConfigPoint q = p;
                q[name] = v;
                next.push_back(std::move(q));
            }
        }
        points = std::move(next);
    }
    std::sort(points.begin(), points.end(), point_less);
    return points;
}

namespace {

uint64_t point_token(const ConfigPoint& p) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, value] : p) {
        h = fnv1a64(name, h);
        h = fnv1a64(&value, sizeof(value), h);
    }
    return h;
}

Trial run_one(const TrialRunner& runner, const ConfigPoint& p, uint32_t fidelity) {
    try {
        Trial t = runner(p, fidelity, point_token(p));
        t.point = p;
        t.fidelity = fidelity;
        return t;
    } catch (const std::exception& e) {
        Trial t;
        t.point = p;
        t.fidelity = fidelity;
        t.failed = true;
        t.failure = e.what();
        return t;
    }
}

}  // namespace

std::vector<Trial> grid_search(const SearchSpace& space, uint32_t fidelity,
                               const TrialRunner& runner) {
    std::vector<Trial> trials;
    for (const ConfigPoint& p : grid_points(space)) {
        trials.push_back(run_one(runner, p, fidelity));
    }
    return trials;
}

ConfigPoint sample_point(const SearchSpace& space, Rng& rng) {
    ConfigPoint p;
    for (const auto& [name, axis] : space.axes) {
        if (axis.continuous()) {
            auto [lo, hi] = *axis.log_range;
            double u = rng.uniform();
            p[name] = std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
        } else {
            p[name] = axis.values[rng.below(axis.values.size())];
        }
    }
    return p;
}

std::vector<Trial> random_search(const SearchSpace& space, uint32_t n, uint64_t seed,
                                 uint32_t fidelity, const TrialRunner& runner) {
    if (n < 1) throw ConfigError("random_search: n must be >= 1");
    space.validate();
    Rng rng(derive_seed(seed, 0x61));
    std::vector<Trial> trials;
    for (uint32_t i = 0; i < n; ++i) {
        trials.push_back(run_one(runner, sample_point(space, rng), fidelity));
    }
    return trials;
}

ShaResult successive_halving(const SearchSpace& space, uint32_t n0, uint32_t r0,
                             uint32_t eta, uint64_t seed, const TrialRunner& runner) {
    if (eta < 2) throw ConfigError("sha: eta must be >= 2");
    if (n0 < eta) throw ConfigError("sha: n0 must be >= eta");
    if (r0 < 1) throw ConfigError("sha: r0 must be >= 1");
    space.validate();

    // Candidates: distinct seeded draws; the whole grid when it fits in n0.
    std::vector<ConfigPoint> candidates;
    bool finite = true;
    for (const auto& [name, axis] : space.axes) {
        if (axis.continuous()) finite = false;
    }
    if (finite && space.grid_size() <= n0) {
        candidates = grid_points(space);
    } else {
        Rng rng(derive_seed(seed, 0x62));
        std::vector<ConfigPoint> seen;
        uint32_t guard = 0;
        while (candidates.size() < n0 && guard < 100000) {
            ConfigPoint p = sample_point(space, rng);
            bool dup = std::any_of(seen.begin(), seen.end(), [&](const ConfigPoint& q) {
                return !point_less(p, q) && !point_less(q, p);
            });
            guard++;
            if (dup && finite) continue;
            seen.push_back(p);
            candidates.push_back(std::move(p));
        }
        std::sort(candidates.begin(), candidates.end(), point_less);
    }

    ShaResult result;
    std::vector<Trial> live;
    for (const ConfigPoint& p : candidates) {
        Trial t;
        t.point = p;
        live.push_back(std::move(t));
    }

    uint32_t fidelity = 0;
    for (uint32_t rung = 0;; ++rung) {
        auto survivors = static_cast<uint32_t>(live.size());
        uint32_t target = r0;
        for (uint32_t i = 0; i < rung; ++i) target *= eta;
        result.rung_sizes.push_back(survivors);
        result.rung_fidelities.push_back(target);
        result.total_granted_rounds +=
            static_cast<uint64_t>(survivors) * (target - fidelity);
        fidelity = target;

        for (Trial& t : live) {
            Trial done = run_one(runner, t.point, target);
            done.point = t.point;
            t = std::move(done);
        }
        result.all.insert(result.all.end(), live.begin(), live.end());

        if (live.size() == 1) break;
        uint32_t keep = (static_cast<uint32_t>(live.size()) + eta - 1) / eta;
        std::stable_sort(live.begin(), live.end(), [](const Trial& a, const Trial& b) {
            if (a.failed != b.failed) return !a.failed;
            if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
            return point_less(a.point, b.point);
        });
        live.resize(std::max<uint32_t>(keep, 1));
    }
    result.best = live.front();
    return result;
}

namespace {

// Fractional ranks (1-based; ties get the average rank). `ascending` ranks
// small values first.
std::vector<double> fractional_ranks(const std::vector<double>& v, bool ascending) {
    size_t n = v.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return ascending ? v[a] < v[b] : v[a] > v[b];
    });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) j++;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    auto n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double num = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) {
        throw AnalysisError("rank correlation undefined: constant ranks");
    }
    return num / std::sqrt(va * vb);
}

}  // namespace

RankLandscape rank_landscape(const std::vector<Trial>& trials) {
    std::vector<double> val, eval;
    for (const Trial& t : trials) {
        if (t.failed) continue;
        val.push_back(t.val_loss);
        eval.push_back(t.eval_score);
    }
    if (val.size() < 2) {
        throw AnalysisError("rank_landscape: need at least two completed trials");
    }
    RankLandscape rl;
    rl.rank_by_val = fractional_ranks(val, /*ascending=*/true);
    rl.rank_by_eval = fractional_ranks(eval, /*ascending=*/false);
    rl.spearman_rho = pearson(rl.rank_by_val, rl.rank_by_eval);
    rl.discrepancy = 1.0 - rl.spearman_rho;
    return rl;
}

std::vector<uint32_t> select_subtask_subset(
    const std::vector<std::vector<double>>& score_matrix, uint32_t k) {
    if (score_matrix.empty()) throw ConfigError("subset: empty score matrix");
    size_t n_subtasks = score_matrix[0].size();
    if (k == 0) throw ConfigError("subset: k must be >= 1");
    if (k > n_subtasks) throw ConfigError("subset: k exceeds subtask count");
    for (const auto& row : score_matrix) {
        if (row.size() != n_subtasks) throw ConfigError("subset: ragged matrix");
    }

    size_t n_configs = score_matrix.size();
    std::vector<double> full_mean(n_configs, 0.0);
    for (size_t c = 0; c < n_configs; ++c) {
        for (double v : score_matrix[c]) full_mean[c] += v;
        full_mean[c] /= static_cast<double>(n_subtasks);
    }

    // lexicographic combination enumeration; strict improvement keeps the
    // lexicographically smallest among ties
    std::vector<uint32_t> subset(k);
    for (uint32_t i = 0; i < k; ++i) subset[i] = i;
    std::vector<uint32_t> best;
    double best_dist = 0.0;
    bool first = true;
    for (;;) {
        double dist = 0.0;
        for (size_t c = 0; c < n_configs; ++c) {
            double m = 0.0;
            for (uint32_t s : subset) m += score_matrix[c][s];
            m /= static_cast<double>(k);
            dist += (m - full_mean[c]) * (m - full_mean[c]);
        }
        if (first || dist < best_dist) {
            best = subset;
            best_dist = dist;
            first = false;
        }
        // next combination
        int64_t i = static_cast<int64_t>(k) - 1;
        while (i >= 0 &&
               subset[static_cast<size_t>(i)] ==
                   static_cast<uint32_t>(n_subtasks - k + static_cast<size_t>(i))) {
            i--;
        }
        if (i < 0) break;
        subset[static_cast<size_t>(i)]++;
        for (size_t j = static_cast<size_t>(i) + 1; j < k; ++j) {
            subset[j] = subset[j - 1] + 1;
        }
    }
    return best;
}

}  // namespace fedtune
