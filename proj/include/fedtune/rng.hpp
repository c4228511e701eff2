#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "fedtune/errors.hpp"

namespace fedtune {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Hash-combines a base seed with stream tags so independent random streams
// can be derived from one course seed without order sensitivity.
inline uint64_t derive_seed(uint64_t base, uint64_t a = 0, uint64_t b = 0,
                            uint64_t c = 0, uint64_t d = 0) {
    uint64_t s = base;
    for (uint64_t v : {a, b, c, d}) {
        uint64_t t = v;
        s ^= splitmix64(t) + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
        s = splitmix64(s);
    }
    return s;
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

// Deterministic scalar RNG. All randomness in the project flows through this
// generator; std::mt19937 and friends are avoided so that streams are stable
// across standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform in (0, 1]; safe as a log() argument
    double uniform_pos() { return 1.0 - uniform(); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0) throw UsageError("Rng::below: n must be positive");
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller, cosine branch only so that one normal consumes exactly two
    // uniforms and the stream has no hidden cache state.
    double normal() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Marsaglia-Tsang; the alpha < 1 case is boosted through G(alpha+1).
    double gamma(double alpha) {
        if (alpha <= 0.0) throw UsageError("Rng::gamma: alpha must be positive");
        if (alpha < 1.0) {
            double u = uniform_pos();
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        double d = alpha - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform_pos();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
                return d * v;
            }
        }
    }

    // Dirichlet(alpha * 1_n) draw.
    std::vector<double> dirichlet(double alpha, size_t n) {
        std::vector<double> p(n);
        double sum = 0.0;
        for (size_t i = 0; i < n; ++i) {
            p[i] = gamma(alpha);
            sum += p[i];
        }
        for (double& v : p) v /= sum;
        return p;
    }

    // General Dirichlet with per-component concentration.
    std::vector<double> dirichlet(const std::vector<double>& alpha) {
        std::vector<double> p(alpha.size());
        double sum = 0.0;
        for (size_t i = 0; i < alpha.size(); ++i) {
            p[i] = gamma(alpha[i]);
            sum += p[i];
        }
        for (double& v : p) v /= sum;
        return p;
    }

    size_t categorical(const std::vector<double>& probs) {
        double r = uniform();
        double acc = 0.0;
        for (size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (r < acc) return i;
        }
        return probs.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace fedtune
