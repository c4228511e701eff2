#include "fedtune/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "fedtune/rng.hpp"

namespace fedtune {

TensorF TensorF::zeros(std::vector<uint32_t> dims) {
    TensorF t;
    size_t n = 1;
    for (uint32_t d : dims) n *= d;
    t.dims = std::move(dims);
    t.data.assign(n, 0.0);
    t.validate();
    return t;
}

void TensorF::validate() const {
    if (dims.empty() || dims.size() > 2) {
        throw UsageError("TensorF: rank must be 1 or 2");
    }
    size_t n = 1;
    for (uint32_t d : dims) {
        if (d == 0) throw UsageError("TensorF: zero dimension");
        n *= d;
    }
    if (n != data.size()) {
        throw UsageError("TensorF: dims product does not match data length");
    }
}

bool TensorF::all_finite() const {
    return std::all_of(data.begin(), data.end(),
                       [](double v) { return std::isfinite(v); });
}

void ParamTree::insert(std::string name, TensorF t) {
    t.validate();
    auto it = std::lower_bound(
        entries_.begin(), entries_.end(), name,
        [](const Entry& e, const std::string& n) { return e.first < n; });
    if (it != entries_.end() && it->first == name) {
        throw UsageError("ParamTree: duplicate name '" + name + "'");
    }
    entries_.insert(it, Entry{std::move(name), std::move(t)});
}

bool ParamTree::has(const std::string& name) const { return find(name) != nullptr; }

const TensorF* ParamTree::find(const std::string& name) const {
    auto it = std::lower_bound(
        entries_.begin(), entries_.end(), name,
        [](const Entry& e, const std::string& n) { return e.first < n; });
    if (it == entries_.end() || it->first != name) return nullptr;
    return &it->second;
}

TensorF* ParamTree::find_mut(const std::string& name) {
    return const_cast<TensorF*>(static_cast<const ParamTree*>(this)->find(name));
}

const TensorF& ParamTree::get(const std::string& name) const {
    const TensorF* t = find(name);
    if (!t) throw UsageError("ParamTree: missing name '" + name + "'");
    return *t;
}

TensorF& ParamTree::get_mut(const std::string& name) {
    TensorF* t = find_mut(name);
    if (!t) throw UsageError("ParamTree: missing name '" + name + "'");
    return *t;
}

uint64_t ParamTree::param_count() const {
    uint64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
}

uint64_t ParamTree::digest64() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : entries_) {
        h = fnv1a64(name, h);
        uint32_t rank = static_cast<uint32_t>(t.dims.size());
        h = fnv1a64(&rank, sizeof(rank), h);
        h = fnv1a64(t.dims.data(), t.dims.size() * sizeof(uint32_t), h);
        h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
    }
    return h;
}

bool ParamTree::all_finite() const {
    return std::all_of(entries_.begin(), entries_.end(),
                       [](const Entry& e) { return e.second.all_finite(); });
}

bool congruent(const ParamTree& a, const ParamTree& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        const auto& [an, at] = a.entries()[i];
        const auto& [bn, bt] = b.entries()[i];
        if (an != bn || at.dims != bt.dims) return false;
    }
    return true;
}

void require_congruent(const ParamTree& a, const ParamTree& b, const char* op) {
    if (!congruent(a, b)) {
        throw UsageError(std::string(op) + ": trees are not congruent");
    }
}

ParamTree tree_axpy(const ParamTree& a, const ParamTree& b, double scale) {
    require_congruent(a, b, "tree_axpy");
    ParamTree out = a;
    for (size_t i = 0; i < out.size(); ++i) {
        auto& dst = out.entries_mut()[i].second.data;
        const auto& src = b.entries()[i].second.data;
        for (size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
    }
    if (!out.all_finite()) throw UsageError("tree_axpy: non-finite result");
    return out;
}

ParamTree tree_scale(const ParamTree& a, double scale) {
    ParamTree out = a;
    for (auto& [name, t] : out.entries_mut()) {
        for (double& v : t.data) v *= scale;
    }
    if (!out.all_finite()) throw UsageError("tree_scale: non-finite result");
    return out;
}

ParamTree tree_sub(const ParamTree& a, const ParamTree& b) {
    return tree_axpy(a, b, -1.0);
}

void tree_accumulate(ParamTree& acc, const ParamTree& delta, double scale) {
    require_congruent(acc, delta, "tree_accumulate");
    for (size_t i = 0; i < acc.size(); ++i) {
        auto& dst = acc.entries_mut()[i].second.data;
        const auto& src = delta.entries()[i].second.data;
        for (size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
    }
}

void tree_fill_zero(ParamTree& t) {
    for (auto& [name, tensor] : t.entries_mut()) {
        std::fill(tensor.data.begin(), tensor.data.end(), 0.0);
    }
}

double tree_inf_norm(const ParamTree& a) {
    double m = 0.0;
    for (const auto& [name, t] : a.entries()) {
        for (double v : t.data) m = std::max(m, std::abs(v));
    }
    return m;
}

double tree_sq_norm(const ParamTree& a) {
    double s = 0.0;
    for (const auto& [name, t] : a.entries()) {
        for (double v : t.data) s += v * v;
    }
    return s;
}

}  // namespace fedtune
