#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedtune/errors.hpp"

namespace fedtune {

// Dense rank-1/rank-2 tensor of doubles, row-major. The single value carrier
// for model weights, adapters, and gradients.
struct TensorF {
    std::vector<uint32_t> dims;
    std::vector<double> data;

    TensorF() = default;
    static TensorF zeros(std::vector<uint32_t> dims);

    size_t size() const { return data.size(); }
    size_t rank() const { return dims.size(); }
    uint32_t rows() const { return dims.empty() ? 0 : dims[0]; }
    uint32_t cols() const { return dims.size() < 2 ? 1 : dims[1]; }

    double& at(size_t r, size_t c) { return data[r * cols() + c]; }
    double at(size_t r, size_t c) const { return data[r * cols() + c]; }

    void validate() const;  // dims product == data size, rank 1 or 2
    bool all_finite() const;
};

// Ordered, name-unique collection of tensors. Entries are kept sorted by
// name so iteration order (and therefore any float accumulation order) is
// deterministic.
class ParamTree {
public:
    using Entry = std::pair<std::string, TensorF>;

    ParamTree() = default;

    void insert(std::string name, TensorF t);
    bool has(const std::string& name) const;
    const TensorF& get(const std::string& name) const;
    TensorF& get_mut(const std::string& name);
    const TensorF* find(const std::string& name) const;
    TensorF* find_mut(const std::string& name);

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries_mut() { return entries_; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    // Total number of scalar parameters.
    uint64_t param_count() const;

    // Order-stable 64-bit content hash over names, dims and raw f64 bits.
    uint64_t digest64() const;

    bool all_finite() const;

    // Subset of entries whose names satisfy the predicate.
    template <typename Pred>
    ParamTree filter(Pred pred) const {
        ParamTree out;
        for (const auto& [name, t] : entries_) {
            if (pred(name)) out.insert(name, t);
        }
        return out;
    }

private:
    std::vector<Entry> entries_;  // sorted by name
};

// Same names and dims, in order.
bool congruent(const ParamTree& a, const ParamTree& b);
void require_congruent(const ParamTree& a, const ParamTree& b, const char* op);

// out = a + scale * b (congruence required).
ParamTree tree_axpy(const ParamTree& a, const ParamTree& b, double scale);
ParamTree tree_scale(const ParamTree& a, double scale);
ParamTree tree_sub(const ParamTree& a, const ParamTree& b);
void tree_accumulate(ParamTree& acc, const ParamTree& delta, double scale);
void tree_fill_zero(ParamTree& t);

double tree_inf_norm(const ParamTree& a);
double tree_sq_norm(const ParamTree& a);

}  // namespace fedtune
