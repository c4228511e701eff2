#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedtune/ledger.hpp"
#include "fedtune/tensor.hpp"

namespace fedtune {

struct AdapterState;
struct AdapterSpec;

// Micro language model geometry. The MLP hidden width is fixed at
// kMlpRatio * dim and is not independently configurable.
inline constexpr uint32_t kMlpRatio = 2;
inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    uint32_t vocab_size = 0;
    uint32_t dim = 0;
    uint32_t n_blocks = 0;
    uint32_t n_heads = 0;
    uint32_t seq_len = 0;
    uint64_t seed = 0;

    uint32_t head_dim() const { return dim / n_heads; }
    uint32_t mlp_hidden() const { return kMlpRatio * dim; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Decoder-only transformer: token embedding, pre-norm blocks
// (attention + MLP), final layer norm, untied output head. No positional
// embedding; the synthetic tasks are order-1 Markov so causal attention
// carries enough positional signal.
//
// `base` normally holds the full parameter set. A client operating on a
// layer-dropped emulator holds only the frozen middle blocks here, with the
// rest of the names shadowed by its adapter.
struct MicroLM {
    ModelConfig config;
    ParamTree base;
    std::vector<std::string> frozen;  // sorted names marked untrainable

    bool is_frozen(const std::string& name) const;
};

// Canonical parameter names for a given geometry, sorted.
std::vector<std::string> base_param_names(const ModelConfig& config);
std::string block_prefix(uint32_t block);

MicroLM init_model(const ModelConfig& config);

// Row-major token matrix; every row is one sequence.
struct TokenBatch {
    uint32_t rows = 0;
    uint32_t cols = 0;
    std::vector<uint32_t> ids;

    uint32_t at(uint32_t r, uint32_t c) const { return ids[r * cols + c]; }
};

struct ForwardOptions {
    bool training = false;
    uint64_t dropout_seed = 0;
};

// Activation record produced by forward_loss; sufficient for backward.
// Contents are an implementation detail of the forward/backward pair except
// for `probs`, which tests use to check softmax row sums.
struct LoraSiteCache {
    std::vector<double> mask;  // dropout keep-mask (empty when dropout off)
    std::vector<double> u;     // T' x r adapter bottleneck activations
};

struct BlockCache {
    std::vector<double> x1, mu1, rs1, a;
    std::vector<double> q, k, v;
    std::vector<double> probs;  // heads x T' x T'
    std::vector<double> ctx;
    std::vector<double> x2, mu2, rs2, m;
    std::vector<double> u1, g;
    std::map<std::string, LoraSiteCache> lora;
};

struct SeqCache {
    std::vector<uint32_t> tokens;
    std::vector<double> e;
    std::vector<BlockCache> blocks;
    std::vector<double> xf, muf, rsf, y;
    std::vector<double> probs;  // T' x vocab softmax rows
    LoraSiteCache head_lora;
};

struct ForwardCache {
    std::vector<SeqCache> seqs;
    uint32_t vlen = 0;
    uint32_t total_pred = 0;
    std::vector<double> virt;  // vlen x dim virtual embeddings
    std::vector<double> pt_t;  // vlen x hidden tanh activations (p-tuning)
    uint64_t state_digest = 0;
    bool training = false;
    uint64_t dropout_seed = 0;
};

struct ForwardResult {
    double loss = 0.0;
    ForwardCache cache;
};

ForwardResult forward_loss(const MicroLM& model, const AdapterState* adapters,
                           const TokenBatch& batch, const ForwardOptions& opts = {});

// Gradients over the trainable names only; frozen names are absent.
ParamTree backward(const MicroLM& model, const AdapterState* adapters,
                   const ForwardCache& cache);

// Central finite difference evaluated with the public forward only.
double finite_diff_grad(const MicroLM& model, const AdapterState* adapters,
                        const TokenBatch& batch, const std::string& name,
                        size_t index, double h, const ForwardOptions& opts = {});

// theta' = theta - lr * g; pure.
ParamTree sgd_step(const ParamTree& params, const ParamTree& grads, double lr);

// Every value rounded through IEEE binary16 (ties to even) and returned at
// full width. Out-of-range values clamp to +/-65504 and append a ledger
// warning.
ParamTree round_half(const ParamTree& params, CostLedger* ledger = nullptr);

uint64_t matmul_flops(uint64_t m, uint64_t n, uint64_t k);

// Analytic matmul flop count for one forward+backward pass (backward counted
// as twice forward) at the given batch shape.
uint64_t count_flops(const ModelConfig& config, const AdapterSpec* spec,
                     uint32_t batch_rows, uint32_t batch_cols);

// Names updated by training for this (model, adapter) pairing, sorted.
std::vector<std::string> trainable_names(const MicroLM& model,
                                         const AdapterState* adapters);

// Effective parameter lookup: adapter-owned names shadow the base.
const TensorF& resolved_param(const MicroLM& model, const AdapterState* adapters,
                              const std::string& name);

}  // namespace fedtune
