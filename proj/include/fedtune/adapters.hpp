#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedtune/model.hpp"
#include "fedtune/tensor.hpp"

namespace fedtune {

enum class AdapterKind { None, Lora, Prompt, Ptuning, Fedot };

const char* adapter_kind_name(AdapterKind k);
AdapterKind adapter_kind_from_name(const std::string& s);

struct LoraSpec {
    uint32_t rank = 8;
    double scaling = 16.0;
    double dropout = 0.0;
    std::vector<std::string> targets;  // empty = attention q/v of every block
};

struct PromptSpec {
    uint32_t v_tokens = 8;
    uint64_t init_seed = 0;
    std::vector<uint32_t> init_text_tokens;  // non-empty selects copy-init
};

struct PtuningSpec {
    uint32_t v_tokens = 8;
    uint32_t hidden = 32;
    uint64_t init_seed = 0;
};

struct FedotSpec {
    uint32_t front_blocks = 2;
    uint32_t back_blocks = 2;
    double drop_rate = 0.2;
};

struct AdapterSpec {
    AdapterKind kind = AdapterKind::None;
    LoraSpec lora;
    PromptSpec prompt;
    PtuningSpec ptuning;
    FedotSpec fedot;

    void validate(const ModelConfig& config) const;
};

// Trainable parameterization attached to a frozen base. For FedOT, `params`
// shadows base names of the reduced (layer-dropped) model and `emulator`
// holds the frozen middle blocks.
struct AdapterState {
    AdapterSpec spec;
    ParamTree params;
    ParamTree emulator;  // FedOT only

    bool has_emulator() const { return !emulator.empty(); }
};

// Expands the default target list (attention q and v of every block).
std::vector<std::string> lora_default_targets(const ModelConfig& config);

// Per target W (out x in): A (r x in) seeded normal N(0, 1/r), B (out x r)
// zero, so the initial effective delta is exactly zero.
AdapterState build_lora(const MicroLM& model, uint32_t rank, double scaling,
                        double dropout, const std::vector<std::string>& targets,
                        uint64_t seed);

// v_tokens x dim virtual embedding matrix prepended to every embedded input.
// init_text_tokens copies rows of the model embedding; otherwise seeded normal.
AdapterState build_prompt(const MicroLM& model, uint32_t v_tokens,
                          const std::vector<uint32_t>& init_text_tokens,
                          uint64_t seed);

// Seed matrix plus two-layer tanh MLP; virtual embeddings = MLP(seed rows).
AdapterState build_ptuning(const MicroLM& model, uint32_t v_tokens,
                           uint32_t hidden, uint64_t seed);

// Uniform layer dropping: keep K = round((1 - rho) * M) middle blocks at
// indices floor(j * M / K). Front/back blocks, embedding, head and the final
// layer norm become the trainable adapter; kept middle blocks are the frozen
// emulator, renumbered to a contiguous reduced model.
AdapterState build_fedot(const MicroLM& model, uint32_t front, uint32_t back,
                         double drop_rate, uint64_t seed);

// Kept middle indices for (M, rho); pure selection rule.
std::vector<uint32_t> fedot_kept_indices(uint32_t middle, double drop_rate);

// Reduced-model geometry for a FedOT spec over the given full config.
ModelConfig fedot_reduced_config(const ModelConfig& full, const FedotSpec& spec);

// The emulator-side client model: reduced config, emulator blocks as frozen
// base. Trainable names resolve through the adapter.
MicroLM fedot_client_model(const AdapterState& state, const ModelConfig& full);

// Original full model with its front/back/embedding/head replaced by the
// fine-tuned adapter values; middle blocks restored to the full weights.
MicroLM plug_in(const MicroLM& model, const AdapterState& fedot_state);

// Generic adapter construction from a spec (course entry point).
AdapterState build_adapter(const MicroLM& model, const AdapterSpec& spec,
                           uint64_t seed);

// Exact serialized payload size of state.params under the streaming format
// at the given element width.
uint64_t adapter_bytes(const AdapterState& state, uint32_t dtype_bits);

// Reference adapter message sizes measured on a 7B-parameter model, kept as
// a lookup table for documentation and reports; not recomputed here.
struct ReferenceMessageSize {
    const char* algorithm;
    double megabytes;
};
const std::vector<ReferenceMessageSize>& reference_message_sizes();

}  // namespace fedtune
