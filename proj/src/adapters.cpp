#include "fedtune/adapters.hpp"

#include <algorithm>
#include <cmath>

#include "fedtune/rng.hpp"

namespace fedtune {

namespace {

bool is_lora_target_site(const std::string& name) {
    return name == "head" || name.find(".attn.w") != std::string::npos ||
           name.find(".mlp.w") != std::string::npos;
}

// Renames "blkNN." prefixed entries from one block index to another.
std::string renamed_block(const std::string& name, uint32_t from, uint32_t to) {
    std::string p = block_prefix(from);
    if (name.rfind(p, 0) != 0) return name;
    return block_prefix(to) + name.substr(p.size());
}

}  // namespace

const char* adapter_kind_name(AdapterKind k) {
    switch (k) {
        case AdapterKind::None: return "none";
        case AdapterKind::Lora: return "lora";
        case AdapterKind::Prompt: return "prompt";
        case AdapterKind::Ptuning: return "ptuning";
        case AdapterKind::Fedot: return "fedot";
    }
    return "?";
}

AdapterKind adapter_kind_from_name(const std::string& s) {
    if (s == "none") return AdapterKind::None;
    if (s == "lora") return AdapterKind::Lora;
    if (s == "prompt") return AdapterKind::Prompt;
    if (s == "ptuning") return AdapterKind::Ptuning;
    if (s == "fedot") return AdapterKind::Fedot;
    throw ConfigError("unknown adapter kind '" + s + "'");
}

void AdapterSpec::validate(const ModelConfig& config) const {
    switch (kind) {
        case AdapterKind::None:
            return;
        case AdapterKind::Lora:
            if (lora.rank < 1) throw ConfigError("lora: rank must be >= 1");
            if (lora.scaling <= 0.0) throw ConfigError("lora: scaling must be positive");
            if (lora.dropout < 0.0 || lora.dropout >= 1.0) {
                throw ConfigError("lora: dropout must be in [0, 1)");
            }
            return;
        case AdapterKind::Prompt:
            if (prompt.v_tokens < 1 || prompt.v_tokens >= config.seq_len) {
                throw ConfigError("prompt: v_tokens must be in [1, seq_len)");
            }
            return;
        case AdapterKind::Ptuning:
            if (ptuning.v_tokens < 1 || ptuning.v_tokens >= config.seq_len) {
                throw ConfigError("ptuning: v_tokens must be in [1, seq_len)");
            }
            if (ptuning.hidden < 1) throw ConfigError("ptuning: hidden must be >= 1");
            return;
        case AdapterKind::Fedot: {
            if (fedot.front_blocks < 1 || fedot.back_blocks < 1) {
                throw ConfigError("fedot: front/back block counts must be >= 1");
            }
            if (fedot.front_blocks + fedot.back_blocks >= config.n_blocks) {
                throw ConfigError("fedot: front + back must be < n_blocks");
            }
            if (fedot.drop_rate <= 0.0 || fedot.drop_rate >= 1.0) {
                throw ConfigError("fedot: drop_rate must be in (0, 1)");
            }
            return;
        }
    }
}

std::vector<std::string> lora_default_targets(const ModelConfig& config) {
    std::vector<std::string> t;
    for (uint32_t b = 0; b < config.n_blocks; ++b) {
        t.push_back(block_prefix(b) + ".attn.wq");
        t.push_back(block_prefix(b) + ".attn.wv");
    }
    return t;
}

AdapterState build_lora(const MicroLM& model, uint32_t rank, double scaling,
                        double dropout, const std::vector<std::string>& targets,
                        uint64_t seed) {
    AdapterState st;
    st.spec.kind = AdapterKind::Lora;
    st.spec.lora = LoraSpec{rank, scaling, dropout,
                            targets.empty() ? lora_default_targets(model.config) : targets};
    st.spec.validate(model.config);

    for (const std::string& target : st.spec.lora.targets) {
        const TensorF* w = model.base.find(target);
        if (!w) throw ConfigError("lora: unknown target '" + target + "'");
        if (w->rank() != 2) throw ConfigError("lora: target '" + target + "' is not rank-2");
        if (!is_lora_target_site(target)) {
            throw ConfigError("lora: target '" + target + "' is not a projection weight");
        }
        uint32_t out = w->dims[0];
        uint32_t in = w->dims[1];
        TensorF a = TensorF::zeros({rank, in});
        Rng rng(derive_seed(seed, fnv1a64(target)));
        double std_a = 1.0 / std::sqrt(static_cast<double>(rank));
        for (double& v : a.data) v = rng.normal(0.0, std_a);
        st.params.insert(target + ".lora_a", std::move(a));
        st.params.insert(target + ".lora_b", TensorF::zeros({out, rank}));
    }
    return st;
}

AdapterState build_prompt(const MicroLM& model, uint32_t v_tokens,
                          const std::vector<uint32_t>& init_text_tokens,
                          uint64_t seed) {
    AdapterState st;
    st.spec.kind = AdapterKind::Prompt;
    st.spec.prompt = PromptSpec{v_tokens, seed, init_text_tokens};
    st.spec.validate(model.config);

    uint32_t d = model.config.dim;
    TensorF p = TensorF::zeros({v_tokens, d});
    if (!init_text_tokens.empty()) {
        if (init_text_tokens.size() != v_tokens) {
            throw ConfigError("prompt: init token count must equal v_tokens");
        }
        const TensorF& embed = model.base.get("embed");
        for (uint32_t j = 0; j < v_tokens; ++j) {
            uint32_t id = init_text_tokens[j];
            if (id >= model.config.vocab_size) {
                throw DataError("prompt: init token id out of range");
            }
            std::copy_n(embed.data.data() + static_cast<size_t>(id) * d, d,
                        p.data.data() + static_cast<size_t>(j) * d);
        }
    } else {
        Rng rng(derive_seed(seed, fnv1a64("prompt.emb")));
        double std_w = 1.0 / std::sqrt(static_cast<double>(d));
        for (double& v : p.data) v = rng.normal(0.0, std_w);
    }
    st.params.insert("prompt.emb", std::move(p));
    return st;
}

AdapterState build_ptuning(const MicroLM& model, uint32_t v_tokens,
                           uint32_t hidden, uint64_t seed) {
    AdapterState st;
    st.spec.kind = AdapterKind::Ptuning;
    st.spec.ptuning = PtuningSpec{v_tokens, hidden, seed};
    st.spec.validate(model.config);

    uint32_t d = model.config.dim;
    auto norm_tensor = [&](const std::string& name, uint32_t rows, uint32_t cols,
                           double stddev) {
        TensorF t = TensorF::zeros({rows, cols});
        Rng rng(derive_seed(seed, fnv1a64(name)));
        for (double& v : t.data) v = rng.normal(0.0, stddev);
        return t;
    };
    double std_w = 1.0 / std::sqrt(static_cast<double>(d));
    st.params.insert("ptuning.seed", norm_tensor("ptuning.seed", v_tokens, d, std_w));
    st.params.insert("ptuning.mlp.w1", norm_tensor("ptuning.mlp.w1", hidden, d, std_w));
    st.params.insert("ptuning.mlp.b1", TensorF::zeros({hidden}));
    st.params.insert("ptuning.mlp.w2",
                     norm_tensor("ptuning.mlp.w2", d, hidden,
                                 1.0 / std::sqrt(static_cast<double>(hidden))));
    st.params.insert("ptuning.mlp.b2", TensorF::zeros({d}));
    return st;
}

std::vector<uint32_t> fedot_kept_indices(uint32_t middle, double drop_rate) {
    if (middle == 0) throw ConfigError("fedot: no middle blocks to compress");
    auto kept = static_cast<int64_t>(
        std::llround((1.0 - drop_rate) * static_cast<double>(middle)));
    if (kept <= 0) throw ConfigError("fedot: drop rate leaves no emulator blocks");
    if (kept > middle) kept = middle;
    std::vector<uint32_t> idx(static_cast<size_t>(kept));
    for (int64_t j = 0; j < kept; ++j) {
        idx[static_cast<size_t>(j)] =
            static_cast<uint32_t>((j * static_cast<int64_t>(middle)) / kept);
    }
    return idx;
}

ModelConfig fedot_reduced_config(const ModelConfig& full, const FedotSpec& spec) {
    uint32_t middle = full.n_blocks - spec.front_blocks - spec.back_blocks;
    auto kept = fedot_kept_indices(middle, spec.drop_rate);
    ModelConfig reduced = full;
    reduced.n_blocks = spec.front_blocks + static_cast<uint32_t>(kept.size()) +
                       spec.back_blocks;
    return reduced;
}

AdapterState build_fedot(const MicroLM& model, uint32_t front, uint32_t back,
                         double drop_rate, uint64_t seed) {
    (void)seed;  // adapter values copy the base; nothing is drawn
    AdapterState st;
    st.spec.kind = AdapterKind::Fedot;
    st.spec.fedot = FedotSpec{front, back, drop_rate};
    st.spec.validate(model.config);

    const uint32_t L = model.config.n_blocks;
    const uint32_t middle = L - front - back;
    auto kept = fedot_kept_indices(middle, drop_rate);
    const auto K = static_cast<uint32_t>(kept.size());

    // trainable adapter: embedding, head, final norm, front and back blocks
    st.params.insert("embed", model.base.get("embed"));
    st.params.insert("head", model.base.get("head"));
    st.params.insert("out.ln.g", model.base.get("out.ln.g"));
    st.params.insert("out.ln.b", model.base.get("out.ln.b"));
    auto copy_block = [&](uint32_t from, uint32_t to, ParamTree& dst) {
        std::string p = block_prefix(from);
        for (const auto& [name, t] : model.base.entries()) {
            if (name.rfind(p, 0) == 0) dst.insert(renamed_block(name, from, to), t);
        }
    };
    for (uint32_t b = 0; b < front; ++b) copy_block(b, b, st.params);
    for (uint32_t b = 0; b < back; ++b) {
        copy_block(L - back + b, front + K + b, st.params);
    }
    // frozen emulator: kept middle blocks renumbered to follow the front
    for (uint32_t j = 0; j < K; ++j) {
        copy_block(front + kept[j], front + j, st.emulator);
    }
    return st;
}

MicroLM fedot_client_model(const AdapterState& state, const ModelConfig& full) {
    if (state.spec.kind != AdapterKind::Fedot) {
        throw UsageError("fedot_client_model: adapter is not fedot");
    }
    MicroLM m;
    m.config = fedot_reduced_config(full, state.spec.fedot);
    m.base = state.emulator;
    for (const auto& [name, t] : m.base.entries()) m.frozen.push_back(name);
    std::sort(m.frozen.begin(), m.frozen.end());
    return m;
}

MicroLM plug_in(const MicroLM& model, const AdapterState& fedot_state) {
    if (fedot_state.spec.kind != AdapterKind::Fedot) {
        throw UsageError("plug_in: adapter is not fedot");
    }
    const FedotSpec& spec = fedot_state.spec.fedot;
    const uint32_t L = model.config.n_blocks;
    if (spec.front_blocks + spec.back_blocks >= L) {
        throw UsageError("plug_in: adapter does not match model geometry");
    }
    const uint32_t middle = L - spec.front_blocks - spec.back_blocks;
    auto kept = fedot_kept_indices(middle, spec.drop_rate);
    const auto K = static_cast<uint32_t>(kept.size());

    MicroLM out = model;
    auto plug = [&](const std::string& reduced_name, const std::string& full_name) {
        const TensorF* src = fedot_state.params.find(reduced_name);
        if (!src) throw UsageError("plug_in: adapter missing '" + reduced_name + "'");
        TensorF& dst = out.base.get_mut(full_name);
        if (src->dims != dst.dims) throw UsageError("plug_in: mismatched config");
        dst = *src;
    };
    plug("embed", "embed");
    plug("head", "head");
    plug("out.ln.g", "out.ln.g");
    plug("out.ln.b", "out.ln.b");
    const char* suffixes[] = {".ln1.g", ".ln1.b", ".attn.wq", ".attn.wk", ".attn.wv",
                              ".attn.wo", ".ln2.g", ".ln2.b", ".mlp.w1", ".mlp.w2"};
    for (uint32_t b = 0; b < spec.front_blocks; ++b) {
        for (const char* s : suffixes) plug(block_prefix(b) + s, block_prefix(b) + s);
    }
    for (uint32_t b = 0; b < spec.back_blocks; ++b) {
        std::string reduced = block_prefix(spec.front_blocks + K + b);
        std::string full = block_prefix(L - spec.back_blocks + b);
        for (const char* s : suffixes) plug(reduced + s, full + s);
    }
    return out;
}

AdapterState build_adapter(const MicroLM& model, const AdapterSpec& spec,
                           uint64_t seed) {
    switch (spec.kind) {
        case AdapterKind::Lora:
            return build_lora(model, spec.lora.rank, spec.lora.scaling,
                              spec.lora.dropout, spec.lora.targets, seed);
        case AdapterKind::Prompt:
            return build_prompt(model, spec.prompt.v_tokens,
                                spec.prompt.init_text_tokens, seed);
        case AdapterKind::Ptuning:
            return build_ptuning(model, spec.ptuning.v_tokens, spec.ptuning.hidden,
                                 seed);
        case AdapterKind::Fedot:
            return build_fedot(model, spec.fedot.front_blocks, spec.fedot.back_blocks,
                               spec.fedot.drop_rate, seed);
        case AdapterKind::None:
            throw ConfigError("build_adapter: adapter kind 'none' has no parameters");
    }
    throw ConfigError("build_adapter: bad kind");
}

uint64_t adapter_bytes(const AdapterState& state, uint32_t dtype_bits) {
    if (dtype_bits != 8 && dtype_bits != 16 && dtype_bits != 32) {
        throw UsageError("adapter_bytes: dtype_bits must be 8, 16 or 32");
    }
    uint64_t total = 4;  // entry count
    for (const auto& [name, t] : state.params.entries()) {
        total += 2 + name.size();           // name_len + name
        total += 1 + 4 * t.dims.size();     // rank + dims
        total += 1;                         // dtype tag
        if (dtype_bits == 8) total += 4;    // per-tensor scale
        total += t.size() * (dtype_bits / 8);
    }
    return total;
}

const std::vector<ReferenceMessageSize>& reference_message_sizes() {
    // Adapter payload sizes reported for a 7B-parameter base model; kept for
    // report context only.
    static const std::vector<ReferenceMessageSize> table = {
        {"lora", 21.40},
        {"ptuning", 256.48},
        {"prompt", 0.17},
    };
    return table;
}

}  // namespace fedtune
