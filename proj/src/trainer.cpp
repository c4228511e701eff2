#include "fedtune/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "fedtune/rng.hpp"

namespace fedtune {

namespace {

constexpr uint64_t kTagBatch = 0x31;
constexpr uint64_t kTagDropout = 0x32;
constexpr uint64_t kTagPretrain = 0x33;

void fire(const HookList& hooks, HookPoint p, TrainContext& ctx) {
    for (const Hook& h : hooks) h(p, ctx);
}

// Shared fit loop over an arbitrary trainable tree. `sync` writes ctx.params
// back into whatever forward reads from before each forward pass.
template <typename SyncFn, typename ForwardBackwardFn>
double fit_loop(TrainContext& ctx, const TrainerConfig& cfg, const HookList& hooks,
                SyncFn sync, ForwardBackwardFn fwd_bwd) {
    fire(hooks, HookPoint::OnFitStart, ctx);
    double loss_sum = 0.0;
    for (uint32_t micro = 0; micro < cfg.local_steps; ++micro) {
        ctx.micro_index = micro;
        fire(hooks, HookPoint::OnBatchStart, ctx);
        sync();
        ctx.do_step = true;
        ctx.micro_loss = fwd_bwd(micro, ctx.grad);
        loss_sum += ctx.micro_loss;
        fire(hooks, HookPoint::OnBackwardEnd, ctx);
        if (ctx.do_step) {
            *ctx.params = sgd_step(*ctx.params, ctx.grad, ctx.lr);
            ctx.step_index++;
            fire(hooks, HookPoint::OnStepEnd, ctx);
        }
    }
    sync();
    fire(hooks, HookPoint::OnFitEnd, ctx);
    return loss_sum / static_cast<double>(cfg.local_steps);
}

}  // namespace

const char* hook_point_name(HookPoint p) {
    switch (p) {
        case HookPoint::OnFitStart: return "on_fit_start";
        case HookPoint::OnBatchStart: return "on_batch_start";
        case HookPoint::OnBackwardEnd: return "on_backward_end";
        case HookPoint::OnStepEnd: return "on_step_end";
        case HookPoint::OnFitEnd: return "on_fit_end";
    }
    return "?";
}

void TrainerConfig::validate() const {
    if (local_steps < 1) throw ConfigError("trainer: local_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
    if (lr < 0.0) throw ConfigError("trainer: lr must be non-negative");
    if (grad_accum < 1) throw ConfigError("trainer: grad_accum must be >= 1");
    if (grad_accum > local_steps) {
        throw ConfigError("trainer: grad_accum exceeds local_steps");
    }
    if (local_steps % grad_accum != 0) {
        throw ConfigError("trainer: grad_accum must divide local_steps");
    }
}

Hook hook_grad_accum(uint32_t k) {
    if (k < 1) throw ConfigError("grad_accum: k must be >= 1");
    return [k](HookPoint p, TrainContext& ctx) {
        if (p != HookPoint::OnBackwardEnd || k == 1) return;
        if (ctx.accum.empty()) {
            ctx.accum = ctx.grad;
            tree_fill_zero(ctx.accum);
        }
        tree_accumulate(ctx.accum, ctx.grad, 1.0);
        ctx.accum_count++;
        if (ctx.accum_count < k) {
            ctx.do_step = false;
            return;
        }
        ctx.grad = tree_scale(ctx.accum, 1.0 / static_cast<double>(k));
        tree_fill_zero(ctx.accum);
        ctx.accum_count = 0;
        ctx.do_step = true;
    };
}

Hook hook_half_precision() {
    return [](HookPoint p, TrainContext& ctx) {
        if (p != HookPoint::OnStepEnd) return;
        *ctx.params = round_half(*ctx.params, ctx.ledger);
    };
}

uint64_t batch_seed(uint64_t course_seed, uint32_t client_id, uint32_t round,
                    uint32_t step) {
    return derive_seed(course_seed, kTagBatch, client_id, round, step);
}

uint64_t dropout_seed(uint64_t course_seed, uint32_t client_id, uint32_t round,
                      uint32_t step) {
    return derive_seed(course_seed, kTagDropout, client_id, round, step);
}

TokenBatch sample_batch(const Corpus& corpus, const std::vector<size_t>& indices,
                        uint32_t batch_size, uint64_t seed) {
    if (indices.empty()) throw ConfigError("sample_batch: empty shard");
    Rng rng(seed);
    TokenBatch batch;
    batch.rows = batch_size;
    batch.cols = static_cast<uint32_t>(corpus.samples[indices[0]].tokens.size());
    batch.ids.reserve(static_cast<size_t>(batch.rows) * batch.cols);
    for (uint32_t b = 0; b < batch_size; ++b) {
        size_t idx = indices[rng.below(indices.size())];
        const auto& toks = corpus.samples[idx].tokens;
        if (toks.size() != batch.cols) {
            throw DataError("sample_batch: ragged sequence lengths");
        }
        batch.ids.insert(batch.ids.end(), toks.begin(), toks.end());
    }
    return batch;
}

LocalUpdateResult local_update(const MicroLM& model, const AdapterState& adapter,
                               const Corpus& corpus, const std::vector<size_t>& train_idx,
                               const TrainerConfig& cfg, uint64_t course_seed,
                               uint32_t client_id, uint32_t round,
                               const HookList& extra_hooks) {
    cfg.validate();
    if (train_idx.empty()) throw ConfigError("local_update: empty shard");

    LocalUpdateResult res;
    res.adapter = adapter;

    HookList hooks;
    if (cfg.grad_accum > 1) hooks.push_back(hook_grad_accum(cfg.grad_accum));
    if (cfg.half_precision) hooks.push_back(hook_half_precision());
    hooks.insert(hooks.end(), extra_hooks.begin(), extra_hooks.end());

    ParamTree params = res.adapter.params;
    TrainContext ctx;
    ctx.params = &params;
    ctx.lr = cfg.lr;
    ctx.cfg = &cfg;
    ctx.ledger = &res.ledger_delta;

    auto cols = static_cast<uint32_t>(corpus.samples[train_idx[0]].tokens.size());
    uint64_t step_flops =
        count_flops(model.config, &res.adapter.spec, cfg.batch_size, cols);

    res.train_loss_mean = fit_loop(
        ctx, cfg, hooks,
        [&] { res.adapter.params = params; },
        [&](uint32_t micro, ParamTree& grad) {
            TokenBatch batch = sample_batch(
                corpus, train_idx, cfg.batch_size,
                batch_seed(course_seed, client_id, round, micro));
            ForwardOptions opts;
            opts.training = true;
            opts.dropout_seed = dropout_seed(course_seed, client_id, round, micro);
            ForwardResult fw = forward_loss(model, &res.adapter, batch, opts);
            grad = backward(model, &res.adapter, fw.cache);
            res.ledger_delta.add_flops(step_flops);
            return fw.loss;
        });
    res.adapter.params = params;
    res.optimizer_steps = ctx.step_index;
    return res;
}

MicroLM pretrain_base(const MicroLM& model, const Corpus& corpus, uint32_t steps,
                      double lr, uint32_t batch_size, uint64_t seed) {
    if (steps == 0) return model;
    MicroLM out = model;
    std::vector<size_t> all(corpus.samples.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;

    TrainerConfig cfg;
    cfg.local_steps = steps;
    cfg.batch_size = batch_size;
    cfg.lr = lr;

    ParamTree params = out.base.filter(
        [&](const std::string& name) { return !out.is_frozen(name); });
    TrainContext ctx;
    ctx.params = &params;
    ctx.lr = lr;
    ctx.cfg = &cfg;

    auto sync = [&] {
        for (const auto& [name, t] : params.entries()) {
            out.base.get_mut(name) = t;
        }
    };
    fit_loop(ctx, cfg, {}, sync, [&](uint32_t micro, ParamTree& grad) {
        TokenBatch batch = sample_batch(corpus, all, batch_size,
                                        derive_seed(seed, kTagPretrain, micro));
        ForwardResult fw = forward_loss(out, nullptr, batch);
        grad = backward(out, nullptr, fw.cache);
        return fw.loss;
    });
    return out;
}

double mean_loss(const MicroLM& model, const AdapterState* adapter,
                 const Corpus& corpus, const std::vector<size_t>& indices,
                 uint32_t max_sequences) {
    if (indices.empty()) throw UsageError("mean_loss: no samples");
    size_t n = indices.size();
    if (max_sequences > 0) n = std::min<size_t>(n, max_sequences);

    double total = 0.0;
    size_t done = 0;
    constexpr size_t kChunk = 16;
    while (done < n) {
        size_t take = std::min(kChunk, n - done);
        TokenBatch batch;
        batch.rows = static_cast<uint32_t>(take);
        batch.cols =
            static_cast<uint32_t>(corpus.samples[indices[done]].tokens.size());
        for (size_t i = 0; i < take; ++i) {
            const auto& toks = corpus.samples[indices[done + i]].tokens;
            if (toks.size() != batch.cols) {
                throw DataError("mean_loss: ragged sequence lengths");
            }
            batch.ids.insert(batch.ids.end(), toks.begin(), toks.end());
        }
        total += forward_loss(model, adapter, batch).loss * static_cast<double>(take);
        done += take;
    }
    return total / static_cast<double>(n);
}

}  // namespace fedtune
