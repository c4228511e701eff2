#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fedtune/adapters.hpp"
#include "fedtune/data.hpp"
#include "fedtune/ledger.hpp"
#include "fedtune/model.hpp"

namespace fedtune {

enum class HookPoint { OnFitStart, OnBatchStart, OnBackwardEnd, OnStepEnd, OnFitEnd };

const char* hook_point_name(HookPoint p);

struct TrainerConfig {
    uint32_t local_steps = 30;
    uint32_t batch_size = 1;
    double lr = 3e-3;
    uint32_t grad_accum = 1;
    bool half_precision = false;

    void validate() const;
};

// Mutable state visible to hooks during one local fit. `params` is the
// trainable tree being optimized; a hook may rewrite `grad` or veto the
// pending optimizer step via `do_step`.
struct TrainContext {
    ParamTree* params = nullptr;
    ParamTree grad;
    double micro_loss = 0.0;
    uint32_t micro_index = 0;
    uint32_t step_index = 0;
    bool do_step = true;
    double lr = 0.0;
    const TrainerConfig* cfg = nullptr;
    CostLedger* ledger = nullptr;
    // gradient accumulation scratch
    ParamTree accum;
    uint32_t accum_count = 0;
};

using Hook = std::function<void(HookPoint, TrainContext&)>;
using HookList = std::vector<Hook>;

// Averages gradients of k consecutive micro-batches into one optimizer step.
Hook hook_grad_accum(uint32_t k);

// Rounds the trainable parameters through binary16 after every step.
Hook hook_half_precision();

// Seeded batch of `batch_size` samples drawn with replacement from `indices`.
TokenBatch sample_batch(const Corpus& corpus, const std::vector<size_t>& indices,
                        uint32_t batch_size, uint64_t seed);

uint64_t batch_seed(uint64_t course_seed, uint32_t client_id, uint32_t round,
                    uint32_t step);
uint64_t dropout_seed(uint64_t course_seed, uint32_t client_id, uint32_t round,
                      uint32_t step);

struct LocalUpdateResult {
    AdapterState adapter;
    double train_loss_mean = 0.0;
    CostLedger ledger_delta;
    uint32_t optimizer_steps = 0;
};

// One round of local fitting: cfg.local_steps seeded micro-batches, hooks
// fired at every point, only trainable parameters change.
LocalUpdateResult local_update(const MicroLM& model, const AdapterState& adapter,
                               const Corpus& corpus, const std::vector<size_t>& train_idx,
                               const TrainerConfig& cfg, uint64_t course_seed,
                               uint32_t client_id, uint32_t round,
                               const HookList& extra_hooks = {});

// Full-parameter fitting of the base itself (adapter-free); used to give the
// base model its general ability before any federated course.
MicroLM pretrain_base(const MicroLM& model, const Corpus& corpus, uint32_t steps,
                      double lr, uint32_t batch_size, uint64_t seed);

// Mean forward loss over the given sample indices (evaluation mode).
double mean_loss(const MicroLM& model, const AdapterState* adapter,
                 const Corpus& corpus, const std::vector<size_t>& indices,
                 uint32_t max_sequences = 0);

}  // namespace fedtune
