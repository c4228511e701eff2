#pragma once

#include <cstdint>

#include "fedtune/trainer.hpp"

namespace fedtune {

// Moreau-envelope personalization over adapters only: each client keeps a
// personal adapter theta_i and a local copy w_i of the global adapter; the
// base model is shared, never duplicated.
struct PflConfig {
    double lambda = 15.0;
    uint32_t inner_steps = 5;
    double inner_lr = 0.0;  // 0 = use trainer lr
    double outer_lr = 0.0;  // 0 = use trainer lr

    void validate() const;
};

struct PersonalState {
    ParamTree theta;  // personal adapter
    ParamTree w;      // local copy of the global adapter
};

struct PfedmeResult {
    PersonalState state;
    double train_loss_mean = 0.0;
    CostLedger ledger_delta;
};

// One local round: for each of cfg.local_steps outer iterations, K inner SGD
// steps on h(theta) = f_i(theta) + (lambda/2)||theta - w||^2 over one seeded
// batch, then w <- w - eta * lambda * (w - theta). The uploaded tree is w.
// Under half precision both theta and w are rounded after their updates.
PfedmeResult pfedme_local(const MicroLM& model, const AdapterState& adapter_layout,
                          const PersonalState& init, const Corpus& corpus,
                          const std::vector<size_t>& train_idx,
                          const TrainerConfig& trainer_cfg, const PflConfig& pfl_cfg,
                          uint64_t course_seed, uint32_t client_id, uint32_t round,
                          const HookList& extra_hooks = {});

// Single outer update of the local-global copy; exposed for the precision
// fixtures.
ParamTree pfedme_outer_update(const ParamTree& w, const ParamTree& theta,
                              double outer_lr, double lambda);

// Unweighted mean of per-client scores.
double eval_personalized(const std::vector<double>& per_client_scores);

}  // namespace fedtune
