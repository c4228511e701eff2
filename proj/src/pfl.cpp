#include "fedtune/pfl.hpp"

#include <numeric>

#include "fedtune/rng.hpp"

namespace fedtune {

void PflConfig::validate() const {
    if (lambda <= 0.0) throw ConfigError("pfl: lambda must be positive");
    if (inner_steps < 1) throw ConfigError("pfl: inner_steps must be >= 1");
    if (inner_lr < 0.0 || outer_lr < 0.0) {
        throw ConfigError("pfl: learning rates must be non-negative");
    }
}

ParamTree pfedme_outer_update(const ParamTree& w, const ParamTree& theta,
                              double outer_lr, double lambda) {
    ParamTree diff = tree_sub(w, theta);
    return tree_axpy(w, diff, -outer_lr * lambda);
}

PfedmeResult pfedme_local(const MicroLM& model, const AdapterState& adapter_layout,
                          const PersonalState& init, const Corpus& corpus,
                          const std::vector<size_t>& train_idx,
                          const TrainerConfig& trainer_cfg, const PflConfig& pfl_cfg,
                          uint64_t course_seed, uint32_t client_id, uint32_t round,
                          const HookList& extra_hooks) {
    trainer_cfg.validate();
    pfl_cfg.validate();
    if (trainer_cfg.grad_accum > 1) {
        throw ConfigError("pfl: gradient accumulation is not supported with pfedme");
    }
    if (train_idx.empty()) throw ConfigError("pfedme_local: empty shard");
    require_congruent(init.theta, init.w, "pfedme_local");

    double inner_lr = pfl_cfg.inner_lr > 0.0 ? pfl_cfg.inner_lr : trainer_cfg.lr;
    double outer_lr = pfl_cfg.outer_lr > 0.0 ? pfl_cfg.outer_lr : trainer_cfg.lr;

    PfedmeResult res;
    res.state = init;
    AdapterState work = adapter_layout;

    HookList hooks;
    if (trainer_cfg.half_precision) hooks.push_back(hook_half_precision());
    hooks.insert(hooks.end(), extra_hooks.begin(), extra_hooks.end());

    TrainContext ctx;
    ctx.params = &res.state.theta;
    ctx.lr = inner_lr;
    ctx.cfg = &trainer_cfg;
    ctx.ledger = &res.ledger_delta;

    auto cols = static_cast<uint32_t>(corpus.samples[train_idx[0]].tokens.size());
    uint64_t step_flops =
        count_flops(model.config, &work.spec, trainer_cfg.batch_size, cols);

    auto fire = [&](HookPoint p) {
        for (const Hook& h : hooks) h(p, ctx);
    };

    fire(HookPoint::OnFitStart);
    double loss_sum = 0.0;
    for (uint32_t outer = 0; outer < trainer_cfg.local_steps; ++outer) {
        ctx.micro_index = outer;
        fire(HookPoint::OnBatchStart);
        TokenBatch batch =
            sample_batch(corpus, train_idx, trainer_cfg.batch_size,
                         batch_seed(course_seed, client_id, round, outer));
        ForwardOptions opts;
        opts.training = true;
        opts.dropout_seed = dropout_seed(course_seed, client_id, round, outer);

        for (uint32_t inner = 0; inner < pfl_cfg.inner_steps; ++inner) {
            work.params = res.state.theta;
            ForwardResult fw = forward_loss(model, &work, batch, opts);
            if (inner == 0) loss_sum += fw.loss;
            ctx.grad = backward(model, &work, fw.cache);
            // proximal term: grad h = grad f + lambda (theta - w)
            ParamTree prox = tree_sub(res.state.theta, res.state.w);
            tree_accumulate(ctx.grad, prox, pfl_cfg.lambda);
            res.ledger_delta.add_flops(step_flops);
            ctx.micro_loss = fw.loss;
            ctx.do_step = true;
            fire(HookPoint::OnBackwardEnd);
            if (!ctx.do_step) continue;
            res.state.theta = sgd_step(res.state.theta, ctx.grad, inner_lr);
            ctx.step_index++;
            fire(HookPoint::OnStepEnd);  // half-precision hook rounds theta here
        }
        res.state.w = pfedme_outer_update(res.state.w, res.state.theta, outer_lr,
                                          pfl_cfg.lambda);
        if (trainer_cfg.half_precision) {
            res.state.w = round_half(res.state.w, &res.ledger_delta);
        }
    }
    fire(HookPoint::OnFitEnd);
    res.train_loss_mean = loss_sum / static_cast<double>(trainer_cfg.local_steps);
    return res;
}

double eval_personalized(const std::vector<double>& per_client_scores) {
    if (per_client_scores.empty()) {
        throw UsageError("eval_personalized: no client scores");
    }
    double sum = std::accumulate(per_client_scores.begin(), per_client_scores.end(), 0.0);
    return sum / static_cast<double>(per_client_scores.size());
}

}  // namespace fedtune
