#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "fedtune/adapters.hpp"
#include "fedtune/data.hpp"
#include "fedtune/model.hpp"

namespace fedtune {

// Evaluation task over a held-out multi-domain corpus; sub-scores are
// reported per domain and aggregated by unweighted mean.
struct EvalTask {
    const Corpus* test = nullptr;
    std::vector<uint32_t> domains;  // included domains (default: all)
};

EvalTask make_eval_task(const Corpus& test_corpus);

struct EvalReportRecord {
    std::map<uint32_t, double> per_subtask;  // per-domain perplexity
    double aggregate = 0.0;                  // unweighted mean perplexity
    double eval_score = 0.0;                 // -mean cross-entropy (higher = better)
};

// 1 - C(m-c, k)/C(m, k); the unbiased at-least-one-success estimator.
double pass_at_k(int m, int c, int k);

// Per-domain perplexity exp(mean next-token cross-entropy); lower is better.
EvalReportRecord eval_perplexity(const MicroLM& model, const AdapterState* adapters,
                                 const EvalTask& task);

struct GenerationEvalConfig {
    uint32_t n_prompts = 32;
    uint32_t prompt_len = 16;
    uint32_t samples_per_prompt = 5;  // m
    double threshold = -3.2;          // per-token log-likelihood pass bar
};

struct GenerationEvalResult {
    double pass_at_1 = 0.0;
    std::vector<int> correct_per_prompt;  // c per prompt
    uint32_t samples_per_prompt = 0;      // m
};

// Greedy decoding with seeded tie-breaks; a continuation passes when its
// mean per-token bigram log-likelihood under the prompt's true domain matrix
// clears the threshold.
GenerationEvalResult eval_constrained_generation(const MicroLM& model,
                                                 const AdapterState* adapters,
                                                 const EvalTask& task,
                                                 const GenerationEvalConfig& cfg);

// Affine map to [0, 1]: min -> 0, max -> 1. AnalysisError when all equal.
std::vector<double> normalize_scores(const std::vector<double>& values);

}  // namespace fedtune
