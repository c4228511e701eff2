#include "fedtune/evals.hpp"

#include <algorithm>
#include <cmath>

#include "fedtune/rng.hpp"

namespace fedtune {

EvalTask make_eval_task(const Corpus& test_corpus) {
    EvalTask task;
    task.test = &test_corpus;
    task.domains.resize(test_corpus.n_domains);
    for (uint32_t d = 0; d < test_corpus.n_domains; ++d) task.domains[d] = d;
    return task;
}

double pass_at_k(int m, int c, int k) {
    if (c < 0 || c > m || k < 1 || k > m) {
        throw UsageError("pass_at_k: need 0 <= c <= m and 1 <= k <= m");
    }
    if (m - c < k) return 1.0;
    // C(m-c, k) / C(m, k) = prod_{i=0..k-1} (m-c-i) / (m-i)
    double ratio = 1.0;
    for (int i = 0; i < k; ++i) {
        ratio *= static_cast<double>(m - c - i) / static_cast<double>(m - i);
    }
    return 1.0 - ratio;
}

EvalReportRecord eval_perplexity(const MicroLM& model, const AdapterState* adapters,
                                 const EvalTask& task) {
    if (!task.test) throw UsageError("eval_perplexity: no test corpus");
    EvalReportRecord rec;
    constexpr size_t kChunk = 16;
    for (uint32_t d : task.domains) {
        double ce_sum = 0.0;
        size_t n = 0;
        std::vector<const Sample*> samples;
        for (const Sample& s : task.test->samples) {
            if (s.domain == d) samples.push_back(&s);
        }
        if (samples.empty()) {
            throw UsageError("eval_perplexity: no samples for domain " +
                             std::to_string(d));
        }
        for (size_t start = 0; start < samples.size(); start += kChunk) {
            size_t take = std::min(kChunk, samples.size() - start);
            TokenBatch batch;
            batch.rows = static_cast<uint32_t>(take);
            batch.cols = static_cast<uint32_t>(samples[start]->tokens.size());
            for (size_t i = 0; i < take; ++i) {
                const auto& toks = samples[start + i]->tokens;
                if (toks.size() != batch.cols) {
                    throw DataError("eval_perplexity: ragged sequence lengths");
                }
                batch.ids.insert(batch.ids.end(), toks.begin(), toks.end());
            }
            ce_sum += forward_loss(model, adapters, batch).loss *
                      static_cast<double>(take);
            n += take;
        }
        double ce = ce_sum / static_cast<double>(n);
        rec.per_subtask[d] = std::exp(ce);
    }
    double ppl_sum = 0.0;
    double ce_sum = 0.0;
    for (const auto& [d, ppl] : rec.per_subtask) {
        ppl_sum += ppl;
        ce_sum += std::log(ppl);
    }
    auto nd = static_cast<double>(rec.per_subtask.size());
    rec.aggregate = ppl_sum / nd;
    rec.eval_score = -ce_sum / nd;
    return rec;
}

namespace {

// Greedy next-token pick; ties in the probability row are broken by a seeded
// preference order so the m=5 decode variants are distinct deterministic
// functions.
uint32_t greedy_pick(const double* probs, uint32_t vocab, Rng& tie_rng) {
    double best = -1.0;
    std::vector<uint32_t> best_ids;
    for (uint32_t v = 0; v < vocab; ++v) {
        if (probs[v] > best) {
            best = probs[v];
            best_ids.assign(1, v);
        } else if (probs[v] == best) {
            best_ids.push_back(v);
        }
    }
    if (best_ids.size() == 1) return best_ids[0];
    return best_ids[tie_rng.below(best_ids.size())];
}

}  // namespace

GenerationEvalResult eval_constrained_generation(const MicroLM& model,
                                                 const AdapterState* adapters,
                                                 const EvalTask& task,
                                                 const GenerationEvalConfig& cfg) {
    if (!task.test) throw UsageError("eval_constrained_generation: no test corpus");
    if (task.test->transition.empty()) {
        throw UsageError("eval_constrained_generation: corpus has no domain matrices");
    }
    if (cfg.prompt_len < 1) throw ConfigError("generation: prompt_len must be >= 1");

    const Corpus& corpus = *task.test;
    const uint32_t vocab = corpus.vocab_size;
    uint32_t n_prompts = std::min<uint32_t>(
        cfg.n_prompts, static_cast<uint32_t>(corpus.samples.size()));
    if (n_prompts == 0) throw UsageError("eval_constrained_generation: no prompts");

    GenerationEvalResult result;
    result.samples_per_prompt = cfg.samples_per_prompt;
    double pass1_sum = 0.0;
    for (uint32_t p = 0; p < n_prompts; ++p) {
        const Sample& sample = corpus.samples[p];
        uint32_t plen = std::min<uint32_t>(cfg.prompt_len,
                                           static_cast<uint32_t>(sample.tokens.size()));
        uint32_t gen_len = model.config.seq_len > plen
                               ? model.config.seq_len - plen
                               : 0;
        if (gen_len == 0) throw ConfigError("generation: prompt fills the context");
        const TensorF& transition = corpus.transition[sample.domain];

        int correct = 0;
        for (uint32_t variant = 0; variant < cfg.samples_per_prompt; ++variant) {
            Rng tie_rng(derive_seed(corpus.seed, 0x51, p, variant));
            std::vector<uint32_t> tokens(sample.tokens.begin(),
                                         sample.tokens.begin() + plen);
            for (uint32_t g = 0; g < gen_len; ++g) {
                TokenBatch batch;
                batch.rows = 1;
                batch.cols = static_cast<uint32_t>(tokens.size());
                batch.ids = tokens;
                ForwardResult fw = forward_loss(model, adapters, batch);
                const SeqCache& sc = fw.cache.seqs[0];
                uint32_t tpos = fw.cache.vlen + batch.cols - 1;
                const double* row = sc.probs.data() + static_cast<size_t>(tpos) * vocab;
                tokens.push_back(greedy_pick(row, vocab, tie_rng));
            }
            // score the continuation under the prompt's true domain chain
            double ll = 0.0;
            for (size_t i = plen; i < tokens.size(); ++i) {
                double pr = transition.at(tokens[i - 1], tokens[i]);
                ll += std::log(std::max(pr, 1e-300));
            }
            ll /= static_cast<double>(tokens.size() - plen);
            if (ll > cfg.threshold) correct++;
        }
        result.correct_per_prompt.push_back(correct);
        pass1_sum += pass_at_k(static_cast<int>(cfg.samples_per_prompt), correct, 1);
    }
    result.pass_at_1 = pass1_sum / static_cast<double>(n_prompts);
    return result;
}

std::vector<double> normalize_scores(const std::vector<double>& values) {
    if (values.size() < 2) throw AnalysisError("normalize: need at least two values");
    auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) throw AnalysisError("normalize: all values equal");
    std::vector<double> out(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        out[i] = (values[i] - *lo) / (*hi - *lo);
    }
    return out;
}

}  // namespace fedtune
