#include <doctest.h>

#include <cmath>

#include "fedtune/evals.hpp"
#include "fedtune/rng.hpp"
#include "fedtune/trainer.hpp"

using namespace fedtune;

namespace {

// Exhaustive enumeration oracle: over all C(m,k) index subsets of the m
// samples (c of them correct), the fraction containing at least one correct.
double pass_at_k_bruteforce(int m, int c, int k) {
    std::vector<int> idx(k);
    for (int i = 0; i < k; ++i) idx[i] = i;
    long total = 0, hit = 0;
    for (;;) {
        total++;
        bool any = false;
        for (int i : idx) any |= i < c;  // first c samples are the correct ones
        hit += any;
        int i = k - 1;
        while (i >= 0 && idx[i] == m - k + i) i--;
        if (i < 0) break;
        idx[i]++;
        for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

struct EvalFixture {
    ModelConfig cfg;
    MicroLM model;
    Corpus test;

    EvalFixture() {
        cfg.vocab_size = 16;
        cfg.dim = 16;
        cfg.n_heads = 2;
        cfg.n_blocks = 4;
        cfg.seq_len = 16;
        cfg.seed = 3;
        model = init_model(cfg);
        test = gen_eval_corpus(77, 3, 12, 16, 16);
    }
};

}  // namespace

TEST_CASE("pass_at_k formula against exhaustive enumeration") {
    for (int m = 1; m <= 8; ++m) {
        for (int c = 0; c <= m; ++c) {
            for (int k = 1; k <= m; ++k) {
                CAPTURE(m);
                CAPTURE(c);
                CAPTURE(k);
                CHECK(std::abs(pass_at_k(m, c, k) - pass_at_k_bruteforce(m, c, k)) <
                      1e-12);
            }
        }
    }
    // documented anchor values
    CHECK(pass_at_k(5, 5, 1) == doctest::Approx(1.0));
    CHECK(pass_at_k(5, 2, 1) == doctest::Approx(0.4));
    CHECK(pass_at_k(5, 2, 2) == doctest::Approx(0.7));

    CHECK_THROWS_AS(pass_at_k(5, 6, 1), UsageError);
    CHECK_THROWS_AS(pass_at_k(5, 2, 0), UsageError);
    CHECK_THROWS_AS(pass_at_k(5, 2, 6), UsageError);
    CHECK_THROWS_AS(pass_at_k(5, -1, 1), UsageError);
}

TEST_CASE("pass_at_k monotone in k and c") {
    for (int m = 2; m <= 8; ++m) {
        for (int c = 0; c <= m; ++c) {
            for (int k = 1; k < m; ++k) {
                CHECK(pass_at_k(m, c, k + 1) >= pass_at_k(m, c, k) - 1e-15);
            }
        }
        for (int k = 1; k <= m; ++k) {
            for (int c = 0; c < m; ++c) {
                CHECK(pass_at_k(m, c + 1, k) >= pass_at_k(m, c, k) - 1e-15);
            }
        }
    }
}

TEST_CASE("perplexity evaluation") {
    EvalFixture f;
    EvalTask task = make_eval_task(f.test);
    EvalReportRecord a = eval_perplexity(f.model, nullptr, task);
    EvalReportRecord b = eval_perplexity(f.model, nullptr, task);
    // deterministic
    CHECK(a.eval_score == b.eval_score);
    REQUIRE(a.per_subtask.size() == 3);
    // aggregate is the unweighted mean of subtask scores
    double mean = 0.0;
    for (const auto& [d, ppl] : a.per_subtask) mean += ppl;
    mean /= 3.0;
    CHECK(a.aggregate == doctest::Approx(mean));

    // single-domain task: aggregate equals that domain's score
    EvalTask single = task;
    single.domains = {1};
    EvalReportRecord s = eval_perplexity(f.model, nullptr, single);
    CHECK(s.aggregate == doctest::Approx(a.per_subtask.at(1)));

    // aggregate invariant under subtask permutation
    EvalTask permuted = task;
    permuted.domains = {2, 0, 1};
    CHECK(eval_perplexity(f.model, nullptr, permuted).aggregate ==
          doctest::Approx(a.aggregate));
}

TEST_CASE("training on a domain lowers its perplexity below an unseen domain") {
    EvalFixture f;
    // fine-tune the full model on domain 0 only
    Corpus train = gen_corpus(77, 3, 40, 16, 16);
    std::vector<size_t> d0;
    for (size_t i = 0; i < train.samples.size(); ++i) {
        if (train.samples[i].domain == 0) d0.push_back(i);
    }
    MicroLM tuned = pretrain_base(f.model, [&] {
        Corpus c = train;
        std::vector<Sample> keep;
        for (size_t i : d0) keep.push_back(train.samples[i]);
        c.samples = keep;
        return c;
    }(), 150, 0.08, 4, 5);

    EvalTask task = make_eval_task(f.test);
    EvalReportRecord rec = eval_perplexity(tuned, nullptr, task);
    // pre-training domain clearly beats the others
    CHECK(rec.per_subtask.at(0) < rec.per_subtask.at(1));
    CHECK(rec.per_subtask.at(0) < rec.per_subtask.at(2));
}

TEST_CASE("constrained generation thresholds are honored") {
    EvalFixture f;
    EvalTask task = make_eval_task(f.test);
    GenerationEvalConfig cfg;
    cfg.n_prompts = 8;
    cfg.prompt_len = 8;

    cfg.threshold = -1e300;  // everything passes
    GenerationEvalResult all = eval_constrained_generation(f.model, nullptr, task, cfg);
    CHECK(all.pass_at_1 == doctest::Approx(1.0));

    cfg.threshold = 1e300;  // nothing passes
    GenerationEvalResult none = eval_constrained_generation(f.model, nullptr, task, cfg);
    CHECK(none.pass_at_1 == doctest::Approx(0.0));

    // pass@1 equals an independent recount of mean(c/m)
    cfg.threshold = -2.6;
    GenerationEvalResult mid = eval_constrained_generation(f.model, nullptr, task, cfg);
    double recount = 0.0;
    for (int c : mid.correct_per_prompt) {
        recount += static_cast<double>(c) / mid.samples_per_prompt;
    }
    recount /= static_cast<double>(mid.correct_per_prompt.size());
    CHECK(mid.pass_at_1 == doctest::Approx(recount).epsilon(1e-12));

    // deterministic
    GenerationEvalResult mid2 = eval_constrained_generation(f.model, nullptr, task, cfg);
    CHECK(mid.pass_at_1 == mid2.pass_at_1);
}

TEST_CASE("normalize_scores") {
    std::vector<double> v = {2, 4, 6};
    auto n = normalize_scores(v);
    CHECK(n == std::vector<double>{0.0, 0.5, 1.0});

    std::vector<double> already = {0.0, 1.0};
    CHECK(normalize_scores(already) == already);

    // invariant under positive affine pre-transform
    std::vector<double> affine = {2 * 3.0 + 1, 4 * 3.0 + 1, 6 * 3.0 + 1};
    auto na = normalize_scores(affine);
    for (size_t i = 0; i < n.size(); ++i) CHECK(na[i] == doctest::Approx(n[i]));

    CHECK_THROWS_AS(normalize_scores({1.0, 1.0, 1.0}), AnalysisError);
    CHECK_THROWS_AS(normalize_scores({1.0}), AnalysisError);
}
