#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedtune/tensor.hpp"

namespace fedtune {

struct Sample {
    std::vector<uint32_t> tokens;
    uint32_t domain = 0;
};

// Synthetic multi-domain corpus: each domain is a first-order Markov chain
// with its own row-stochastic bigram transition matrix (Dirichlet(0.3) rows).
struct Corpus {
    std::vector<Sample> samples;
    uint32_t vocab_size = 0;
    uint32_t n_domains = 0;
    uint64_t seed = 0;
    std::vector<TensorF> transition;  // per-domain vocab x vocab

    void validate() const;
};

enum class SplitMethod { Uniform, Dirichlet, Meta };

const char* split_method_name(SplitMethod m);
SplitMethod split_method_from_name(const std::string& s);

struct SplitPlan {
    uint32_t n_clients = 0;
    std::vector<uint32_t> assignment;  // client id per sample index
    SplitMethod method = SplitMethod::Uniform;
    double alpha = 0.0;  // Dirichlet only
    uint64_t seed = 0;

    std::vector<std::vector<size_t>> shards() const;  // per-client sample indices
    void validate(size_t n_samples) const;            // partition + min-size
};

// Deterministic in seed; domain matrices depend on (seed, n_domains,
// vocab_size) only, so train and evaluation corpora generated from the same
// seed share domains while drawing disjoint sequence streams.
Corpus gen_corpus(uint64_t seed, uint32_t n_domains, uint32_t samples_per_domain,
                  uint32_t seq_len, uint32_t vocab_size);

// Same domain matrices as gen_corpus(seed, ...), fresh sequences.
Corpus gen_eval_corpus(uint64_t seed, uint32_t n_domains, uint32_t samples_per_domain,
                       uint32_t seq_len, uint32_t vocab_size);

// Seeded shuffle then round-robin deal; client sizes differ by at most one.
SplitPlan split_uniform(const Corpus& corpus, uint32_t n_clients, uint64_t seed);

// Per-domain Dirichlet(alpha) proportions, multinomial dealing, then empty
// clients are repaired by stealing from the largest client.
SplitPlan split_dirichlet(const Corpus& corpus, uint32_t n_clients, double alpha,
                          uint64_t seed);

// Every sample goes to the client owning its domain. Without a map this is
// the identity over n_domains clients. n_clients defaults to n_domains and
// every client must end up non-empty.
SplitPlan split_meta(const Corpus& corpus,
                     const std::optional<std::map<uint32_t, uint32_t>>& domain_to_client =
                         std::nullopt,
                     std::optional<uint32_t> n_clients = std::nullopt);

// Client-side train/validation partition: a seeded 10% tail of the shard (at
// least one sample when the shard has two or more).
struct ClientDataset {
    std::vector<size_t> train;  // corpus sample indices
    std::vector<size_t> val;
};
ClientDataset client_dataset(const SplitPlan& plan, uint32_t client_index,
                             size_t n_samples);

// JSON Lines interchange: one {"d": domain, "t": [ids]} object per sample;
// plans as one {"client": k, "idx": [...]} object per client.
void write_corpus_jsonl(const Corpus& corpus, const std::string& path);
Corpus read_corpus_jsonl(const std::string& path);
void write_plan_jsonl(const SplitPlan& plan, const std::string& path);
SplitPlan read_plan_jsonl(const std::string& path, size_t n_samples);

}  // namespace fedtune
