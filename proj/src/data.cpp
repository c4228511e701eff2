#include "fedtune/data.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fedtune/rng.hpp"

namespace fedtune {

namespace {

using nlohmann::json;

constexpr uint64_t kTagMatrices = 0x11;
constexpr uint64_t kTagTrainSeq = 0x12;
constexpr uint64_t kTagEvalSeq = 0x13;
constexpr uint64_t kTagValSplit = 0x14;
constexpr double kRowConcentration = 0.3;

std::vector<TensorF> domain_matrices(uint64_t seed, uint32_t n_domains,
                                     uint32_t vocab_size) {
    std::vector<TensorF> mats;
    mats.reserve(n_domains);
    for (uint32_t d = 0; d < n_domains; ++d) {
        Rng rng(derive_seed(seed, kTagMatrices, d));
        TensorF t = TensorF::zeros({vocab_size, vocab_size});
        for (uint32_t r = 0; r < vocab_size; ++r) {
            auto row = rng.dirichlet(kRowConcentration, vocab_size);
            std::copy(row.begin(), row.end(),
                      t.data.begin() + static_cast<size_t>(r) * vocab_size);
        }
        mats.push_back(std::move(t));
    }
    return mats;
}

Corpus gen_with_stream(uint64_t seed, uint32_t n_domains, uint32_t samples_per_domain,
                       uint32_t seq_len, uint32_t vocab_size, uint64_t stream_tag) {
    if (n_domains == 0 || samples_per_domain == 0 || seq_len == 0) {
        throw ConfigError("gen_corpus: counts must be positive");
    }
    if (vocab_size < 8) throw ConfigError("gen_corpus: vocab_size must be >= 8");

    Corpus c;
    c.vocab_size = vocab_size;
    c.n_domains = n_domains;
    c.seed = seed;
    c.transition = domain_matrices(seed, n_domains, vocab_size);
    c.samples.reserve(static_cast<size_t>(n_domains) * samples_per_domain);
    for (uint32_t d = 0; d < n_domains; ++d) {
        const TensorF& t = c.transition[d];
        for (uint32_t s = 0; s < samples_per_domain; ++s) {
            Rng rng(derive_seed(seed, stream_tag, d, s));
            Sample sample;
            sample.domain = d;
            sample.tokens.resize(seq_len);
            sample.tokens[0] = static_cast<uint32_t>(rng.below(vocab_size));
            for (uint32_t i = 1; i < seq_len; ++i) {
                const double* row =
                    t.data.data() + static_cast<size_t>(sample.tokens[i - 1]) * vocab_size;
                double r = rng.uniform();
                double acc = 0.0;
                uint32_t next = vocab_size - 1;
                for (uint32_t v = 0; v < vocab_size; ++v) {
                    acc += row[v];
                    if (r < acc) {
                        next = v;
                        break;
                    }
                }
                sample.tokens[i] = next;
            }
            c.samples.push_back(std::move(sample));
        }
    }
    c.validate();
    return c;
}

}  // namespace

void Corpus::validate() const {
    if (samples.empty()) throw DataError("corpus: empty");
    for (const Sample& s : samples) {
        if (s.domain >= n_domains) throw DataError("corpus: domain out of range");
        for (uint32_t t : s.tokens) {
            if (t >= vocab_size) throw DataError("corpus: token out of range");
        }
    }
}

const char* split_method_name(SplitMethod m) {
    switch (m) {
        case SplitMethod::Uniform: return "uniform";
        case SplitMethod::Dirichlet: return "dirichlet";
        case SplitMethod::Meta: return "meta";
    }
    return "?";
}

SplitMethod split_method_from_name(const std::string& s) {
    if (s == "uniform") return SplitMethod::Uniform;
    if (s == "dirichlet") return SplitMethod::Dirichlet;
    if (s == "meta") return SplitMethod::Meta;
    throw ConfigError("unknown split method '" + s + "'");
}

std::vector<std::vector<size_t>> SplitPlan::shards() const {
    std::vector<std::vector<size_t>> out(n_clients);
    for (size_t i = 0; i < assignment.size(); ++i) {
        out[assignment[i]].push_back(i);
    }
    return out;
}

void SplitPlan::validate(size_t n_samples) const {
    if (n_clients == 0) throw ConfigError("split: need at least one client");
    if (assignment.size() != n_samples) {
        throw DataError("split: assignment does not cover the corpus");
    }
    std::vector<size_t> counts(n_clients, 0);
    for (uint32_t c : assignment) {
        if (c >= n_clients) throw DataError("split: client id out of range");
        counts[c]++;
    }
    for (size_t c = 0; c < n_clients; ++c) {
        if (counts[c] == 0) {
            throw ConfigError("split: client " + std::to_string(c) + " has no samples");
        }
    }
}

Corpus gen_corpus(uint64_t seed, uint32_t n_domains, uint32_t samples_per_domain,
                  uint32_t seq_len, uint32_t vocab_size) {
    return gen_with_stream(seed, n_domains, samples_per_domain, seq_len, vocab_size,
                           kTagTrainSeq);
}

Corpus gen_eval_corpus(uint64_t seed, uint32_t n_domains, uint32_t samples_per_domain,
                       uint32_t seq_len, uint32_t vocab_size) {
    return gen_with_stream(seed, n_domains, samples_per_domain, seq_len, vocab_size,
                           kTagEvalSeq);
}

SplitPlan split_uniform(const Corpus& corpus, uint32_t n_clients, uint64_t seed) {
    if (n_clients == 0) throw ConfigError("split: need at least one client");
    if (n_clients > corpus.samples.size()) {
        throw ConfigError("split: more clients than samples");
    }
    std::vector<size_t> order(corpus.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x21));
    rng.shuffle(order);

    SplitPlan plan;
    plan.n_clients = n_clients;
    plan.method = SplitMethod::Uniform;
    plan.seed = seed;
    plan.assignment.resize(corpus.samples.size());
    for (size_t pos = 0; pos < order.size(); ++pos) {
        plan.assignment[order[pos]] = static_cast<uint32_t>(pos % n_clients);
    }
    plan.validate(corpus.samples.size());
    return plan;
}

SplitPlan split_dirichlet(const Corpus& corpus, uint32_t n_clients, double alpha,
                          uint64_t seed) {
    if (n_clients == 0) throw ConfigError("split: need at least one client");
    if (alpha <= 0.0) throw ConfigError("split: alpha must be positive");
    if (n_clients > corpus.samples.size()) {
        throw ConfigError("split: more clients than samples");
    }

    SplitPlan plan;
    plan.n_clients = n_clients;
    plan.method = SplitMethod::Dirichlet;
    plan.alpha = alpha;
    plan.seed = seed;
    plan.assignment.resize(corpus.samples.size());

    for (uint32_t d = 0; d < corpus.n_domains; ++d) {
        Rng rng(derive_seed(seed, 0x22, d));
        auto p = rng.dirichlet(alpha, n_clients);
        for (size_t i = 0; i < corpus.samples.size(); ++i) {
            if (corpus.samples[i].domain != d) continue;
            plan.assignment[i] = static_cast<uint32_t>(rng.categorical(p));
        }
    }

    // Repair: multinomial dealing at small alpha can leave clients empty.
    // Move one sample at a time from the currently largest client.
    std::vector<std::vector<size_t>> shards = plan.shards();
    for (uint32_t c = 0; c < n_clients; ++c) {
        while (shards[c].empty()) {
            size_t largest = 0;
            for (size_t k = 1; k < n_clients; ++k) {
                if (shards[k].size() > shards[largest].size()) largest = k;
            }
            if (shards[largest].size() <= 1) {
                throw ConfigError("split: cannot repair empty client");
            }
            size_t moved = shards[largest].back();
            shards[largest].pop_back();
            shards[c].push_back(moved);
            plan.assignment[moved] = c;
        }
    }
    plan.validate(corpus.samples.size());
    return plan;
}

SplitPlan split_meta(const Corpus& corpus,
                     const std::optional<std::map<uint32_t, uint32_t>>& domain_to_client,
                     std::optional<uint32_t> n_clients) {
    uint32_t clients = n_clients.value_or(corpus.n_domains);
    SplitPlan plan;
    plan.n_clients = clients;
    plan.method = SplitMethod::Meta;
    plan.assignment.resize(corpus.samples.size());

    auto client_of = [&](uint32_t domain) -> uint32_t {
        if (!domain_to_client) return domain;
        auto it = domain_to_client->find(domain);
        if (it == domain_to_client->end()) {
            throw ConfigError("split: meta map does not cover domain " +
                              std::to_string(domain));
        }
        return it->second;
    };
    for (uint32_t d = 0; d < corpus.n_domains; ++d) {
        if (client_of(d) >= clients) {
            throw ConfigError("split: meta map sends domain " + std::to_string(d) +
                              " to an out-of-range client");
        }
    }
    for (size_t i = 0; i < corpus.samples.size(); ++i) {
        plan.assignment[i] = client_of(corpus.samples[i].domain);
    }
    plan.validate(corpus.samples.size());
    return plan;
}

ClientDataset client_dataset(const SplitPlan& plan, uint32_t client_index,
                             size_t n_samples) {
    if (client_index >= plan.n_clients) {
        throw UsageError("client_dataset: client index out of range");
    }
    std::vector<size_t> shard;
    for (size_t i = 0; i < plan.assignment.size() && i < n_samples; ++i) {
        if (plan.assignment[i] == client_index) shard.push_back(i);
    }
    if (shard.empty()) throw ConfigError("client_dataset: empty shard");

    Rng rng(derive_seed(plan.seed, kTagValSplit, client_index));
    rng.shuffle(shard);
    size_t n_val = shard.size() >= 2 ? std::max<size_t>(1, shard.size() / 10) : 0;

    ClientDataset ds;
    ds.train.assign(shard.begin(), shard.end() - static_cast<ptrdiff_t>(n_val));
    ds.val.assign(shard.end() - static_cast<ptrdiff_t>(n_val), shard.end());
    std::sort(ds.train.begin(), ds.train.end());
    std::sort(ds.val.begin(), ds.val.end());
    return ds;
}

void write_corpus_jsonl(const Corpus& corpus, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    for (const Sample& s : corpus.samples) {
        json j;
        j["d"] = s.domain;
        j["t"] = s.tokens;
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("write to '" + path + "' failed");
}

Corpus read_corpus_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    Corpus c;
    std::string line;
    uint32_t max_token = 0;
    uint32_t max_domain = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(std::string("corpus jsonl: ") + e.what());
        }
        if (!j.contains("d") || !j.contains("t")) {
            throw DataError("corpus jsonl: line missing 'd' or 't'");
        }
        Sample s;
        s.domain = j["d"].get<uint32_t>();
        s.tokens = j["t"].get<std::vector<uint32_t>>();
        if (s.tokens.empty()) throw DataError("corpus jsonl: empty token list");
        max_domain = std::max(max_domain, s.domain);
        for (uint32_t t : s.tokens) max_token = std::max(max_token, t);
        c.samples.push_back(std::move(s));
    }
    if (c.samples.empty()) throw DataError("corpus jsonl: no samples");
    c.n_domains = max_domain + 1;
    c.vocab_size = std::max(max_token + 1, 8u);
    return c;
}

void write_plan_jsonl(const SplitPlan& plan, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    auto shards = plan.shards();
    for (uint32_t c = 0; c < plan.n_clients; ++c) {
        json j;
        j["client"] = c;
        j["idx"] = shards[c];
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("write to '" + path + "' failed");
}

SplitPlan read_plan_jsonl(const std::string& path, size_t n_samples) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    SplitPlan plan;
    plan.assignment.assign(n_samples, 0);
    std::vector<bool> seen(n_samples, false);
    std::string line;
    uint32_t max_client = 0;
    size_t lines = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(std::string("plan jsonl: ") + e.what());
        }
        auto client = j.at("client").get<uint32_t>();
        max_client = std::max(max_client, client);
        for (auto idx : j.at("idx").get<std::vector<size_t>>()) {
            if (idx >= n_samples) throw DataError("plan jsonl: index out of range");
            if (seen[idx]) throw DataError("plan jsonl: duplicate sample index");
            seen[idx] = true;
            plan.assignment[idx] = client;
        }
        lines++;
    }
    if (lines == 0) throw DataError("plan jsonl: empty");
    for (bool b : seen) {
        if (!b) throw DataError("plan jsonl: not all samples assigned");
    }
    plan.n_clients = max_client + 1;
    plan.validate(n_samples);
    return plan;
}

}  // namespace fedtune
