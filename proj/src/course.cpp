#include "fedtune/course.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "fedtune/evals.hpp"
#include "fedtune/rng.hpp"

namespace fedtune {

namespace {

using nlohmann::json;

constexpr uint64_t kTagAdapterInit = 0x41;
constexpr uint64_t kTagPretrainData = 0x42;

std::vector<uint8_t> json_payload(const json& j) {
    std::string s = j.dump();
    return {s.begin(), s.end()};
}

json parse_payload(const std::vector<uint8_t>& payload) {
    try {
        return json::parse(payload.begin(), payload.end());
    } catch (const json::exception& e) {
        throw ProtocolError(std::string("bad metrics payload: ") + e.what());
    }
}

struct ExchangedTree {
    ParamTree tree;       // what the receiver reconstructs
    uint64_t bytes = 0;   // payload size on the wire
};

ExchangedTree exchange(const ParamTree& tree, CodecFlags flags) {
    std::vector<uint8_t> bytes = encode_tree(tree, flags);
    ExchangedTree out;
    out.bytes = bytes.size();
    out.tree = decode_tree(bytes, flags);
    return out;
}

// The client-facing model paired with an adapter layout: all base names
// frozen (clients only ever train adapter parameters).
MicroLM freeze_all(MicroLM m) {
    m.frozen.clear();
    for (const auto& [name, t] : m.base.entries()) m.frozen.push_back(name);
    std::sort(m.frozen.begin(), m.frozen.end());
    return m;
}

AdapterState with_params(const AdapterState& layout, ParamTree params) {
    AdapterState st = layout;
    st.params = std::move(params);
    return st;
}

struct ClientRoundMetrics {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

// Client-side work for one round; shared verbatim by both modes.
struct ClientWorker {
    const CourseConfig* cfg;
    const Corpus* corpus;
    ClientDataset dataset;
    MicroLM model;  // broadcast-decoded base (or emulator), frozen
    AdapterState layout;
    uint32_t client_id = 0;
    std::optional<PersonalState> personal;  // pfedme

    // Returns the uploaded tree.
    ParamTree train_round(const ParamTree& distributed, uint32_t round,
                          ClientRoundMetrics& metrics, CostLedger& ledger) {
        AdapterState current = with_params(layout, distributed);
        metrics.val_loss = mean_loss(model, &current, *corpus, dataset.val,
                                     cfg->val_sequences);
        if (cfg->algo == Algo::FedAvg) {
            LocalUpdateResult res =
                local_update(model, current, *corpus, dataset.train, cfg->trainer,
                             cfg->seed, client_id, round);
            metrics.train_loss = res.train_loss_mean;
            ledger.merge(res.ledger_delta);
            return res.adapter.params;
        }
        if (!personal) personal = PersonalState{distributed, distributed};
        personal->w = distributed;
        PfedmeResult res =
            pfedme_local(model, layout, *personal, *corpus, dataset.train,
                         cfg->trainer, cfg->pfl, cfg->seed, client_id, round);
        personal = res.state;
        metrics.train_loss = res.train_loss_mean;
        ledger.merge(res.ledger_delta);
        return personal->w;
    }

    double personal_eval(const Corpus& eval_corpus) const {
        AdapterState st = with_params(layout, personal ? personal->theta : layout.params);
        EvalTask task = make_eval_task(eval_corpus);
        return eval_perplexity(model, &st, task).eval_score;
    }
};

double weighted_mean(const std::map<uint32_t, double>& values,
                     const std::map<uint32_t, double>& weights) {
    double num = 0.0;
    double den = 0.0;
    for (const auto& [k, v] : values) {
        double w = weights.at(k);
        num += w * v;
        den += w;
    }
    return num / den;
}

}  // namespace

// ----------------------------- config plumbing -----------------------------

uint32_t CourseConfig::resolved_clients() const {
    if (n_clients > 0) return n_clients;
    if (data.split == SplitMethod::Meta) return data.n_domains;
    throw ConfigError("course: n_clients must be set for this split method");
}

void CourseConfig::validate() const {
    if (rounds < 1) throw ConfigError("course: rounds must be >= 1");
    model.validate();
    trainer.validate();
    adapter.validate(model);
    if (adapter.kind == AdapterKind::None) {
        throw ConfigError("course: an adapter kind is required");
    }
    if (algo == Algo::Pfedme) pfl.validate();
    if (resolved_clients() < 1) throw ConfigError("course: need at least one client");
    if (bandwidth_bps <= 0.0) throw ConfigError("course: bandwidth must be positive");
    if (round_timeout_s <= 0.0) throw ConfigError("course: timeout must be positive");
}

CoursePlanData prepare_course_data(const CourseConfig& config) {
    config.validate();
    CoursePlanData data;
    uint32_t seq_len = config.data.seq_len ? config.data.seq_len : config.model.seq_len;
    uint32_t vocab = config.data.vocab_size ? config.data.vocab_size
                                            : config.model.vocab_size;
    if (!config.data.corpus_file.empty()) {
        data.corpus = read_corpus_jsonl(config.data.corpus_file);
        data.corpus.seed = config.data.seed;
        data.corpus.transition =
            gen_corpus(config.data.seed, data.corpus.n_domains, 1, 2,
                       data.corpus.vocab_size)
                .transition;
    } else {
        data.corpus = gen_corpus(config.data.seed, config.data.n_domains,
                                 config.data.samples_per_domain, seq_len, vocab);
    }

    uint32_t n = config.resolved_clients();
    if (!config.data.plan_file.empty()) {
        data.plan = read_plan_jsonl(config.data.plan_file, data.corpus.samples.size());
        if (data.plan.n_clients != n) {
            throw ConfigError("course: plan file client count mismatch");
        }
        data.plan.seed = config.data.split_seed;
    } else {
        switch (config.data.split) {
            case SplitMethod::Uniform:
                data.plan = split_uniform(data.corpus, n, config.data.split_seed);
                break;
            case SplitMethod::Dirichlet:
                data.plan = split_dirichlet(data.corpus, n, config.data.alpha,
                                            config.data.split_seed);
                break;
            case SplitMethod::Meta:
                data.plan = split_meta(data.corpus, std::nullopt, n);
                break;
        }
    }
    data.clients.reserve(n);
    for (uint32_t k = 0; k < n; ++k) {
        data.clients.push_back(client_dataset(data.plan, k, data.corpus.samples.size()));
    }

    data.eval_corpus =
        gen_eval_corpus(config.data.seed, data.corpus.n_domains,
                        config.eval.samples_per_domain, seq_len,
                        data.corpus.vocab_size);

    data.server_model = prepare_server_model(config, data.corpus);
    return data;
}

// Pretraining is deterministic in its inputs and shared by every course of
// an experiment sweep; memoize it.
MicroLM prepare_server_model(const CourseConfig& config, const Corpus& corpus) {
    MicroLM base = init_model(config.model);
    if (config.pretrain.steps == 0) return base;

    const ModelConfig& mc = config.model;
    uint64_t key = derive_seed(
        mc.seed,
        derive_seed(mc.vocab_size, mc.dim, mc.n_blocks, mc.n_heads, mc.seq_len),
        derive_seed(config.data.seed, corpus.n_domains, corpus.vocab_size),
        derive_seed(config.pretrain.steps, config.pretrain.batch_size,
                    config.pretrain.samples_per_domain,
                    static_cast<uint64_t>(config.pretrain.lr * 1e9)));
    static std::mutex cache_mu;
    static std::map<uint64_t, MicroLM> cache;
    {
        std::lock_guard<std::mutex> lock(cache_mu);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
    }
    uint32_t seq_len = config.data.seq_len ? config.data.seq_len : config.model.seq_len;
    Corpus pre = gen_eval_corpus(derive_seed(config.data.seed, kTagPretrainData),
                                 corpus.n_domains, config.pretrain.samples_per_domain,
                                 seq_len, corpus.vocab_size);
    MicroLM trained = pretrain_base(base, pre, config.pretrain.steps,
                                    config.pretrain.lr, config.pretrain.batch_size,
                                    config.model.seed);
    std::lock_guard<std::mutex> lock(cache_mu);
    cache.emplace(key, trained);
    return trained;
}

PreprocessedModel preprocess_model(const MicroLM& model, const AdapterSpec& spec,
                                   uint64_t seed) {
    PreprocessedModel out;
    out.init_adapter = build_adapter(model, spec, seed);
    if (spec.kind == AdapterKind::Fedot) {
        out.broadcast_model = fedot_client_model(out.init_adapter, model.config);
    } else {
        out.broadcast_model = model;  // accessible model: identity
    }
    return out;
}

ParamTree aggregate_fedavg(const std::map<uint32_t, ParamTree>& received,
                           const std::map<uint32_t, double>& weights) {
    if (received.empty()) throw ProtocolError("aggregate: nothing received");
    double total = 0.0;
    for (const auto& [k, tree] : received) {
        auto it = weights.find(k);
        if (it == weights.end() || it->second <= 0.0) {
            throw ProtocolError("aggregate: missing or non-positive weight");
        }
        total += it->second;
    }
    ParamTree out = received.begin()->second;
    tree_fill_zero(out);
    for (const auto& [k, tree] : received) {  // std::map: ascending client id
        if (!congruent(out, tree)) throw ProtocolError("aggregate: incongruent trees");
        tree_accumulate(out, tree, weights.at(k) / total);
    }
    if (!out.all_finite()) throw ProtocolError("aggregate: non-finite result");
    return out;
}

ServerCore::ServerCore(std::vector<uint32_t> expected_clients, uint32_t round)
    : expected_(std::move(expected_clients)), round_(round) {
    std::sort(expected_.begin(), expected_.end());
    if (expected_.empty()) throw ConfigError("server: no expected clients");
}

bool ServerCore::on_upload(uint32_t client, uint32_t round, ParamTree tree) {
    if (!std::binary_search(expected_.begin(), expected_.end(), client)) {
        throw ProtocolError("server: upload from unknown client " +
                            std::to_string(client));
    }
    if (round != round_) {
        throw ProtocolError("server: upload for round " + std::to_string(round) +
                            " while in round " + std::to_string(round_));
    }
    if (received_.count(client)) {
        throw ProtocolError("server: duplicate upload from client " +
                            std::to_string(client));
    }
    received_.emplace(client, std::move(tree));
    return ready();
}

bool ServerCore::ready() const { return received_.size() == expected_.size(); }

std::map<uint32_t, ParamTree> ServerCore::take_round() {
    if (!ready()) {
        throw ProtocolError("server: aggregation attempted before all uploads");
    }
    round_++;
    return std::exchange(received_, {});
}

void ClientCore::accept_round(uint32_t round) {
    if (round < round_) {
        throw ProtocolError("client: round moved backwards");
    }
    round_ = round;
}

// ----------------------------- simulated mode ------------------------------

namespace {

struct EvalContext {
    const CourseConfig* cfg;
    const CoursePlanData* data;
    const AdapterState* layout;

    double score_global(const ParamTree& global) const {
        EvalTask task = make_eval_task(data->eval_corpus);
        if (cfg->adapter.kind == AdapterKind::Fedot) {
            MicroLM plugged = plug_in(data->server_model, with_params(*layout, global));
            return eval_perplexity(plugged, nullptr, task).eval_score;
        }
        AdapterState st = with_params(*layout, global);
        return eval_perplexity(data->server_model, &st, task).eval_score;
    }

    EvalReportRecord final_record(const ParamTree& global) const {
        EvalTask task = make_eval_task(data->eval_corpus);
        if (cfg->adapter.kind == AdapterKind::Fedot) {
            MicroLM plugged = plug_in(data->server_model, with_params(*layout, global));
            return eval_perplexity(plugged, nullptr, task);
        }
        AdapterState st = with_params(*layout, global);
        return eval_perplexity(data->server_model, &st, task);
    }
};

void finalize_history(CourseHistory& h, const ParamTree& global,
                      const EvalContext& ectx,
                      const std::map<uint32_t, double>& final_val,
                      const std::map<uint32_t, double>& weights) {
    EvalReportRecord rec = ectx.final_record(global);
    h.final_eval_score = rec.eval_score;
    h.final_mean_perplexity = rec.aggregate;
    h.final_domain_perplexity = rec.per_subtask;
    h.final_val_loss = weighted_mean(final_val, weights);
    h.final_adapter = global;
    h.final_adapter_digest = global.digest64();
    h.completed = true;
}

}  // namespace

CourseHistory run_simulated_resumable(const CourseConfig& config, CourseState& state,
                                      uint32_t total_rounds) {
    CoursePlanData data = prepare_course_data(config);
    const uint32_t n = config.resolved_clients();
    PreprocessedModel pre = preprocess_model(
        data.server_model, config.adapter, derive_seed(config.seed, kTagAdapterInit));

    CourseHistory& history = state.history;
    CostLedger& ledger = history.ledger;

    // interface (2): every client receives the identical broadcast bytes
    std::vector<uint8_t> base_bytes = encode_tree(pre.broadcast_model.base, config.codec);
    MicroLM client_model = freeze_all(pre.broadcast_model);
    client_model.base = decode_tree(base_bytes, config.codec);
    if (state.next_round == 0) {
        state.global_adapter = pre.init_adapter.params;
        ledger.add_bytes_down(static_cast<uint64_t>(n) * base_bytes.size());
        ledger.add_seconds(static_cast<double>(n) *
                           estimate_transmission_time(
                               static_cast<double>(base_bytes.size()),
                               config.bandwidth_bps, 1));
    }

    std::vector<ClientWorker> workers;
    workers.reserve(n);
    for (uint32_t k = 1; k <= n; ++k) {
        ClientWorker w;
        w.cfg = &config;
        w.corpus = &data.corpus;
        w.dataset = data.clients[k - 1];
        w.model = client_model;  // round-robin: one shared instance semantically
        w.layout = pre.init_adapter;
        w.client_id = k;
        if (config.algo == Algo::Pfedme && state.next_round > 0 &&
            state.personal_theta.size() == n) {
            w.personal = PersonalState{state.personal_theta[k - 1], state.global_adapter};
        }
        workers.push_back(std::move(w));
    }

    std::map<uint32_t, double> weights;
    for (uint32_t k = 1; k <= n; ++k) {
        weights[k] = config.weight_by_samples
                         ? static_cast<double>(data.clients[k - 1].train.size())
                         : 1.0;
    }

    EvalContext ectx{&config, &data, &pre.init_adapter};
    std::vector<uint32_t> expected;
    for (uint32_t k = 1; k <= n; ++k) expected.push_back(k);
    ServerCore server(expected, state.next_round);

    std::map<uint32_t, double> val_losses;
    for (uint32_t r = state.next_round; r < total_rounds; ++r) {
        // interface (4)/(2): distribute the current global adapter
        ExchangedTree dist = exchange(state.global_adapter, config.codec);
        ledger.add_bytes_down(static_cast<uint64_t>(n) * dist.bytes);
        ledger.add_seconds(static_cast<double>(n) *
                           estimate_transmission_time(static_cast<double>(dist.bytes),
                                                      config.bandwidth_bps, 1));

        std::map<uint32_t, double> train_losses;
        val_losses.clear();
        for (uint32_t k = 1; k <= n; ++k) {
            ClientRoundMetrics metrics;
            ParamTree upload = workers[k - 1].train_round(dist.tree, r, metrics, ledger);
            ExchangedTree up = exchange(upload, config.codec);
            ledger.add_bytes_up(up.bytes);
            ledger.add_seconds(estimate_transmission_time(
                static_cast<double>(up.bytes), config.bandwidth_bps, 1));
            server.on_upload(k, r, std::move(up.tree));
            train_losses[k] = metrics.train_loss;
            val_losses[k] = metrics.val_loss;
        }
        // interface (3)
        state.global_adapter = aggregate_fedavg(server.take_round(), weights);

        RoundRecord rec;
        rec.round = r;
        rec.train_loss = weighted_mean(train_losses, weights);
        rec.val_loss = weighted_mean(val_losses, weights);
        bool eval_now = config.eval_every > 0 && ((r + 1) % config.eval_every == 0);
        if (eval_now) rec.eval_score = ectx.score_global(state.global_adapter);
        rec.bytes_up = ledger.bytes_up;
        rec.bytes_down = ledger.bytes_down;
        rec.flops = ledger.flops;
        rec.seconds = ledger.wall_seconds;
        history.rounds.push_back(rec);
        state.next_round = r + 1;
        if (config.algo == Algo::Pfedme) {
            state.personal_theta.clear();
            for (uint32_t k = 1; k <= n; ++k) {
                state.personal_theta.push_back(workers[k - 1].personal->theta);
            }
        }
    }

    // final validation of the aggregated adapter on every client's shard
    std::map<uint32_t, double> final_val;
    {
        ExchangedTree dist = exchange(state.global_adapter, config.codec);
        for (uint32_t k = 1; k <= n; ++k) {
            AdapterState st = with_params(pre.init_adapter, dist.tree);
            final_val[k] = mean_loss(client_model, &st, data.corpus,
                                     data.clients[k - 1].val, config.val_sequences);
        }
    }
    finalize_history(history, state.global_adapter, ectx, final_val, weights);
    if (config.algo == Algo::Pfedme) {
        history.personal_scores.clear();
        for (uint32_t k = 1; k <= n; ++k) {
            history.personal_scores.push_back(
                workers[k - 1].personal_eval(data.eval_corpus));
        }
        history.final_eval_score = eval_personalized(history.personal_scores);
    }

    ResidencyReport res;
    res.client_base_params = client_model.base.param_count();
    res.server_model_params = data.server_model.base.param_count();
    res.adapter_params = pre.init_adapter.params.param_count();
    res.global_adapter_params = res.adapter_params;
    res.personal_params = config.algo == Algo::Pfedme ? res.adapter_params : 0;
    res.n_clients = n;
    history.residency = res;
    ledger.param_bytes_resident = res.client_side_params() * sizeof(double);
    return history;
}

CourseHistory run_simulated(const CourseConfig& config) {
    CourseState state;
    return run_simulated_resumable(config, state, config.rounds);
}

CourseHistory run_course(const CourseConfig& config) {
    config.validate();
    if (config.mode == CourseMode::Distributed) {
        throw ConfigError(
            "run_course: distributed mode needs serve_distributed/client_connect");
    }
    return run_simulated(config);
}

CourseHistory run_local_course(const CourseConfig& config, uint32_t client_id) {
    CoursePlanData data = prepare_course_data(config);
    const uint32_t n = config.resolved_clients();
    if (client_id < 1 || client_id > n) {
        throw UsageError("run_local_course: bad client id");
    }
    PreprocessedModel pre = preprocess_model(
        data.server_model, config.adapter, derive_seed(config.seed, kTagAdapterInit));

    CourseHistory history;
    CostLedger& ledger = history.ledger;
    std::vector<uint8_t> base_bytes = encode_tree(pre.broadcast_model.base, config.codec);
    MicroLM client_model = freeze_all(pre.broadcast_model);
    client_model.base = decode_tree(base_bytes, config.codec);

    ClientWorker worker;
    worker.cfg = &config;
    worker.corpus = &data.corpus;
    worker.dataset = data.clients[client_id - 1];
    worker.model = client_model;
    worker.layout = pre.init_adapter;
    worker.client_id = client_id;

    ParamTree current = exchange(pre.init_adapter.params, config.codec).tree;
    for (uint32_t r = 0; r < config.rounds; ++r) {
        ClientRoundMetrics metrics;
        ParamTree trained = worker.train_round(current, r, metrics, ledger);
        current = exchange(trained, config.codec).tree;  // publish checkpoint
        RoundRecord rec;
        rec.round = r;
        rec.train_loss = metrics.train_loss;
        rec.val_loss = metrics.val_loss;
        rec.flops = ledger.flops;
        history.rounds.push_back(rec);
    }

    EvalContext ectx{&config, &data, &pre.init_adapter};
    std::map<uint32_t, double> final_val;
    std::map<uint32_t, double> weights;
    {
        AdapterState st = with_params(pre.init_adapter, current);
        final_val[client_id] = mean_loss(client_model, &st, data.corpus,
                                         worker.dataset.val, config.val_sequences);
        weights[client_id] = 1.0;
    }
    finalize_history(history, current, ectx, final_val, weights);
    return history;
}

CourseHistory run_global_course(const CourseConfig& config) {
    CourseConfig global = config;
    global.n_clients = 1;
    global.data.split = SplitMethod::Uniform;
    global.algo = Algo::FedAvg;
    return run_simulated(global);
}

// ---------------------------- distributed mode -----------------------------

namespace {

struct Inbound {
    uint32_t client;
    Message msg;
};

// One reader thread per connection feeding a serial event loop.
class MessagePump {
public:
    void start(uint32_t client, Socket& sock, double timeout) {
        threads_.emplace_back([this, client, &sock, timeout] {
            try {
                for (;;) {
                    Message m = sock.recv_message(timeout);
                    bool finish = m.kind == MsgKind::Finish;
                    push(Inbound{client, std::move(m)});
                    if (finish) return;
                }
            } catch (const std::exception& e) {
                Message err;
                err.kind = MsgKind::Finish;
                err.round = 0xffffffff;
                err.payload = json_payload(json{{"error", e.what()}});
                push(Inbound{client, std::move(err)});
            }
        });
    }

    std::optional<Inbound> pop(double timeout_seconds) {
        std::unique_lock<std::mutex> lock(mu_);
        if (!cv_.wait_for(lock, std::chrono::duration<double>(timeout_seconds),
                          [this] { return !queue_.empty(); })) {
            return std::nullopt;
        }
        Inbound m = std::move(queue_.front());
        queue_.pop_front();
        return m;
    }

    ~MessagePump() {
        for (auto& t : threads_) {
            if (t.joinable()) t.join();
        }
    }

private:
    void push(Inbound m) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            queue_.push_back(std::move(m));
        }
        cv_.notify_one();
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Inbound> queue_;
    std::vector<std::thread> threads_;
};

}  // namespace

CourseHistory serve_distributed(const CourseConfig& config, const std::string& addr) {
    CoursePlanData data = prepare_course_data(config);
    const uint32_t n = config.resolved_clients();
    PreprocessedModel pre = preprocess_model(
        data.server_model, config.adapter, derive_seed(config.seed, kTagAdapterInit));
    std::vector<uint8_t> base_bytes = encode_tree(pre.broadcast_model.base, config.codec);
    MicroLM client_model = freeze_all(pre.broadcast_model);
    client_model.base = decode_tree(base_bytes, config.codec);

    CourseHistory history;
    CostLedger& ledger = history.ledger;
    ParamTree global = pre.init_adapter.params;

    Listener listener(addr);
    std::map<uint32_t, Socket> socks;
    std::map<uint32_t, double> weights;
    try {
        // join phase: first frame from each client is an EvalReport carrying
        // its id and training sample count
        while (socks.size() < n) {
            Socket s = listener.accept(config.round_timeout_s);
            Message join = s.recv_message(config.round_timeout_s);
            if (join.kind != MsgKind::EvalReport || join.round != 0) {
                continue;  // handshake rejection: drop the connection
            }
            uint32_t id = join.sender;
            if (id < 1 || id > n || socks.count(id)) {
                continue;  // server-reserved id 0, out of range, or duplicate
            }
            json j = parse_payload(join.payload);
            double samples = j.value("samples", 0.0);
            if (samples <= 0.0) continue;
            weights[id] = config.weight_by_samples ? samples : 1.0;
            socks.emplace(id, std::move(s));
        }

        for (auto& [id, sock] : socks) {
            Message m;
            m.kind = MsgKind::ModelBroadcast;
            m.round = 0;
            m.sender = 0;
            m.flags = config.codec;
            m.payload = base_bytes;
            sock.send_message(m);
            ledger.add_bytes_down(base_bytes.size());
            ledger.add_seconds(estimate_transmission_time(
                static_cast<double>(base_bytes.size()), config.bandwidth_bps, 1));
        }

        MessagePump pump;
        for (auto& [id, sock] : socks) pump.start(id, sock, config.round_timeout_s);

        std::vector<uint32_t> expected;
        for (auto& [id, sock] : socks) expected.push_back(id);
        ServerCore server(expected, 0);

        for (uint32_t r = 0; r < config.rounds; ++r) {
            std::vector<uint8_t> dist_bytes = encode_tree(global, config.codec);
            for (auto& [id, sock] : socks) {
                Message m;
                m.kind = MsgKind::AdapterDistribute;
                m.round = r;
                m.sender = 0;
                m.flags = config.codec;
                m.payload = dist_bytes;
                sock.send_message(m);
                ledger.add_bytes_down(dist_bytes.size());
                ledger.add_seconds(estimate_transmission_time(
                    static_cast<double>(dist_bytes.size()), config.bandwidth_bps, 1));
            }

            std::map<uint32_t, double> train_losses;
            std::map<uint32_t, double> val_losses;
            while (!server.ready() || train_losses.size() < n) {
                auto inbound = pump.pop(config.round_timeout_s);
                if (!inbound) throw TransportError("round timed out waiting for uploads");
                Message& m = inbound->msg;
                if (m.kind == MsgKind::Finish) {
                    json j = parse_payload(m.payload);
                    throw TransportError("client " + std::to_string(inbound->client) +
                                         " dropped: " + j.value("error", "finished"));
                }
                if (m.kind == MsgKind::AdapterUpload) {
                    if (m.sender != inbound->client) {
                        throw ProtocolError("upload sender id mismatch");
                    }
                    ParamTree tree = decode_tree(m.payload, m.flags);
                    ledger.add_bytes_up(m.payload.size());
                    ledger.add_seconds(estimate_transmission_time(
                        static_cast<double>(m.payload.size()), config.bandwidth_bps, 1));
                    server.on_upload(m.sender, m.round, std::move(tree));
                } else if (m.kind == MsgKind::EvalReport) {
                    json j = parse_payload(m.payload);
                    train_losses[m.sender] = j.value("train_loss", 0.0);
                    val_losses[m.sender] = j.value("val_loss", 0.0);
                } else {
                    throw ProtocolError("unexpected message kind in round loop");
                }
            }
            global = aggregate_fedavg(server.take_round(), weights);

            RoundRecord rec;
            rec.round = r;
            rec.train_loss = weighted_mean(train_losses, weights);
            rec.val_loss = weighted_mean(val_losses, weights);
            EvalContext ectx{&config, &data, &pre.init_adapter};
            if (config.eval_every > 0 && ((r + 1) % config.eval_every == 0)) {
                rec.eval_score = ectx.score_global(global);
            }
            rec.bytes_up = ledger.bytes_up;
            rec.bytes_down = ledger.bytes_down;
            rec.flops = ledger.flops;
            rec.seconds = ledger.wall_seconds;
            history.rounds.push_back(rec);
        }

        // personalized evaluation sweep
        if (config.algo == Algo::Pfedme) {
            for (auto& [id, sock] : socks) {
                Message m;
                m.kind = MsgKind::EvalRequest;
                m.round = config.rounds - 1;
                m.sender = 0;
                sock.send_message(m);
            }
            std::map<uint32_t, double> scores;
            while (scores.size() < n) {
                auto inbound = pump.pop(config.round_timeout_s);
                if (!inbound) throw TransportError("timed out waiting for eval reports");
                if (inbound->msg.kind != MsgKind::EvalReport) {
                    throw ProtocolError("expected EvalReport");
                }
                json j = parse_payload(inbound->msg.payload);
                scores[inbound->msg.sender] = j.at("eval_score").get<double>();
            }
            history.personal_scores.clear();
            for (auto& [id, s] : scores) history.personal_scores.push_back(s);
        }

        for (auto& [id, sock] : socks) {
            Message fin;
            fin.kind = MsgKind::Finish;
            fin.round = config.rounds;
            fin.sender = 0;
            sock.send_message(fin);
        }

        EvalContext ectx{&config, &data, &pre.init_adapter};
        std::map<uint32_t, double> final_val;
        {
            ExchangedTree dist = exchange(global, config.codec);
            for (uint32_t k = 1; k <= n; ++k) {
                AdapterState st = with_params(pre.init_adapter, dist.tree);
                final_val[k] = mean_loss(client_model, &st, data.corpus,
                                         data.clients[k - 1].val, config.val_sequences);
            }
        }
        finalize_history(history, global, ectx, final_val, weights);
        if (config.algo == Algo::Pfedme && !history.personal_scores.empty()) {
            history.final_eval_score = eval_personalized(history.personal_scores);
        }
    } catch (const std::exception& e) {
        history.completed = false;
        history.failure = e.what();
    }
    return history;
}

CourseHistory client_connect(const CourseConfig& config, const std::string& addr,
                             uint32_t client_id) {
    const uint32_t n = config.resolved_clients();
    if (client_id < 1 || client_id > n) {
        throw ConfigError("client id must be in [1, n_clients]");
    }
    CoursePlanData data = prepare_course_data(config);

    CourseHistory history;
    try {
        Socket sock = dial(addr, config.round_timeout_s);
        ClientCore core(client_id);
        ClientDataset dataset = data.clients[client_id - 1];

        Message join;
        join.kind = MsgKind::EvalReport;
        join.round = 0;
        join.sender = client_id;
        join.payload = json_payload(
            json{{"samples", static_cast<double>(dataset.train.size())}});
        sock.send_message(join);

        Message broadcast = sock.recv_message(config.round_timeout_s);
        if (broadcast.kind != MsgKind::ModelBroadcast) {
            throw ProtocolError("expected ModelBroadcast after join");
        }
        ModelConfig client_cfg =
            config.adapter.kind == AdapterKind::Fedot
                ? fedot_reduced_config(config.model, config.adapter.fedot)
                : config.model;
        MicroLM client_model;
        client_model.config = client_cfg;
        client_model.base = decode_tree(broadcast.payload, broadcast.flags);
        client_model = freeze_all(std::move(client_model));

        ClientWorker worker;
        worker.cfg = &config;
        worker.corpus = &data.corpus;
        worker.dataset = dataset;
        worker.model = client_model;
        // Adapter layout: spec only; values arrive with the first distribute.
        worker.layout.spec = config.adapter;
        worker.client_id = client_id;

        for (;;) {
            Message m = sock.recv_message(config.round_timeout_s);
            if (m.kind == MsgKind::Finish) {
                history.completed = true;
                break;
            }
            if (m.kind == MsgKind::EvalRequest) {
                double score = worker.personal_eval(data.eval_corpus);
                Message rep;
                rep.kind = MsgKind::EvalReport;
                rep.round = m.round;
                rep.sender = client_id;
                rep.payload = json_payload(json{{"eval_score", score}});
                sock.send_message(rep);
                continue;
            }
            if (m.kind != MsgKind::AdapterDistribute) {
                throw ProtocolError("unexpected message kind " +
                                    std::string(msg_kind_name(m.kind)));
            }
            core.accept_round(m.round);
            ParamTree distributed = decode_tree(m.payload, m.flags);

            ClientRoundMetrics metrics;
            ParamTree upload =
                worker.train_round(distributed, m.round, metrics, history.ledger);

            Message up;
            up.kind = MsgKind::AdapterUpload;
            up.round = m.round;
            up.sender = client_id;
            up.flags = config.codec;
            up.payload = encode_tree(upload, config.codec);
            sock.send_message(up);

            Message rep;
            rep.kind = MsgKind::EvalReport;
            rep.round = m.round;
            rep.sender = client_id;
            rep.payload = json_payload(json{{"train_loss", metrics.train_loss},
                                            {"val_loss", metrics.val_loss}});
            sock.send_message(rep);

            RoundRecord rec;
            rec.round = m.round;
            rec.train_loss = metrics.train_loss;
            rec.val_loss = metrics.val_loss;
            history.rounds.push_back(rec);
        }
    } catch (const std::exception& e) {
        history.completed = false;
        history.failure = e.what();
    }
    return history;
}

}  // namespace fedtune
