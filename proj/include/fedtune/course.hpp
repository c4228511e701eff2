#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedtune/adapters.hpp"
#include "fedtune/codec.hpp"
#include "fedtune/data.hpp"
#include "fedtune/ledger.hpp"
#include "fedtune/model.hpp"
#include "fedtune/pfl.hpp"
#include "fedtune/trainer.hpp"
#include "fedtune/wire.hpp"

namespace fedtune {

enum class CourseMode { Simulated, Distributed };
enum class Algo { FedAvg, Pfedme };

struct DataConfig {
    uint64_t seed = 0;
    uint32_t n_domains = 9;
    uint32_t samples_per_domain = 300;
    uint32_t seq_len = 0;     // 0 = model seq_len
    uint32_t vocab_size = 0;  // 0 = model vocab
    SplitMethod split = SplitMethod::Meta;
    double alpha = 0.5;
    uint64_t split_seed = 0;
    std::string corpus_file;  // optional: load samples instead of generating
    std::string plan_file;    // optional: load plan instead of splitting
};

struct EvalConfig {
    uint32_t samples_per_domain = 24;  // evaluation corpus size
    uint32_t gen_prompts = 0;          // constrained-generation prompts (0 = off)
    double gen_threshold = -3.2;       // per-token log-likelihood pass threshold
    uint32_t gen_prompt_len = 16;
};

struct PretrainConfig {
    uint32_t steps = 0;
    double lr = 0.05;
    uint32_t batch_size = 8;
    uint32_t samples_per_domain = 50;
};

struct CourseConfig {
    uint64_t seed = 0;
    uint32_t rounds = 500;
    uint32_t n_clients = 0;  // 0 = derived from the split method
    CourseMode mode = CourseMode::Simulated;
    ModelConfig model;
    DataConfig data;
    AdapterSpec adapter;
    TrainerConfig trainer;
    CodecFlags codec;
    Algo algo = Algo::FedAvg;
    PflConfig pfl;
    uint32_t eval_every = 10;  // eval-task cadence in rounds (0 = final only)
    EvalConfig eval;
    PretrainConfig pretrain;
    bool weight_by_samples = true;
    double round_timeout_s = 60.0;
    double bandwidth_bps = 1e8;
    uint32_t val_sequences = 16;  // per-client validation subset cap

    uint32_t resolved_clients() const;
    void validate() const;
};

struct RoundRecord {
    uint32_t round = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::optional<double> eval_score;
    uint64_t bytes_up = 0;    // cumulative
    uint64_t bytes_down = 0;  // cumulative
    u128 flops = 0;           // cumulative
    double seconds = 0.0;     // cumulative modeled transmission time
};

// Parameter residency accounting for the round-robin simulated mode.
struct ResidencyReport {
    uint64_t client_base_params = 0;   // the one shared base (or emulator)
    uint64_t server_model_params = 0;  // server-side full model
    uint64_t adapter_params = 0;       // per-client trainable adapter
    uint64_t global_adapter_params = 0;
    uint64_t personal_params = 0;  // pfl extra per client (theta)
    uint32_t n_clients = 0;

    uint64_t client_side_params() const {
        return client_base_params +
               static_cast<uint64_t>(n_clients) * (adapter_params + personal_params) +
               global_adapter_params;
    }
};

struct CourseHistory {
    std::vector<RoundRecord> rounds;
    double final_val_loss = 0.0;
    double final_eval_score = 0.0;
    double final_mean_perplexity = 0.0;
    std::map<uint32_t, double> final_domain_perplexity;
    std::vector<double> personal_scores;  // pfedme only
    uint64_t final_adapter_digest = 0;
    ParamTree final_adapter;
    CostLedger ledger;
    ResidencyReport residency;
    bool completed = false;
    std::string failure;
};

// Resumable server-side state (exact: holds the f64 global adapter).
struct CourseState {
    uint32_t next_round = 0;
    ParamTree global_adapter;
    std::vector<ParamTree> personal_theta;  // pfedme, indexed by client-1
    CourseHistory history;
};

// --- unified interfaces ---

// Interface (1): model pre-processing. Identity for PEFT adapters; for FedOT
// returns the reduced-model adapter plus the frozen emulator.
struct PreprocessedModel {
    MicroLM broadcast_model;   // what clients receive (full base or emulator)
    AdapterState init_adapter; // identical initial adapter for all clients
};
PreprocessedModel preprocess_model(const MicroLM& model, const AdapterSpec& spec,
                                   uint64_t seed);

// Interface (3): sample-count-weighted elementwise mean, ascending client id.
ParamTree aggregate_fedavg(const std::map<uint32_t, ParamTree>& received,
                           const std::map<uint32_t, double>& weights);

// Barrier-safe aggregation state machine (transport-independent).
class ServerCore {
public:
    ServerCore(std::vector<uint32_t> expected_clients, uint32_t round = 0);

    uint32_t round() const { return round_; }
    // Returns true when every expected client has reported for this round.
    bool on_upload(uint32_t client, uint32_t round, ParamTree tree);
    bool ready() const;
    // Consumes the received trees and advances the round counter.
    std::map<uint32_t, ParamTree> take_round();

private:
    std::vector<uint32_t> expected_;
    uint32_t round_;
    std::map<uint32_t, ParamTree> received_;
};

// Round-monotonicity guard for the client side.
class ClientCore {
public:
    explicit ClientCore(uint32_t id) : id_(id) {}
    uint32_t id() const { return id_; }
    // Throws ProtocolError when a message would move the round backwards.
    void accept_round(uint32_t round);

private:
    uint32_t id_;
    uint32_t round_ = 0;
};

// --- course execution ---

CourseHistory run_course(const CourseConfig& config);
CourseHistory run_simulated(const CourseConfig& config);

// Resumable variants: continue `state` until `total_rounds` rounds have run.
CourseHistory run_simulated_resumable(const CourseConfig& config, CourseState& state,
                                      uint32_t total_rounds);

// Pure local training per client (no aggregation), with the same broadcast
// and publish roundtrips at round boundaries as a one-client course.
CourseHistory run_local_course(const CourseConfig& config, uint32_t client_id);

// Centralized baseline: one client holding the entire corpus.
CourseHistory run_global_course(const CourseConfig& config);

// Distributed mode over the wire protocol.
CourseHistory serve_distributed(const CourseConfig& config, const std::string& addr);
CourseHistory client_connect(const CourseConfig& config, const std::string& addr,
                             uint32_t client_id);

// Deterministic experiment inputs shared by both modes.
struct CoursePlanData {
    Corpus corpus;
    SplitPlan plan;
    std::vector<ClientDataset> clients;  // index = client id - 1
    Corpus eval_corpus;
    MicroLM server_model;  // pretrained base (full model)
};
CoursePlanData prepare_course_data(const CourseConfig& config);

// Base model construction (init + optional pretraining), memoized across
// courses that share a configuration.
MicroLM prepare_server_model(const CourseConfig& config, const Corpus& corpus);

}  // namespace fedtune
