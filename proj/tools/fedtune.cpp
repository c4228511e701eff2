// fedtune: desk-scale federated adapter fine-tuning experiments.
//
// Subcommands: gen-data, split, run, hpo, report. Exit codes: 0 ok,
// 2 configuration error, 3 protocol/transport error, 4 data error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "fedtune/config.hpp"
#include "fedtune/course.hpp"
#include "fedtune/report.hpp"

namespace ft = fedtune;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitProtocol = 3;
constexpr int kExitData = 4;

int run_guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const ft::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ft::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ft::AnalysisError& e) {
        std::cerr << "analysis error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ft::ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const ft::TransportError& e) {
        std::cerr << "transport error: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const ft::DecodeError& e) {
        std::cerr << "decode error: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const ft::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ft::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

void print_course_summary(const ft::CourseConfig& cfg, const ft::CourseHistory& h) {
    if (!h.completed) {
        std::cout << "course failed: " << h.failure << "\n";
        return;
    }
    std::cout << "rounds: " << h.rounds.size() << "\n";
    if (!h.rounds.empty()) {
        std::cout << "final train loss: " << ft::format_double(h.rounds.back().train_loss)
                  << "\n";
    }
    std::cout << "final val loss: " << ft::format_double(h.final_val_loss) << "\n";
    std::cout << "final eval score: " << ft::format_double(h.final_eval_score) << "\n";
    std::cout << "mean test perplexity: " << ft::format_double(h.final_mean_perplexity)
              << "\n";
    std::cout << "bytes up/down: " << h.ledger.bytes_up << "/" << h.ledger.bytes_down
              << "\n";
    std::cout << "flops: " << ft::u128_to_string(h.ledger.flops) << "\n";
    std::cout << "modeled transmission seconds at "
              << ft::format_double(cfg.bandwidth_bps / 1e6) << " Mbit/s: "
              << ft::format_double(h.ledger.wall_seconds) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale federated adapter fine-tuning"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    uint64_t gen_seed = 0;
    uint32_t gen_domains = 9;
    uint32_t gen_per_domain = 300;
    uint32_t gen_seq_len = 32;
    uint32_t gen_vocab = 32;
    std::string gen_out = "corpus.jsonl";
    gen->add_option("--seed", gen_seed);
    gen->add_option("--domains", gen_domains);
    gen->add_option("--per-domain", gen_per_domain);
    gen->add_option("--seq-len", gen_seq_len);
    gen->add_option("--vocab", gen_vocab);
    gen->add_option("--out", gen_out);

    // split
    auto* split = app.add_subcommand("split", "partition a corpus into client shards");
    std::string split_method = "uniform";
    double split_alpha = 0.5;
    uint32_t split_clients = 0;
    uint64_t split_seed = 0;
    std::string split_in = "corpus.jsonl";
    std::string split_out = "plan.jsonl";
    split->add_option("--method", split_method)
        ->check(CLI::IsMember({"uniform", "dirichlet", "meta"}));
    split->add_option("--alpha", split_alpha);
    split->add_option("--clients", split_clients);
    split->add_option("--seed", split_seed);
    split->add_option("--in", split_in);
    split->add_option("--out", split_out);

    // run
    auto* run = app.add_subcommand("run", "run a federated fine-tuning course");
    std::string run_config;
    std::string run_mode;
    std::string run_addr = "127.0.0.1:7070";
    uint32_t run_client_id = 0;
    std::string run_history;
    std::string run_adapter_out;
    run->add_option("--config", run_config)->required();
    run->add_option("--mode", run_mode)
        ->check(CLI::IsMember({"simulated", "server", "client"}));
    run->add_option("--addr", run_addr);
    run->add_option("--client-id", run_client_id);
    run->add_option("--history-out", run_history);
    run->add_option("--adapter-out", run_adapter_out);

    // hpo
    auto* hpo = app.add_subcommand("hpo", "hyperparameter search over courses");
    std::string hpo_config;
    std::string hpo_method_override;
    std::string hpo_out = "trials.csv";
    hpo->add_option("--config", hpo_config)->required();
    hpo->add_option("--method", hpo_method_override)
        ->check(CLI::IsMember({"grid", "random", "sha"}));
    hpo->add_option("--out", hpo_out);

    // report
    auto* report = app.add_subcommand("report", "emit CSV/JSON reports from a history");
    std::string report_in;
    std::string report_dir = "reports";
    report->add_option("--in", report_in)->required();
    report->add_option("--out-dir", report_dir);

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        return run_guarded([&] {
            ft::Corpus c = ft::gen_corpus(gen_seed, gen_domains, gen_per_domain,
                                          gen_seq_len, gen_vocab);
            ft::write_corpus_jsonl(c, gen_out);
            std::cout << "wrote " << c.samples.size() << " samples to " << gen_out
                      << "\n";
        });
    }

    if (split->parsed()) {
        return run_guarded([&] {
            ft::Corpus c = ft::read_corpus_jsonl(split_in);
            ft::SplitPlan plan;
            ft::SplitMethod method = ft::split_method_from_name(split_method);
            switch (method) {
                case ft::SplitMethod::Uniform:
                    if (split_clients == 0) {
                        throw ft::ConfigError("--clients is required for uniform");
                    }
                    plan = ft::split_uniform(c, split_clients, split_seed);
                    break;
                case ft::SplitMethod::Dirichlet:
                    if (split_clients == 0) {
                        throw ft::ConfigError("--clients is required for dirichlet");
                    }
                    plan = ft::split_dirichlet(c, split_clients, split_alpha, split_seed);
                    break;
                case ft::SplitMethod::Meta:
                    plan = ft::split_meta(c, std::nullopt,
                                          split_clients ? std::optional(split_clients)
                                                        : std::nullopt);
                    break;
            }
            ft::write_plan_jsonl(plan, split_out);
            std::cout << "wrote plan for " << plan.n_clients << " clients to "
                      << split_out << "\n";
        });
    }

    if (run->parsed()) {
        return run_guarded([&] {
            ft::CourseConfig cfg = ft::load_course_config(run_config);
            ft::CourseHistory history;
            if (run_mode == "server") {
                history = ft::serve_distributed(cfg, run_addr);
            } else if (run_mode == "client") {
                if (run_client_id == 0) {
                    throw ft::ConfigError("--client-id is required in client mode");
                }
                history = ft::client_connect(cfg, run_addr, run_client_id);
            } else {
                history = ft::run_simulated(cfg);
            }
            if (!run_history.empty()) {
                ft::write_text_file(run_history,
                                    ft::history_to_json(cfg, history).dump(2) + "\n");
            }
            if (!run_adapter_out.empty() && history.completed &&
                !history.final_adapter.empty()) {
                ft::write_file(run_adapter_out,
                               ft::serialize_params(history.final_adapter,
                                                    cfg.codec.dtype));
            }
            print_course_summary(cfg, history);
            if (!history.completed) {
                throw ft::TransportError("course aborted: " + history.failure);
            }
        });
    }

    if (hpo->parsed()) {
        return run_guarded([&] {
            ft::HpoJobConfig job = ft::load_hpo_config(hpo_config);
            if (!hpo_method_override.empty()) job.method = hpo_method_override;

            std::map<uint64_t, ft::CourseState> checkpoints;
            ft::TrialRunner runner = [&](const ft::ConfigPoint& point, uint32_t fidelity,
                                         uint64_t token) {
                ft::CourseConfig cfg = job.course;
                for (const auto& [axis, value] : point) {
                    if (axis == "lr") {
                        cfg.trainer.lr = value;
                    } else if (axis == "scaling") {
                        cfg.adapter.lora.scaling = value;
                    } else if (axis == "dropout") {
                        cfg.adapter.lora.dropout = value;
                    } else if (axis == "v_tokens") {
                        cfg.adapter.prompt.v_tokens = static_cast<uint32_t>(value);
                        cfg.adapter.ptuning.v_tokens = static_cast<uint32_t>(value);
                    } else {
                        throw ft::ConfigError("hpo: unknown axis '" + axis + "'");
                    }
                }
                cfg.rounds = fidelity;
                ft::CourseState& state = checkpoints[token];
                ft::CourseHistory h = ft::run_simulated_resumable(cfg, state, fidelity);
                ft::Trial t;
                t.val_loss = h.final_val_loss;
                t.eval_score = h.final_eval_score;
                t.ledger = h.ledger;
                return t;
            };

            std::vector<ft::Trial> trials;
            if (job.method == "grid") {
                trials = ft::grid_search(job.space, job.fidelity, runner);
            } else if (job.method == "random") {
                trials = ft::random_search(job.space, job.n, job.seed, job.fidelity,
                                           runner);
            } else {
                ft::ShaResult sha = ft::successive_halving(job.space, job.n0, job.r0,
                                                           job.eta, job.seed, runner);
                trials = sha.all;
                std::cout << "sha best point:";
                for (const auto& [axis, v] : sha.best.point) {
                    std::cout << " " << axis << "=" << ft::format_double(v);
                }
                std::cout << "\nsha granted rounds: " << sha.total_granted_rounds << "\n";
            }
            ft::write_text_file(hpo_out, ft::trials_csv(trials));

            std::vector<ft::Trial> completed;
            for (const ft::Trial& t : trials) {
                if (!t.failed) completed.push_back(t);
            }
            if (completed.size() >= 2) {
                ft::RankLandscape rl = ft::rank_landscape(completed);
                std::cout << "rank landscape: spearman rho = "
                          << ft::format_double(rl.spearman_rho)
                          << ", discrepancy = " << ft::format_double(rl.discrepancy)
                          << "\n";
            }
            std::cout << "wrote " << trials.size() << " trial rows to " << hpo_out
                      << "\n";
        });
    }

    if (report->parsed()) {
        return run_guarded([&] {
            std::ifstream f(report_in);
            if (!f) throw ft::IoError("cannot open '" + report_in + "'");
            json j;
            try {
                j = json::parse(f);
            } catch (const json::exception& e) {
                throw ft::DataError(std::string("history json: ") + e.what());
            }
            ft::CourseHistory h = ft::history_from_json(j);
            if (h.rounds.empty()) throw ft::UsageError("report: empty history");
            std::error_code ec;
            std::filesystem::create_directories(report_dir, ec);
            if (ec) throw ft::IoError("cannot create '" + report_dir + "'");
            ft::write_text_file(report_dir + "/rounds.csv", ft::history_csv(h));
            ft::write_text_file(report_dir + "/summary.json", j.dump(2) + "\n");
            std::cout << "wrote " << report_dir << "/rounds.csv and summary.json\n";
        });
    }
    return 0;
}
