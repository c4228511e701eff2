#include "fedtune/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace fedtune {

namespace {

using nlohmann::json;

json ledger_to_json(const CostLedger& ledger) {
    json j;
    j["bytes_up"] = ledger.bytes_up;
    j["bytes_down"] = ledger.bytes_down;
    j["flops"] = u128_to_string(ledger.flops);
    j["seconds"] = ledger.wall_seconds;
    j["param_bytes_resident"] = ledger.param_bytes_resident;
    j["warnings"] = ledger.warnings.size();
    return j;
}

}  // namespace

std::string u128_to_string(u128 v) {
    if (v == 0) return "0";
    std::string s;
    while (v > 0) {
        s.push_back(static_cast<char>('0' + static_cast<unsigned>(v % 10)));
        v /= 10;
    }
    std::reverse(s.begin(), s.end());
    return s;
}

CostLedger ledger_record(const CostLedger& ledger, const LedgerEvent& event) {
    if (event.seconds < 0.0) throw UsageError("ledger: negative time delta");
    CostLedger out = ledger;
    out.bytes_up += event.bytes_up;
    out.bytes_down += event.bytes_down;
    out.flops += event.flops;
    out.wall_seconds += event.seconds;
    return out;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

json history_to_json(const CourseConfig& cfg, const CourseHistory& history) {
    json j;
    j["config"] = course_config_to_json(cfg);
    j["completed"] = history.completed;
    if (!history.failure.empty()) j["failure"] = history.failure;
    json rounds = json::array();
    for (const RoundRecord& r : history.rounds) {
        json row;
        row["round"] = r.round;
        row["train_loss"] = r.train_loss;
        row["val_loss"] = r.val_loss;
        if (r.eval_score) row["eval_score"] = *r.eval_score;
        row["bytes_up"] = r.bytes_up;
        row["bytes_down"] = r.bytes_down;
        row["flops"] = u128_to_string(r.flops);
        row["seconds"] = r.seconds;
        rounds.push_back(std::move(row));
    }
    j["rounds"] = std::move(rounds);
    j["final"] = {{"val_loss", history.final_val_loss},
                  {"eval_score", history.final_eval_score},
                  {"mean_perplexity", history.final_mean_perplexity},
                  {"adapter_digest", history.final_adapter_digest}};
    json per_domain = json::object();
    for (const auto& [d, ppl] : history.final_domain_perplexity) {
        per_domain[std::to_string(d)] = ppl;
    }
    j["final"]["domain_perplexity"] = per_domain;
    if (!history.personal_scores.empty()) {
        j["final"]["personal_scores"] = history.personal_scores;
    }
    j["ledger"] = ledger_to_json(history.ledger);
    j["residency"] = {{"client_base_params", history.residency.client_base_params},
                      {"server_model_params", history.residency.server_model_params},
                      {"adapter_params", history.residency.adapter_params},
                      {"global_adapter_params", history.residency.global_adapter_params},
                      {"personal_params", history.residency.personal_params},
                      {"n_clients", history.residency.n_clients},
                      {"client_side_params", history.residency.client_side_params()}};
    return j;
}

CourseHistory history_from_json(const json& j) {
    CourseHistory h;
    h.completed = j.value("completed", false);
    h.failure = j.value("failure", "");
    for (const json& row : j.at("rounds")) {
        RoundRecord r;
        r.round = row.at("round").get<uint32_t>();
        r.train_loss = row.at("train_loss").get<double>();
        r.val_loss = row.at("val_loss").get<double>();
        if (row.contains("eval_score")) r.eval_score = row["eval_score"].get<double>();
        r.bytes_up = row.value("bytes_up", 0ull);
        r.bytes_down = row.value("bytes_down", 0ull);
        r.seconds = row.value("seconds", 0.0);
        h.rounds.push_back(r);
    }
    if (j.contains("final")) {
        h.final_val_loss = j["final"].value("val_loss", 0.0);
        h.final_eval_score = j["final"].value("eval_score", 0.0);
        h.final_mean_perplexity = j["final"].value("mean_perplexity", 0.0);
        h.final_adapter_digest = j["final"].value("adapter_digest", 0ull);
    }
    return h;
}

std::string history_csv(const CourseHistory& history) {
    if (history.rounds.empty()) throw UsageError("report: empty history");
    std::string out =
        "round,train_loss,val_loss,eval_score,bytes_up,bytes_down,flops,seconds\n";
    for (const RoundRecord& r : history.rounds) {
        out += std::to_string(r.round);
        out += ',' + format_double(r.train_loss);
        out += ',' + format_double(r.val_loss);
        out += ',';
        if (r.eval_score) out += format_double(*r.eval_score);
        out += ',' + std::to_string(r.bytes_up);
        out += ',' + std::to_string(r.bytes_down);
        out += ',' + u128_to_string(r.flops);
        out += ',' + format_double(r.seconds);
        out += '\n';
    }
    return out;
}

std::string trials_csv(const std::vector<Trial>& trials) {
    if (trials.empty()) throw UsageError("report: no trials");
    std::set<std::string> axis_names;
    for (const Trial& t : trials) {
        for (const auto& [name, v] : t.point) axis_names.insert(name);
    }
    std::string out;
    for (const std::string& name : axis_names) out += name + ',';
    out += "fidelity,val_loss,eval_score,bytes_up,flops,seconds,status\n";
    for (const Trial& t : trials) {
        for (const std::string& name : axis_names) {
            auto it = t.point.find(name);
            if (it != t.point.end()) out += format_double(it->second);
            out += ',';
        }
        out += std::to_string(t.fidelity);
        out += ',' + format_double(t.val_loss);
        out += ',' + format_double(t.eval_score);
        out += ',' + std::to_string(t.ledger.bytes_up);
        out += ',' + u128_to_string(t.ledger.flops);
        out += ',' + format_double(t.ledger.wall_seconds);
        out += ',';
        out += t.failed ? "failed" : "ok";
        out += '\n';
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << content;
    if (!f) throw IoError("write to '" + path + "' failed");
}

void emit_report(const CourseConfig& cfg, const CourseHistory& history,
                 const std::string& out_dir) {
    if (history.rounds.empty()) throw UsageError("report: empty history");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir + "': " + ec.message());
    write_text_file(out_dir + "/rounds.csv", history_csv(history));
    write_text_file(out_dir + "/summary.json",
                    history_to_json(cfg, history).dump(2) + "\n");
}

}  // namespace fedtune
