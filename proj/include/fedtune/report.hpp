#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtune/config.hpp"
#include "fedtune/course.hpp"
#include "fedtune/hpo.hpp"

namespace fedtune {

// Deterministic shortest-roundtrip decimal rendering of a double.
std::string format_double(double v);

nlohmann::json history_to_json(const CourseConfig& cfg, const CourseHistory& history);
CourseHistory history_from_json(const nlohmann::json& j);  // round records + finals

// One row per round: round, train_loss, val_loss, eval_score, bytes_up,
// bytes_down, flops, seconds. Reruns are byte-identical.
std::string history_csv(const CourseHistory& history);

// One row per trial: axes..., fidelity, val_loss, eval_score, bytes_up,
// flops, seconds.
std::string trials_csv(const std::vector<Trial>& trials);

// Writes <dir>/rounds.csv and <dir>/summary.json.
void emit_report(const CourseConfig& cfg, const CourseHistory& history,
                 const std::string& out_dir);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace fedtune
