#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "fedtune/course.hpp"
#include "fedtune/hpo.hpp"

namespace fedtune {

// Strict parsing: unknown keys anywhere are configuration errors.
CourseConfig parse_course_config(const nlohmann::json& j);
CourseConfig load_course_config(const std::string& path);

struct HpoJobConfig {
    SearchSpace space;
    std::string method = "grid";  // grid | random | sha
    uint32_t n = 0;               // random search draws
    uint32_t n0 = 8;
    uint32_t r0 = 1;
    uint32_t eta = 2;
    uint64_t seed = 0;
    uint32_t fidelity = 0;  // rounds per trial (0 = course rounds)
    CourseConfig course;
};

HpoJobConfig parse_hpo_config(const nlohmann::json& j);
HpoJobConfig load_hpo_config(const std::string& path);

nlohmann::json course_config_to_json(const CourseConfig& cfg);

}  // namespace fedtune
