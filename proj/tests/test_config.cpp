#include <doctest.h>

#include <nlohmann/json.hpp>

#include "fedtune/config.hpp"
#include "fedtune/report.hpp"

using namespace fedtune;
using nlohmann::json;

TEST_CASE("defaults mirror the experimental protocol") {
    CourseConfig c = parse_course_config(json::object());
    CHECK(c.rounds == 500);
    CHECK(c.trainer.local_steps == 30);
    CHECK(c.trainer.batch_size == 1);
    CHECK(c.adapter.kind == AdapterKind::Lora);
    CHECK(c.adapter.lora.rank == 8);
    CHECK(c.codec.codec == Codec::None);
    CHECK(c.codec.dtype == Dtype::F32);
    CHECK(c.eval_every == 10);
    CHECK(c.weight_by_samples);

    SearchSpace s = SearchSpace::defaults();
    CHECK(s.axes.at("lr").values ==
          std::vector<double>{1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3});
    CHECK(s.axes.at("scaling").values == std::vector<double>{16, 32, 64, 128});
    CHECK(s.axes.at("dropout").values == std::vector<double>{0.0, 0.1});
    CHECK(s.axes.at("v_tokens").values == std::vector<double>{10, 20, 30});
}

TEST_CASE("unknown keys are rejected everywhere") {
    json j = json::object();
    j["typo_key"] = 1;
    CHECK_THROWS_AS(parse_course_config(j), ConfigError);

    json j2 = {{"trainer", {{"local_steps", 5}, {"bogus", 1}}}};
    CHECK_THROWS_AS(parse_course_config(j2), ConfigError);

    json j3 = {{"adapter", {{"kind", "lora"}, {"unknown", true}}}};
    CHECK_THROWS_AS(parse_course_config(j3), ConfigError);

    json j4 = {{"codec", {{"codec", "zstd"}}}};
    CHECK_THROWS_AS(parse_course_config(j4), ConfigError);
}

TEST_CASE("full round-trippable course config") {
    json j = {
        {"seed", 3},
        {"rounds", 7},
        {"clients", 4},
        {"model", {{"vocab_size", 16}, {"dim", 16}, {"n_blocks", 4},
                   {"n_heads", 2}, {"seq_len", 16}, {"seed", 1}}},
        {"data", {{"seed", 2}, {"n_domains", 4}, {"samples_per_domain", 10},
                  {"split", "dirichlet"}, {"alpha", 0.5}, {"split_seed", 9}}},
        {"adapter", {{"kind", "prompt"}, {"v_tokens", 4}}},
        {"trainer", {{"local_steps", 4}, {"batch_size", 2}, {"lr", 0.001}}},
        {"codec", {{"codec", "gzip"}, {"dtype", "i8"}}},
        {"algo", "pfedme"},
        {"pfl", {{"lambda", 7.0}, {"inner_steps", 2}}},
        {"eval_every", 2},
        {"fedavg_weighting", "uniform"},
    };
    CourseConfig c = parse_course_config(j);
    CHECK(c.rounds == 7);
    CHECK(c.n_clients == 4);
    CHECK(c.adapter.kind == AdapterKind::Prompt);
    CHECK(c.adapter.prompt.v_tokens == 4);
    CHECK(c.codec.codec == Codec::Gzip);
    CHECK(c.codec.dtype == Dtype::I8);
    CHECK(c.algo == Algo::Pfedme);
    CHECK(c.pfl.lambda == 7.0);
    CHECK_FALSE(c.weight_by_samples);

    json echo = course_config_to_json(c);
    CHECK(echo["rounds"] == 7);
    CHECK(echo["adapter"]["kind"] == "prompt");
    CHECK(echo["algo"] == "pfedme");
}

TEST_CASE("invalid configurations fail fast") {
    json bad_mode = {{"mode", "clustered"}};
    CHECK_THROWS_AS(parse_course_config(bad_mode), ConfigError);

    json bad_model = {{"model", {{"n_blocks", 3}}}};
    CHECK_THROWS_AS(parse_course_config(bad_model), ConfigError);

    json bad_rounds = {{"rounds", 0}};
    CHECK_THROWS_AS(parse_course_config(bad_rounds), ConfigError);

    json bad_algo = {{"algo", "ditto"}};
    CHECK_THROWS_AS(parse_course_config(bad_algo), ConfigError);
}

TEST_CASE("hpo config parsing") {
    json course = {{"rounds", 4},
                   {"clients", 2},
                   {"data", {{"n_domains", 2}, {"samples_per_domain", 10},
                             {"split", "uniform"}}}};
    json j = {{"method", "sha"}, {"n0", 4}, {"eta", 2},
              {"space", {{"lr", {1e-4, 1e-3}}}},
              {"course", course}};
    HpoJobConfig h = parse_hpo_config(j);
    CHECK(h.method == "sha");
    CHECK(h.n0 == 4);
    CHECK(h.space.axes.size() == 1);
    CHECK(h.fidelity == 4);  // defaults to course rounds

    json missing_course = {{"method", "grid"}};
    CHECK_THROWS_AS(parse_hpo_config(missing_course), ConfigError);

    json bad_method = {{"method", "bayes"}, {"course", course}};
    CHECK_THROWS_AS(parse_hpo_config(bad_method), ConfigError);

    json log_axis = {{"method", "random"}, {"n", 3},
                     {"space", {{"lr", {{"log_uniform", {1e-4, 1e-1}}}}}},
                     {"course", course}};
    HpoJobConfig hl = parse_hpo_config(log_axis);
    CHECK(hl.space.axes.at("lr").continuous());
}

TEST_CASE("report formatting is deterministic") {
    CourseHistory h;
    RoundRecord r;
    r.round = 0;
    r.train_loss = 1.5;
    r.val_loss = 2.5;
    r.eval_score = -0.25;
    r.bytes_up = 100;
    r.bytes_down = 200;
    r.flops = u128(1) << 70;  // exercises the u128 decimal rendering
    r.seconds = 0.125;
    h.rounds.push_back(r);
    r.round = 1;
    r.eval_score.reset();
    h.rounds.push_back(r);

    std::string csv1 = history_csv(h);
    std::string csv2 = history_csv(h);
    CHECK(csv1 == csv2);
    CHECK(csv1.find("round,train_loss,val_loss,eval_score,bytes_up,bytes_down,"
                    "flops,seconds") == 0);
    CHECK(csv1.find("1180591620717411303424") != std::string::npos);  // 2^70

    CourseHistory empty;
    CHECK_THROWS_AS(history_csv(empty), UsageError);

    // trial tables
    Trial t;
    t.point = {{"lr", 0.001}, {"scaling", 16.0}};
    t.fidelity = 4;
    t.val_loss = 0.5;
    t.eval_score = -0.5;
    std::string tcsv = trials_csv({t});
    CHECK(tcsv.find("lr,scaling,fidelity") == 0);
    CHECK(trials_csv({t}) == tcsv);
    CHECK_THROWS_AS(trials_csv({}), UsageError);
}

TEST_CASE("u128 decimal rendering") {
    CHECK(u128_to_string(0) == "0");
    CHECK(u128_to_string(12345) == "12345");
    u128 big = u128(0xffffffffffffffffULL);
    CHECK(u128_to_string(big) == "18446744073709551615");
}
