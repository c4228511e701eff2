#include "fedtune/config.hpp"

#include <fstream>
#include <set>

namespace fedtune {

namespace {

using nlohmann::json;

// Pulls known keys out of an object and rejects leftovers.
class StrictObject {
public:
    StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(path_ + "." + key + ": " + e.what());
        }
    }

    const json* child(const char* key) {
        seen_.insert(key);
        if (!j_.contains(key)) return nullptr;
        return &j_.at(key);
    }

    ~StrictObject() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
            }
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

ModelConfig parse_model(const json& j) {
    ModelConfig m;
    m.vocab_size = 32;
    m.dim = 32;
    m.n_blocks = 6;
    m.n_heads = 2;
    m.seq_len = 32;
    m.seed = 7;
    StrictObject o(j, "model");
    o.get("vocab_size", m.vocab_size);
    o.get("dim", m.dim);
    o.get("n_blocks", m.n_blocks);
    o.get("n_heads", m.n_heads);
    o.get("seq_len", m.seq_len);
    o.get("seed", m.seed);
    return m;
}

AdapterSpec parse_adapter(const json& j) {
    AdapterSpec a;
    std::string kind = "lora";
    StrictObject o(j, "adapter");
    o.get("kind", kind);
    a.kind = adapter_kind_from_name(kind);
    o.get("rank", a.lora.rank);
    o.get("scaling", a.lora.scaling);
    o.get("dropout", a.lora.dropout);
    o.get("targets", a.lora.targets);
    o.get("v_tokens", a.prompt.v_tokens);
    a.ptuning.v_tokens = a.prompt.v_tokens;
    o.get("init_text_tokens", a.prompt.init_text_tokens);
    o.get("hidden", a.ptuning.hidden);
    o.get("front_blocks", a.fedot.front_blocks);
    o.get("back_blocks", a.fedot.back_blocks);
    o.get("drop_rate", a.fedot.drop_rate);
    return a;
}

DataConfig parse_data(const json& j) {
    DataConfig d;
    StrictObject o(j, "data");
    o.get("seed", d.seed);
    o.get("n_domains", d.n_domains);
    o.get("samples_per_domain", d.samples_per_domain);
    o.get("seq_len", d.seq_len);
    o.get("vocab_size", d.vocab_size);
    std::string split = "meta";
    o.get("split", split);
    d.split = split_method_from_name(split);
    o.get("alpha", d.alpha);
    o.get("split_seed", d.split_seed);
    o.get("corpus_file", d.corpus_file);
    o.get("plan_file", d.plan_file);
    return d;
}

TrainerConfig parse_trainer(const json& j) {
    TrainerConfig t;
    StrictObject o(j, "trainer");
    o.get("local_steps", t.local_steps);
    o.get("batch_size", t.batch_size);
    o.get("lr", t.lr);
    o.get("grad_accum", t.grad_accum);
    o.get("half_precision", t.half_precision);
    return t;
}

CodecFlags parse_codec(const json& j) {
    CodecFlags f;
    std::string codec = "none";
    std::string dtype = "f32";
    StrictObject o(j, "codec");
    o.get("codec", codec);
    o.get("dtype", dtype);
    f.codec = codec_from_name(codec);
    f.dtype = dtype_from_name(dtype);
    return f;
}

PflConfig parse_pfl(const json& j) {
    PflConfig p;
    StrictObject o(j, "pfl");
    o.get("lambda", p.lambda);
    o.get("inner_steps", p.inner_steps);
    o.get("inner_lr", p.inner_lr);
    o.get("outer_lr", p.outer_lr);
    return p;
}

EvalConfig parse_eval(const json& j) {
    EvalConfig e;
    StrictObject o(j, "eval");
    o.get("samples_per_domain", e.samples_per_domain);
    o.get("gen_prompts", e.gen_prompts);
    o.get("gen_threshold", e.gen_threshold);
    o.get("gen_prompt_len", e.gen_prompt_len);
    return e;
}

PretrainConfig parse_pretrain(const json& j) {
    PretrainConfig p;
    StrictObject o(j, "pretrain");
    o.get("steps", p.steps);
    o.get("lr", p.lr);
    o.get("batch_size", p.batch_size);
    o.get("samples_per_domain", p.samples_per_domain);
    return p;
}

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

}  // namespace

CourseConfig parse_course_config(const json& j) {
    CourseConfig c;
    c.rounds = 500;
    StrictObject o(j, "config");
    o.get("seed", c.seed);
    o.get("rounds", c.rounds);
    o.get("clients", c.n_clients);
    std::string mode = "simulated";
    o.get("mode", mode);
    if (mode == "simulated") {
        c.mode = CourseMode::Simulated;
    } else if (mode == "distributed") {
        c.mode = CourseMode::Distributed;
    } else {
        throw ConfigError("mode must be 'simulated' or 'distributed'");
    }
    if (const json* m = o.child("model")) c.model = parse_model(*m);
    else c.model = parse_model(json::object());
    if (const json* d = o.child("data")) c.data = parse_data(*d);
    if (const json* a = o.child("adapter")) c.adapter = parse_adapter(*a);
    else c.adapter = parse_adapter(json::object());
    if (const json* t = o.child("trainer")) c.trainer = parse_trainer(*t);
    if (const json* k = o.child("codec")) c.codec = parse_codec(*k);
    std::string algo = "fedavg";
    o.get("algo", algo);
    if (algo == "fedavg") {
        c.algo = Algo::FedAvg;
    } else if (algo == "pfedme") {
        c.algo = Algo::Pfedme;
    } else {
        throw ConfigError("algo must be 'fedavg' or 'pfedme'");
    }
    if (const json* p = o.child("pfl")) c.pfl = parse_pfl(*p);
    o.get("eval_every", c.eval_every);
    if (const json* e = o.child("eval")) c.eval = parse_eval(*e);
    if (const json* p = o.child("pretrain")) c.pretrain = parse_pretrain(*p);
    std::string weighting = c.weight_by_samples ? "samples" : "uniform";
    o.get("fedavg_weighting", weighting);
    if (weighting == "samples") {
        c.weight_by_samples = true;
    } else if (weighting == "uniform") {
        c.weight_by_samples = false;
    } else {
        throw ConfigError("fedavg_weighting must be 'samples' or 'uniform'");
    }
    o.get("timeout_seconds", c.round_timeout_s);
    o.get("bandwidth_bps", c.bandwidth_bps);
    o.get("val_sequences", c.val_sequences);
    c.validate();
    return c;
}

CourseConfig load_course_config(const std::string& path) {
    return parse_course_config(load_json_file(path));
}

HpoJobConfig parse_hpo_config(const json& j) {
    HpoJobConfig h;
    StrictObject o(j, "hpo");
    o.get("method", h.method);
    o.get("n", h.n);
    o.get("n0", h.n0);
    o.get("r0", h.r0);
    o.get("eta", h.eta);
    o.get("seed", h.seed);
    o.get("fidelity", h.fidelity);
    if (const json* s = o.child("space")) {
        if (!s->is_object()) throw ConfigError("hpo.space: expected an object");
        for (auto it = s->begin(); it != s->end(); ++it) {
            Axis axis;
            const json& spec = it.value();
            if (spec.is_array()) {
                axis.values = spec.get<std::vector<double>>();
            } else if (spec.is_object() && spec.contains("log_uniform")) {
                auto range = spec.at("log_uniform").get<std::vector<double>>();
                if (range.size() != 2) {
                    throw ConfigError("hpo.space." + it.key() +
                                      ": log_uniform needs [lo, hi]");
                }
                axis.log_range = std::make_pair(range[0], range[1]);
            } else {
                throw ConfigError("hpo.space." + it.key() +
                                  ": expected a value list or log_uniform range");
            }
            h.space.axes[it.key()] = std::move(axis);
        }
    } else {
        h.space = SearchSpace::defaults();
    }
    if (const json* c = o.child("course")) {
        h.course = parse_course_config(*c);
    } else {
        throw ConfigError("hpo: missing 'course' section");
    }
    if (h.method != "grid" && h.method != "random" && h.method != "sha") {
        throw ConfigError("hpo: method must be grid, random or sha");
    }
    if (h.method == "random" && h.n < 1) {
        throw ConfigError("hpo: random search needs n >= 1");
    }
    if (h.fidelity == 0) h.fidelity = h.course.rounds;
    h.space.validate();
    return h;
}

HpoJobConfig load_hpo_config(const std::string& path) {
    return parse_hpo_config(load_json_file(path));
}

json course_config_to_json(const CourseConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["rounds"] = cfg.rounds;
    j["clients"] = cfg.resolved_clients();
    j["mode"] = cfg.mode == CourseMode::Simulated ? "simulated" : "distributed";
    j["model"] = {{"vocab_size", cfg.model.vocab_size}, {"dim", cfg.model.dim},
                  {"n_blocks", cfg.model.n_blocks},     {"n_heads", cfg.model.n_heads},
                  {"seq_len", cfg.model.seq_len},       {"seed", cfg.model.seed}};
    j["data"] = {{"seed", cfg.data.seed},
                 {"n_domains", cfg.data.n_domains},
                 {"samples_per_domain", cfg.data.samples_per_domain},
                 {"split", split_method_name(cfg.data.split)},
                 {"alpha", cfg.data.alpha},
                 {"split_seed", cfg.data.split_seed}};
    json a;
    a["kind"] = adapter_kind_name(cfg.adapter.kind);
    switch (cfg.adapter.kind) {
        case AdapterKind::Lora:
            a["rank"] = cfg.adapter.lora.rank;
            a["scaling"] = cfg.adapter.lora.scaling;
            a["dropout"] = cfg.adapter.lora.dropout;
            break;
        case AdapterKind::Prompt:
            a["v_tokens"] = cfg.adapter.prompt.v_tokens;
            break;
        case AdapterKind::Ptuning:
            a["v_tokens"] = cfg.adapter.ptuning.v_tokens;
            a["hidden"] = cfg.adapter.ptuning.hidden;
            break;
        case AdapterKind::Fedot:
            a["front_blocks"] = cfg.adapter.fedot.front_blocks;
            a["back_blocks"] = cfg.adapter.fedot.back_blocks;
            a["drop_rate"] = cfg.adapter.fedot.drop_rate;
            break;
        case AdapterKind::None:
            break;
    }
    j["adapter"] = a;
    j["trainer"] = {{"local_steps", cfg.trainer.local_steps},
                    {"batch_size", cfg.trainer.batch_size},
                    {"lr", cfg.trainer.lr},
                    {"grad_accum", cfg.trainer.grad_accum},
                    {"half_precision", cfg.trainer.half_precision}};
    j["codec"] = {{"codec", codec_name(cfg.codec.codec)},
                  {"dtype", dtype_name(cfg.codec.dtype)}};
    j["algo"] = cfg.algo == Algo::FedAvg ? "fedavg" : "pfedme";
    return j;
}

}  // namespace fedtune
