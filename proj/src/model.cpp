#include "fedtune/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fedtune/adapters.hpp"
#include "fedtune/half.hpp"
#include "fedtune/rng.hpp"

namespace fedtune {

namespace {

// ------------------------------ small kernels ------------------------------

// Y(T x out) += X(T x in) . W(out x in)^T
void mm_xwt(const double* X, const double* W, double* Y, size_t T, size_t in,
            size_t out) {
    for (size_t t = 0; t < T; ++t) {
        const double* x = X + t * in;
        double* y = Y + t * out;
        for (size_t o = 0; o < out; ++o) {
            const double* w = W + o * in;
            double acc = 0.0;
            for (size_t i = 0; i < in; ++i) acc += x[i] * w[i];
            y[o] += acc;
        }
    }
}

// dX(T x in) += dY(T x out) . W(out x in)
void mm_dyw(const double* dY, const double* W, double* dX, size_t T, size_t in,
            size_t out) {
    for (size_t t = 0; t < T; ++t) {
        const double* dy = dY + t * out;
        double* dx = dX + t * in;
        for (size_t o = 0; o < out; ++o) {
            double c = dy[o];
            if (c == 0.0) continue;
            const double* w = W + o * in;
            for (size_t i = 0; i < in; ++i) dx[i] += c * w[i];
        }
    }
}

// dW(out x in) += dY(T x out)^T . X(T x in)
void mm_dytx(const double* dY, const double* X, double* dW, size_t T, size_t in,
             size_t out) {
    for (size_t t = 0; t < T; ++t) {
        const double* dy = dY + t * out;
        const double* x = X + t * in;
        for (size_t o = 0; o < out; ++o) {
            double c = dy[o];
            if (c == 0.0) continue;
            double* w = dW + o * in;
            for (size_t i = 0; i < in; ++i) w[i] += c * x[i];
        }
    }
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
}

double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

void layernorm_forward(const double* x, const double* g, const double* b,
                       double* y, double* mu, double* rstd, size_t rows,
                       size_t d) {
    for (size_t t = 0; t < rows; ++t) {
        const double* xr = x + t * d;
        double* yr = y + t * d;
        double m = 0.0;
        for (size_t i = 0; i < d; ++i) m += xr[i];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (size_t i = 0; i < d; ++i) {
            double c = xr[i] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        mu[t] = m;
        rstd[t] = rs;
        for (size_t i = 0; i < d; ++i) {
            yr[i] = g[i] * (xr[i] - m) * rs + b[i];
        }
    }
}

// dx += backprop(dy); dg/db accumulated when non-null.
void layernorm_backward(const double* x, const double* g, const double* mu,
                        const double* rstd, const double* dy, double* dx,
                        double* dg, double* db, size_t rows, size_t d) {
    for (size_t t = 0; t < rows; ++t) {
        const double* xr = x + t * d;
        const double* dyr = dy + t * d;
        double* dxr = dx + t * d;
        double m = mu[t];
        double rs = rstd[t];
        double sum_dxh = 0.0;
        double sum_dxh_xh = 0.0;
        for (size_t i = 0; i < d; ++i) {
            double xh = (xr[i] - m) * rs;
            double dxh = dyr[i] * g[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            if (dg) dg[i] += dyr[i] * xh;
            if (db) db[i] += dyr[i];
        }
        double inv_d = 1.0 / static_cast<double>(d);
        for (size_t i = 0; i < d; ++i) {
            double xh = (xr[i] - m) * rs;
            double dxh = dyr[i] * g[i];
            dxr[i] += rs * (dxh - inv_d * sum_dxh - xh * inv_d * sum_dxh_xh);
        }
    }
}

void fill_dropout_mask(uint64_t seed, double p, std::vector<double>& mask) {
    Rng rng(seed);
    double keep_scale = 1.0 / (1.0 - p);
    for (double& m : mask) {
        m = (rng.uniform() < p) ? 0.0 : keep_scale;
    }
}

// ------------------------------ linear sites -------------------------------

struct SiteWeights {
    const TensorF* w = nullptr;
    const TensorF* a = nullptr;  // LoRA r x in
    const TensorF* b = nullptr;  // LoRA out x r
    double scale = 0.0;          // alpha / r
    double dropout = 0.0;
};

SiteWeights site_weights(const MicroLM& model, const AdapterState* ad,
                         const std::string& name) {
    SiteWeights s;
    s.w = &resolved_param(model, ad, name);
    if (ad && ad->spec.kind == AdapterKind::Lora) {
        const TensorF* a = ad->params.find(name + ".lora_a");
        if (a) {
            s.a = a;
            s.b = &ad->params.get(name + ".lora_b");
            s.scale = ad->spec.lora.scaling / static_cast<double>(ad->spec.lora.rank);
            s.dropout = ad->spec.lora.dropout;
        }
    }
    return s;
}

// Y(T x out) = X . W_eff^T with the optional LoRA branch; fills `cache` when
// the branch is active.
void linear_forward(const SiteWeights& s, const std::string& name,
                    const double* X, size_t T, double* Y, LoraSiteCache* cache,
                    bool training, uint64_t dropout_seed, uint32_t seq_index) {
    size_t out = s.w->dims[0];
    size_t in = s.w->dims[1];
    std::fill(Y, Y + T * out, 0.0);
    mm_xwt(X, s.w->data.data(), Y, T, in, out);
    if (!s.a) return;

    size_t r = s.a->dims[0];
    cache->u.assign(T * r, 0.0);
    const double* xs = X;
    std::vector<double> dropped;
    if (training && s.dropout > 0.0) {
        cache->mask.assign(T * in, 0.0);
        fill_dropout_mask(derive_seed(dropout_seed, fnv1a64(name), seq_index),
                          s.dropout, cache->mask);
        dropped.resize(T * in);
        for (size_t i = 0; i < T * in; ++i) dropped[i] = cache->mask[i] * X[i];
        xs = dropped.data();
    }
    mm_xwt(xs, s.a->data.data(), cache->u.data(), T, in, r);
    // Y += scale * u . B^T
    std::vector<double> branch(T * out, 0.0);
    mm_xwt(cache->u.data(), s.b->data.data(), branch.data(), T, r, out);
    for (size_t i = 0; i < T * out; ++i) Y[i] += s.scale * branch[i];
}

struct GradSink {
    ParamTree* grads;
    double* find(const std::string& name) {
        TensorF* t = grads->find_mut(name);
        return t ? t->data.data() : nullptr;
    }
};

// dX += dY . W_eff; weight/LoRA gradients accumulated when trainable.
void linear_backward(const SiteWeights& s, const std::string& name,
                     const double* X, const double* dY, size_t T, double* dX,
                     GradSink& sink, const LoraSiteCache* cache) {
    size_t out = s.w->dims[0];
    size_t in = s.w->dims[1];
    if (double* dw = sink.find(name)) {
        mm_dytx(dY, X, dw, T, in, out);
    }
    mm_dyw(dY, s.w->data.data(), dX, T, in, out);
    if (!s.a) return;

    size_t r = s.a->dims[0];
    // du = scale * dY . B
    std::vector<double> du(T * r, 0.0);
    mm_dyw(dY, s.b->data.data(), du.data(), T, r, out);
    for (double& v : du) v *= s.scale;

    const double* xs = X;
    std::vector<double> dropped;
    if (!cache->mask.empty()) {
        dropped.resize(T * in);
        for (size_t i = 0; i < T * in; ++i) dropped[i] = cache->mask[i] * X[i];
        xs = dropped.data();
    }
    if (double* da = sink.find(name + ".lora_a")) {
        mm_dytx(du.data(), xs, da, T, in, r);
    }
    if (double* db = sink.find(name + ".lora_b")) {
        // dB += scale * dY^T . u
        std::vector<double> tmp(out * r, 0.0);
        mm_dytx(dY, cache->u.data(), tmp.data(), T, r, out);
        for (size_t i = 0; i < out * r; ++i) db[i] += s.scale * tmp[i];
    }
    // dX += mask .* (du . A)
    std::vector<double> dxs(T * in, 0.0);
    mm_dyw(du.data(), s.a->data.data(), dxs.data(), T, in, r);
    if (!cache->mask.empty()) {
        for (size_t i = 0; i < T * in; ++i) dX[i] += cache->mask[i] * dxs[i];
    } else {
        for (size_t i = 0; i < T * in; ++i) dX[i] += dxs[i];
    }
}

struct BlockNames {
    std::string ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2;
};

BlockNames block_names(uint32_t b) {
    std::string p = block_prefix(b);
    return BlockNames{p + ".ln1.g", p + ".ln1.b", p + ".attn.wq", p + ".attn.wk",
                      p + ".attn.wv", p + ".attn.wo", p + ".ln2.g", p + ".ln2.b",
                      p + ".mlp.w1", p + ".mlp.w2"};
}

// Model depth as seen by forward; a FedOT client model is already reduced.
uint32_t effective_blocks(const MicroLM& model, const AdapterState*) {
    return model.config.n_blocks;
}

uint64_t trainable_digest(const MicroLM& model, const AdapterState* ad) {
    uint64_t h = 0xcbf29ce484222325ULL;
    if (ad) {
        h = ad->params.digest64() ^ h;
    } else {
        for (const auto& [name, t] : model.base.entries()) {
            if (model.is_frozen(name)) continue;
            h = fnv1a64(name, h);
            h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
        }
    }
    return h;
}

// Virtual-token embeddings for prompt/p-tuning adapters; fills p-tuning tanh
// activations for backward.
void compute_virtual_rows(const AdapterState* ad, uint32_t dim,
                          std::vector<double>& virt, std::vector<double>& pt_t) {
    if (!ad) return;
    if (ad->spec.kind == AdapterKind::Prompt) {
        const TensorF& p = ad->params.get("prompt.emb");
        virt = p.data;
        return;
    }
    if (ad->spec.kind != AdapterKind::Ptuning) return;
    const TensorF& seed = ad->params.get("ptuning.seed");
    const TensorF& w1 = ad->params.get("ptuning.mlp.w1");
    const TensorF& b1 = ad->params.get("ptuning.mlp.b1");
    const TensorF& w2 = ad->params.get("ptuning.mlp.w2");
    const TensorF& b2 = ad->params.get("ptuning.mlp.b2");
    uint32_t v = seed.dims[0];
    uint32_t hidden = w1.dims[0];
    virt.assign(static_cast<size_t>(v) * dim, 0.0);
    pt_t.assign(static_cast<size_t>(v) * hidden, 0.0);
    for (uint32_t j = 0; j < v; ++j) {
        const double* s = seed.data.data() + static_cast<size_t>(j) * dim;
        double* tj = pt_t.data() + static_cast<size_t>(j) * hidden;
        for (uint32_t hh = 0; hh < hidden; ++hh) {
            const double* w = w1.data.data() + static_cast<size_t>(hh) * dim;
            double acc = b1.data[hh];
            for (uint32_t i = 0; i < dim; ++i) acc += w[i] * s[i];
            tj[hh] = std::tanh(acc);
        }
        double* e = virt.data() + static_cast<size_t>(j) * dim;
        for (uint32_t i = 0; i < dim; ++i) {
            const double* w = w2.data.data() + static_cast<size_t>(i) * hidden;
            double acc = b2.data[i];
            for (uint32_t hh = 0; hh < hidden; ++hh) acc += w[hh] * tj[hh];
            e[i] = acc;
        }
    }
}

}  // namespace

// ------------------------------- config/init -------------------------------

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (dim == 0 || n_heads == 0 || dim % n_heads != 0) {
        throw ConfigError("model: dim must be a positive multiple of n_heads");
    }
    if (n_blocks < 4) throw ConfigError("model: n_blocks must be >= 4");
    if (seq_len < 2) throw ConfigError("model: seq_len must be >= 2");
}

std::string block_prefix(uint32_t block) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "blk%02u", block);
    return buf;
}

std::vector<std::string> base_param_names(const ModelConfig& config) {
    std::vector<std::string> names;
    names.emplace_back("embed");
    for (uint32_t b = 0; b < config.n_blocks; ++b) {
        BlockNames n = block_names(b);
        for (const std::string& s :
             {n.ln1_g, n.ln1_b, n.wq, n.wk, n.wv, n.wo, n.ln2_g, n.ln2_b, n.w1, n.w2}) {
            names.push_back(s);
        }
    }
    names.emplace_back("out.ln.g");
    names.emplace_back("out.ln.b");
    names.emplace_back("head");
    std::sort(names.begin(), names.end());
    return names;
}

bool MicroLM::is_frozen(const std::string& name) const {
    return std::binary_search(frozen.begin(), frozen.end(), name);
}

MicroLM init_model(const ModelConfig& config) {
    config.validate();
    MicroLM m;
    m.config = config;
    double std_w = 1.0 / std::sqrt(static_cast<double>(config.dim));
    auto norm_tensor = [&](const std::string& name, uint32_t rows, uint32_t cols) {
        TensorF t = TensorF::zeros({rows, cols});
        Rng rng(derive_seed(config.seed, fnv1a64(name)));
        for (double& v : t.data) v = rng.normal(0.0, std_w);
        return t;
    };
    auto const_tensor = [&](uint32_t n, double value) {
        TensorF t = TensorF::zeros({n});
        std::fill(t.data.begin(), t.data.end(), value);
        return t;
    };

    m.base.insert("embed", norm_tensor("embed", config.vocab_size, config.dim));
    for (uint32_t b = 0; b < config.n_blocks; ++b) {
        BlockNames n = block_names(b);
        m.base.insert(n.ln1_g, const_tensor(config.dim, 1.0));
        m.base.insert(n.ln1_b, const_tensor(config.dim, 0.0));
        m.base.insert(n.wq, norm_tensor(n.wq, config.dim, config.dim));
        m.base.insert(n.wk, norm_tensor(n.wk, config.dim, config.dim));
        m.base.insert(n.wv, norm_tensor(n.wv, config.dim, config.dim));
        m.base.insert(n.wo, norm_tensor(n.wo, config.dim, config.dim));
        m.base.insert(n.ln2_g, const_tensor(config.dim, 1.0));
        m.base.insert(n.ln2_b, const_tensor(config.dim, 0.0));
        m.base.insert(n.w1, norm_tensor(n.w1, config.mlp_hidden(), config.dim));
        m.base.insert(n.w2, norm_tensor(n.w2, config.dim, config.mlp_hidden()));
    }
    m.base.insert("out.ln.g", const_tensor(config.dim, 1.0));
    m.base.insert("out.ln.b", const_tensor(config.dim, 0.0));
    m.base.insert("head", norm_tensor("head", config.vocab_size, config.dim));
    return m;
}

const TensorF& resolved_param(const MicroLM& model, const AdapterState* adapters,
                              const std::string& name) {
    if (adapters) {
        if (const TensorF* t = adapters->params.find(name)) return *t;
    }
    if (const TensorF* t = model.base.find(name)) return *t;
    throw UsageError("resolved_param: missing parameter '" + name + "'");
}

std::vector<std::string> trainable_names(const MicroLM& model,
                                         const AdapterState* adapters) {
    std::vector<std::string> names;
    if (adapters) {
        for (const auto& [name, t] : adapters->params.entries()) names.push_back(name);
        return names;  // already sorted
    }
    for (const auto& [name, t] : model.base.entries()) {
        if (!model.is_frozen(name)) names.push_back(name);
    }
    return names;
}

// ------------------------------- forward -----------------------------------

ForwardResult forward_loss(const MicroLM& model, const AdapterState* adapters,
                           const TokenBatch& batch, const ForwardOptions& opts) {
    const ModelConfig& cfg = model.config;
    if (batch.rows == 0 || batch.cols == 0) throw DataError("forward: empty batch");
    if (batch.cols > cfg.seq_len) {
        throw DataError("forward: sequence longer than seq_len");
    }
    for (uint32_t id : batch.ids) {
        if (id >= cfg.vocab_size) throw DataError("forward: token id out of range");
    }
    if (adapters) adapters->spec.validate(cfg);

    ForwardResult result;
    ForwardCache& cache = result.cache;
    cache.training = opts.training;
    cache.dropout_seed = opts.dropout_seed;
    cache.state_digest = trainable_digest(model, adapters);

    uint32_t v = 0;
    if (adapters && (adapters->spec.kind == AdapterKind::Prompt ||
                     adapters->spec.kind == AdapterKind::Ptuning)) {
        compute_virtual_rows(adapters, cfg.dim, cache.virt, cache.pt_t);
        v = static_cast<uint32_t>(cache.virt.size() / cfg.dim);
    }
    cache.vlen = v;

    const uint32_t Treal = batch.cols;
    const uint32_t T = v + Treal;
    const uint32_t d = cfg.dim;
    const uint32_t H = cfg.n_heads;
    const uint32_t hd = cfg.head_dim();
    const uint32_t hm = cfg.mlp_hidden();
    const uint32_t L = effective_blocks(model, adapters);
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const TensorF& embed = resolved_param(model, adapters, "embed");

    if (Treal < 2) throw DataError("forward: need at least 2 tokens per sequence");
    cache.total_pred = batch.rows * (Treal - 1);

    double loss_sum = 0.0;
    cache.seqs.resize(batch.rows);
    for (uint32_t row = 0; row < batch.rows; ++row) {
        SeqCache& sc = cache.seqs[row];
        sc.tokens.assign(batch.ids.begin() + static_cast<size_t>(row) * Treal,
                         batch.ids.begin() + static_cast<size_t>(row + 1) * Treal);
        sc.e.assign(static_cast<size_t>(T) * d, 0.0);
        for (uint32_t j = 0; j < v; ++j) {
            std::copy_n(cache.virt.data() + static_cast<size_t>(j) * d, d,
                        sc.e.data() + static_cast<size_t>(j) * d);
        }
        for (uint32_t j = 0; j < Treal; ++j) {
            std::copy_n(embed.data.data() + static_cast<size_t>(sc.tokens[j]) * d, d,
                        sc.e.data() + static_cast<size_t>(v + j) * d);
        }

        std::vector<double> h = sc.e;
        sc.blocks.resize(L);
        for (uint32_t b = 0; b < L; ++b) {
            BlockCache& bc = sc.blocks[b];
            BlockNames n = block_names(b);
            bc.x1 = h;
            bc.mu1.resize(T);
            bc.rs1.resize(T);
            bc.a.assign(static_cast<size_t>(T) * d, 0.0);
            layernorm_forward(bc.x1.data(),
                              resolved_param(model, adapters, n.ln1_g).data.data(),
                              resolved_param(model, adapters, n.ln1_b).data.data(),
                              bc.a.data(), bc.mu1.data(), bc.rs1.data(), T, d);

            bc.q.assign(static_cast<size_t>(T) * d, 0.0);
            bc.k.assign(static_cast<size_t>(T) * d, 0.0);
            bc.v.assign(static_cast<size_t>(T) * d, 0.0);
            for (auto [name, dst] : {std::pair{&n.wq, &bc.q}, {&n.wk, &bc.k}, {&n.wv, &bc.v}}) {
                SiteWeights sw = site_weights(model, adapters, *name);
                linear_forward(sw, *name, bc.a.data(), T, dst->data(),
                               &bc.lora[*name], opts.training, opts.dropout_seed, row);
            }

            bc.probs.assign(static_cast<size_t>(H) * T * T, 0.0);
            bc.ctx.assign(static_cast<size_t>(T) * d, 0.0);
            for (uint32_t head = 0; head < H; ++head) {
                size_t off = static_cast<size_t>(head) * hd;
                double* probs = bc.probs.data() + static_cast<size_t>(head) * T * T;
                for (uint32_t t = 0; t < T; ++t) {
                    const double* qt = bc.q.data() + static_cast<size_t>(t) * d + off;
                    double* prow = probs + static_cast<size_t>(t) * T;
                    double row_max = -1e300;
                    for (uint32_t u = 0; u <= t; ++u) {
                        const double* ku = bc.k.data() + static_cast<size_t>(u) * d + off;
                        double s = 0.0;
                        for (uint32_t i = 0; i < hd; ++i) s += qt[i] * ku[i];
                        s *= inv_sqrt_hd;
                        prow[u] = s;
                        row_max = std::max(row_max, s);
                    }
                    double denom = 0.0;
                    for (uint32_t u = 0; u <= t; ++u) {
                        prow[u] = std::exp(prow[u] - row_max);
                        denom += prow[u];
                    }
                    double* ct = bc.ctx.data() + static_cast<size_t>(t) * d + off;
                    for (uint32_t u = 0; u <= t; ++u) {
                        prow[u] /= denom;
                        const double* vu = bc.v.data() + static_cast<size_t>(u) * d + off;
                        double p = prow[u];
                        for (uint32_t i = 0; i < hd; ++i) ct[i] += p * vu[i];
                    }
                }
            }

            std::vector<double> o(static_cast<size_t>(T) * d, 0.0);
            {
                SiteWeights sw = site_weights(model, adapters, n.wo);
                linear_forward(sw, n.wo, bc.ctx.data(), T, o.data(), &bc.lora[n.wo],
                               opts.training, opts.dropout_seed, row);
            }
            bc.x2.resize(static_cast<size_t>(T) * d);
            for (size_t i = 0; i < bc.x2.size(); ++i) bc.x2[i] = bc.x1[i] + o[i];

            bc.mu2.resize(T);
            bc.rs2.resize(T);
            bc.m.assign(static_cast<size_t>(T) * d, 0.0);
            layernorm_forward(bc.x2.data(),
                              resolved_param(model, adapters, n.ln2_g).data.data(),
                              resolved_param(model, adapters, n.ln2_b).data.data(),
                              bc.m.data(), bc.mu2.data(), bc.rs2.data(), T, d);

            bc.u1.assign(static_cast<size_t>(T) * hm, 0.0);
            {
                SiteWeights sw = site_weights(model, adapters, n.w1);
                linear_forward(sw, n.w1, bc.m.data(), T, bc.u1.data(), &bc.lora[n.w1],
                               opts.training, opts.dropout_seed, row);
            }
            bc.g.resize(bc.u1.size());
            for (size_t i = 0; i < bc.u1.size(); ++i) bc.g[i] = gelu(bc.u1[i]);

            std::vector<double> f(static_cast<size_t>(T) * d, 0.0);
            {
                SiteWeights sw = site_weights(model, adapters, n.w2);
                linear_forward(sw, n.w2, bc.g.data(), T, f.data(), &bc.lora[n.w2],
                               opts.training, opts.dropout_seed, row);
            }
            for (size_t i = 0; i < h.size(); ++i) h[i] = bc.x2[i] + f[i];
        }

        sc.xf = h;
        sc.muf.resize(T);
        sc.rsf.resize(T);
        sc.y.assign(static_cast<size_t>(T) * d, 0.0);
        layernorm_forward(sc.xf.data(),
                          resolved_param(model, adapters, "out.ln.g").data.data(),
                          resolved_param(model, adapters, "out.ln.b").data.data(),
                          sc.y.data(), sc.muf.data(), sc.rsf.data(), T, d);

        const uint32_t V = cfg.vocab_size;
        sc.probs.assign(static_cast<size_t>(T) * V, 0.0);
        {
            SiteWeights sw = site_weights(model, adapters, "head");
            linear_forward(sw, "head", sc.y.data(), T, sc.probs.data(), &sc.head_lora,
                           opts.training, opts.dropout_seed, row);
        }
        for (uint32_t t = 0; t < T; ++t) {
            double* prow = sc.probs.data() + static_cast<size_t>(t) * V;
            double row_max = *std::max_element(prow, prow + V);
            double denom = 0.0;
            for (uint32_t i = 0; i < V; ++i) {
                prow[i] = std::exp(prow[i] - row_max);
                denom += prow[i];
            }
            for (uint32_t i = 0; i < V; ++i) prow[i] /= denom;
        }
        for (uint32_t t = v; t + 1 < T; ++t) {
            uint32_t target = sc.tokens[t - v + 1];
            double p = sc.probs[static_cast<size_t>(t) * V + target];
            loss_sum += -std::log(std::max(p, 1e-300));
        }
    }

    result.loss = loss_sum / static_cast<double>(cache.total_pred);
    if (!std::isfinite(result.loss)) throw UsageError("forward: non-finite loss");
    return result;
}

// ------------------------------- backward ----------------------------------

ParamTree backward(const MicroLM& model, const AdapterState* adapters,
                   const ForwardCache& cache) {
    if (cache.state_digest != trainable_digest(model, adapters)) {
        throw UsageError("backward: stale cache (parameters changed since forward)");
    }
    const ModelConfig& cfg = model.config;
    const uint32_t d = cfg.dim;
    const uint32_t H = cfg.n_heads;
    const uint32_t hd = cfg.head_dim();
    const uint32_t hm = cfg.mlp_hidden();
    const uint32_t V = cfg.vocab_size;
    const uint32_t v = cache.vlen;
    const uint32_t L = effective_blocks(model, adapters);
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    ParamTree grads;
    for (const std::string& name : trainable_names(model, adapters)) {
        const TensorF& src = resolved_param(model, adapters, name);
        grads.insert(name, TensorF::zeros(src.dims));
    }
    GradSink sink{&grads};
    const double inv_pred = 1.0 / static_cast<double>(cache.total_pred);

    std::vector<double> dvirt;
    if (v > 0) dvirt.assign(static_cast<size_t>(v) * d, 0.0);
    double* dembed = sink.find("embed");

    for (uint32_t row = 0; row < cache.seqs.size(); ++row) {
        const SeqCache& sc = cache.seqs[row];
        const uint32_t Treal = static_cast<uint32_t>(sc.tokens.size());
        const uint32_t T = v + Treal;

        // softmax + cross entropy
        std::vector<double> dlogits(static_cast<size_t>(T) * V, 0.0);
        for (uint32_t t = v; t + 1 < T; ++t) {
            uint32_t target = sc.tokens[t - v + 1];
            const double* prow = sc.probs.data() + static_cast<size_t>(t) * V;
            double* drow = dlogits.data() + static_cast<size_t>(t) * V;
            for (uint32_t i = 0; i < V; ++i) drow[i] = prow[i] * inv_pred;
            drow[target] -= inv_pred;
        }

        std::vector<double> dy(static_cast<size_t>(T) * d, 0.0);
        {
            SiteWeights sw = site_weights(model, adapters, "head");
            linear_backward(sw, "head", sc.y.data(), dlogits.data(), T, dy.data(),
                            sink, &sc.head_lora);
        }

        std::vector<double> dh(static_cast<size_t>(T) * d, 0.0);
        layernorm_backward(sc.xf.data(),
                           resolved_param(model, adapters, "out.ln.g").data.data(),
                           sc.muf.data(), sc.rsf.data(), dy.data(), dh.data(),
                           sink.find("out.ln.g"), sink.find("out.ln.b"), T, d);

        for (int32_t b = static_cast<int32_t>(L) - 1; b >= 0; --b) {
            const BlockCache& bc = sc.blocks[b];
            BlockNames n = block_names(static_cast<uint32_t>(b));

            // MLP half: x3 = x2 + gelu(m W1^T) W2^T
            std::vector<double> dg(static_cast<size_t>(T) * hm, 0.0);
            {
                SiteWeights sw = site_weights(model, adapters, n.w2);
                auto it = bc.lora.find(n.w2);
                linear_backward(sw, n.w2, bc.g.data(), dh.data(), T, dg.data(), sink,
                                it == bc.lora.end() ? nullptr : &it->second);
            }
            std::vector<double> du1(static_cast<size_t>(T) * hm);
            for (size_t i = 0; i < du1.size(); ++i) du1[i] = dg[i] * gelu_grad(bc.u1[i]);
            std::vector<double> dm(static_cast<size_t>(T) * d, 0.0);
            {
                SiteWeights sw = site_weights(model, adapters, n.w1);
                auto it = bc.lora.find(n.w1);
                linear_backward(sw, n.w1, bc.m.data(), du1.data(), T, dm.data(), sink,
                                it == bc.lora.end() ? nullptr : &it->second);
            }
            std::vector<double> dx2 = dh;  // residual path
            layernorm_backward(bc.x2.data(),
                               resolved_param(model, adapters, n.ln2_g).data.data(),
                               bc.mu2.data(), bc.rs2.data(), dm.data(), dx2.data(),
                               sink.find(n.ln2_g), sink.find(n.ln2_b), T, d);

            // attention half: x2 = x1 + (attn ctx) Wo^T
            std::vector<double> dctx(static_cast<size_t>(T) * d, 0.0);
            {
                SiteWeights sw = site_weights(model, adapters, n.wo);
                auto it = bc.lora.find(n.wo);
                linear_backward(sw, n.wo, bc.ctx.data(), dx2.data(), T, dctx.data(),
                                sink, it == bc.lora.end() ? nullptr : &it->second);
            }

            std::vector<double> dq(static_cast<size_t>(T) * d, 0.0);
            std::vector<double> dk(static_cast<size_t>(T) * d, 0.0);
            std::vector<double> dv(static_cast<size_t>(T) * d, 0.0);
            std::vector<double> dprow(T);
            for (uint32_t head = 0; head < H; ++head) {
                size_t off = static_cast<size_t>(head) * hd;
                const double* probs = bc.probs.data() + static_cast<size_t>(head) * T * T;
                for (uint32_t t = 0; t < T; ++t) {
                    const double* prow = probs + static_cast<size_t>(t) * T;
                    const double* dct = dctx.data() + static_cast<size_t>(t) * d + off;
                    double dot = 0.0;
                    for (uint32_t u = 0; u <= t; ++u) {
                        const double* vu = bc.v.data() + static_cast<size_t>(u) * d + off;
                        double dp = 0.0;
                        for (uint32_t i = 0; i < hd; ++i) dp += dct[i] * vu[i];
                        dprow[u] = dp;
                        dot += dp * prow[u];
                        double* dvu = dv.data() + static_cast<size_t>(u) * d + off;
                        double p = prow[u];
                        for (uint32_t i = 0; i < hd; ++i) dvu[i] += p * dct[i];
                    }
                    double* dqt = dq.data() + static_cast<size_t>(t) * d + off;
                    const double* qt = bc.q.data() + static_cast<size_t>(t) * d + off;
                    for (uint32_t u = 0; u <= t; ++u) {
                        double ds = prow[u] * (dprow[u] - dot) * inv_sqrt_hd;
                        if (ds == 0.0) continue;
                        const double* ku = bc.k.data() + static_cast<size_t>(u) * d + off;
                        double* dku = dk.data() + static_cast<size_t>(u) * d + off;
                        for (uint32_t i = 0; i < hd; ++i) {
                            dqt[i] += ds * ku[i];
                            dku[i] += ds * qt[i];
                        }
                    }
                }
            }

            std::vector<double> da(static_cast<size_t>(T) * d, 0.0);
            for (auto [name, dsrc] : {std::pair{&n.wq, &dq}, {&n.wk, &dk}, {&n.wv, &dv}}) {
                SiteWeights sw = site_weights(model, adapters, *name);
                auto it = bc.lora.find(*name);
                linear_backward(sw, *name, bc.a.data(), dsrc->data(), T, da.data(),
                                sink, it == bc.lora.end() ? nullptr : &it->second);
            }

            std::vector<double> dx1 = dx2;  // residual path
            layernorm_backward(bc.x1.data(),
                               resolved_param(model, adapters, n.ln1_g).data.data(),
                               bc.mu1.data(), bc.rs1.data(), da.data(), dx1.data(),
                               sink.find(n.ln1_g), sink.find(n.ln1_b), T, d);
            dh = std::move(dx1);
        }

        // embedding rows
        for (uint32_t j = 0; j < v; ++j) {
            const double* src = dh.data() + static_cast<size_t>(j) * d;
            double* dst = dvirt.data() + static_cast<size_t>(j) * d;
            for (uint32_t i = 0; i < d; ++i) dst[i] += src[i];
        }
        if (dembed) {
            for (uint32_t j = 0; j < Treal; ++j) {
                const double* src = dh.data() + static_cast<size_t>(v + j) * d;
                double* dst = dembed + static_cast<size_t>(sc.tokens[j]) * d;
                for (uint32_t i = 0; i < d; ++i) dst[i] += src[i];
            }
        }
    }

    // virtual rows into prompt / p-tuning parameters
    if (v > 0 && adapters) {
        if (adapters->spec.kind == AdapterKind::Prompt) {
            double* dp = sink.find("prompt.emb");
            for (size_t i = 0; i < dvirt.size(); ++i) dp[i] += dvirt[i];
        } else if (adapters->spec.kind == AdapterKind::Ptuning) {
            const TensorF& seed = adapters->params.get("ptuning.seed");
            const TensorF& w1 = adapters->params.get("ptuning.mlp.w1");
            const TensorF& w2 = adapters->params.get("ptuning.mlp.w2");
            uint32_t hidden = w1.dims[0];
            double* dseed = sink.find("ptuning.seed");
            double* dw1 = sink.find("ptuning.mlp.w1");
            double* db1 = sink.find("ptuning.mlp.b1");
            double* dw2 = sink.find("ptuning.mlp.w2");
            double* db2 = sink.find("ptuning.mlp.b2");
            for (uint32_t j = 0; j < v; ++j) {
                const double* de = dvirt.data() + static_cast<size_t>(j) * d;
                const double* tj = cache.pt_t.data() + static_cast<size_t>(j) * hidden;
                const double* sj = seed.data.data() + static_cast<size_t>(j) * d;
                for (uint32_t i = 0; i < d; ++i) {
                    db2[i] += de[i];
                    double* w2r = dw2 + static_cast<size_t>(i) * hidden;
                    for (uint32_t hh = 0; hh < hidden; ++hh) w2r[hh] += de[i] * tj[hh];
                }
                for (uint32_t hh = 0; hh < hidden; ++hh) {
                    double dt = 0.0;
                    for (uint32_t i = 0; i < d; ++i) {
                        dt += de[i] * w2.data[static_cast<size_t>(i) * hidden + hh];
                    }
                    double dz = dt * (1.0 - tj[hh] * tj[hh]);
                    db1[hh] += dz;
                    double* w1r = dw1 + static_cast<size_t>(hh) * d;
                    const double* w1src = w1.data.data() + static_cast<size_t>(hh) * d;
                    double* dsj = dseed + static_cast<size_t>(j) * d;
                    for (uint32_t i = 0; i < d; ++i) {
                        w1r[i] += dz * sj[i];
                        dsj[i] += dz * w1src[i];
                    }
                }
            }
        }
    }

    if (!grads.all_finite()) throw UsageError("backward: non-finite gradient");
    return grads;
}

// ------------------------------ other ops ----------------------------------

double finite_diff_grad(const MicroLM& model, const AdapterState* adapters,
                        const TokenBatch& batch, const std::string& name,
                        size_t index, double h, const ForwardOptions& opts) {
    if (h == 0.0) throw UsageError("finite_diff_grad: h must be nonzero");
    auto names = trainable_names(model, adapters);
    if (!std::binary_search(names.begin(), names.end(), name)) {
        throw UsageError("finite_diff_grad: '" + name + "' is not trainable");
    }
    MicroLM m = model;
    AdapterState ad;
    const AdapterState* ad_ptr = adapters;
    double* slot = nullptr;
    if (adapters && adapters->params.has(name)) {
        ad = *adapters;
        slot = &ad.params.get_mut(name).data.at(index);
        ad_ptr = &ad;
    } else {
        slot = &m.base.get_mut(name).data.at(index);
    }
    double orig = *slot;
    *slot = orig + h;
    double up = forward_loss(m, ad_ptr, batch, opts).loss;
    *slot = orig - h;
    double down = forward_loss(m, ad_ptr, batch, opts).loss;
    *slot = orig;
    return (up - down) / (2.0 * h);
}

ParamTree sgd_step(const ParamTree& params, const ParamTree& grads, double lr) {
    if (lr < 0.0) throw UsageError("sgd_step: negative learning rate");
    require_congruent(params, grads, "sgd_step");
    return tree_axpy(params, grads, -lr);
}

ParamTree round_half(const ParamTree& params, CostLedger* ledger) {
    ParamTree out = params;
    for (auto& [name, t] : out.entries_mut()) {
        for (size_t i = 0; i < t.data.size(); ++i) {
            bool clamped = false;
            t.data[i] = round_to_half(t.data[i], &clamped);
            if (clamped && ledger) {
                ledger->warn("half-precision clamp in '" + name + "' at index " +
                             std::to_string(i));
            }
        }
    }
    return out;
}

uint64_t matmul_flops(uint64_t m, uint64_t n, uint64_t k) { return 2 * m * n * k; }

uint64_t count_flops(const ModelConfig& config, const AdapterSpec* spec,
                     uint32_t batch_rows, uint32_t batch_cols) {
    if (batch_rows == 0 || batch_cols == 0) throw UsageError("count_flops: empty batch");
    const uint64_t d = config.dim;
    const uint64_t hm = config.mlp_hidden();
    const uint64_t V = config.vocab_size;
    uint64_t v = 0;
    uint64_t blocks = config.n_blocks;
    uint64_t lora_r = 0;
    std::vector<std::string> lora_targets;
    uint64_t pt = 0;  // p-tuning MLP hidden width

    if (spec) {
        switch (spec->kind) {
            case AdapterKind::Prompt:
                v = spec->prompt.v_tokens;
                break;
            case AdapterKind::Ptuning:
                v = spec->ptuning.v_tokens;
                pt = spec->ptuning.hidden;
                break;
            case AdapterKind::Lora:
                lora_r = spec->lora.rank;
                lora_targets = spec->lora.targets.empty()
                                   ? lora_default_targets(config)
                                   : spec->lora.targets;
                break;
            case AdapterKind::Fedot: {
                ModelConfig reduced = fedot_reduced_config(config, spec->fedot);
                blocks = reduced.n_blocks;
                break;
            }
            case AdapterKind::None:
                break;
        }
    }

    const uint64_t T = v + batch_cols;
    uint64_t fwd = 0;
    // per block: q/k/v/o projections, attention scores and mixing, MLP
    fwd += blocks * (4 * matmul_flops(T, d, d) + 2 * matmul_flops(T, T, d) +
                     matmul_flops(T, hm, d) + matmul_flops(T, d, hm));
    // output head
    fwd += matmul_flops(T, V, d);
    // LoRA branches: x A^T then u B^T per target
    for (const std::string& name : lora_targets) {
        uint64_t in = d, out = d;
        if (name.find(".mlp.w1") != std::string::npos) out = hm;
        if (name.find(".mlp.w2") != std::string::npos) in = hm;
        if (name == "head") out = V;
        fwd += matmul_flops(T, lora_r, in) + matmul_flops(T, out, lora_r);
    }
    // p-tuning reparameterization MLP (runs once per forward)
    if (pt > 0) fwd += matmul_flops(v, pt, d) + matmul_flops(v, d, pt);

    fwd *= batch_rows;
    return 3 * fwd;  // backward counted as 2x forward
}

}  // namespace fedtune
