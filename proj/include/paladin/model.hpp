#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "paladin/error.hpp"
#include "paladin/rng.hpp"
#include "paladin/tensor.hpp"
#include "paladin/vocab.hpp"

namespace paladin {

struct ModelConfig {
    int layers = 2;
    int width = 64;
    int heads = 2;
    int context = 128;
    int vocab = 104;
    int mlp_mult = 4;

    int head_dim() const { return width / heads; }
    int mlp_dim() const { return mlp_mult * width; }

    void validate() const {
        if (layers < 1 || width < 2 || heads < 1 || context < 4 || vocab < 5)
            throw ConfigError("model: degenerate dimensions");
        if (width % heads != 0) throw ConfigError("model: width must be divisible by heads");
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Projection matrices that can carry a low-rank adapter.
enum class AdapterTarget : uint32_t {
    attn_q = 0,
    attn_k = 1,
    attn_v = 2,
    attn_o = 3,
    mlp_fc1 = 4,
    mlp_fc2 = 5,
};

inline const char* adapter_target_name(AdapterTarget t) {
    switch (t) {
        case AdapterTarget::attn_q: return "attn_q";
        case AdapterTarget::attn_k: return "attn_k";
        case AdapterTarget::attn_v: return "attn_v";
        case AdapterTarget::attn_o: return "attn_o";
        case AdapterTarget::mlp_fc1: return "mlp_fc1";
        case AdapterTarget::mlp_fc2: return "mlp_fc2";
    }
    return "?";
}

inline std::optional<AdapterTarget> adapter_target_from_name(std::string_view s) {
    for (uint32_t i = 0; i <= 5; ++i) {
        const auto t = AdapterTarget(i);
        if (s == adapter_target_name(t)) return t;
    }
    return std::nullopt;
}

inline void adapter_target_dims(const ModelConfig& cfg, AdapterTarget t, int& in, int& out) {
    switch (t) {
        case AdapterTarget::mlp_fc1:
            in = cfg.width;
            out = cfg.mlp_dim();
            return;
        case AdapterTarget::mlp_fc2:
            in = cfg.mlp_dim();
            out = cfg.width;
            return;
        default:
            in = cfg.width;
            out = cfg.width;
            return;
    }
}

struct LayerWeights {
    Mat wq, wk, wv, wo; // width x width
    Mat w1;             // mlp_dim x width
    Mat w2;             // width x mlp_dim
};

struct Weights {
    Mat tok_emb; // vocab x width
    Mat pos_emb; // context x width
    Mat head;    // vocab x width
    std::vector<LayerWeights> layers;

    static Weights zeros(const ModelConfig& cfg) {
        Weights w;
        w.tok_emb = Mat(cfg.vocab, cfg.width);
        w.pos_emb = Mat(cfg.context, cfg.width);
        w.head = Mat(cfg.vocab, cfg.width);
        w.layers.resize(size_t(cfg.layers));
        for (auto& l : w.layers) {
            l.wq = Mat(cfg.width, cfg.width);
            l.wk = Mat(cfg.width, cfg.width);
            l.wv = Mat(cfg.width, cfg.width);
            l.wo = Mat(cfg.width, cfg.width);
            l.w1 = Mat(cfg.mlp_dim(), cfg.width);
            l.w2 = Mat(cfg.width, cfg.mlp_dim());
        }
        return w;
    }

    template <class F>
    void for_each(F&& f) {
        f(tok_emb);
        f(pos_emb);
        for (auto& l : layers) {
            f(l.wq);
            f(l.wk);
            f(l.wv);
            f(l.wo);
            f(l.w1);
            f(l.w2);
        }
        f(head);
    }
};

/// Frozen base model. Only adapters change after pretraining.
struct LanguageModel {
    ModelConfig cfg;
    Weights w;

    static LanguageModel init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        LanguageModel m;
        m.cfg = cfg;
        m.w = Weights::zeros(cfg);
        Rng rng(derive_seed(seed, {0x10de1}));
        auto fill = [&](Mat& mat, double sigma) {
            for (double& x : mat.a) x = rng.normal(0.0, sigma);
        };
        fill(m.w.tok_emb, 0.1);
        fill(m.w.pos_emb, 0.1);
        for (auto& l : m.w.layers) {
            const double s = 1.0 / std::sqrt(double(cfg.width));
            fill(l.wq, s);
            fill(l.wk, s);
            fill(l.wv, s);
            fill(l.wo, s / std::sqrt(2.0 * cfg.layers));
            fill(l.w1, s);
            fill(l.w2, 1.0 / std::sqrt(double(cfg.mlp_dim()) * 2.0 * cfg.layers));
        }
        fill(m.w.head, 1.0 / std::sqrt(double(cfg.width)));
        return m;
    }
};

struct AdapterPair {
    Mat a; // rank x in
    Mat b; // out x rank
};

/// Low-rank adapters: effective weight = base + B*A. The B side starts at
/// zero so a fresh adapter set leaves the model behavior untouched.
struct AdapterSet {
    int rank = 0;
    std::vector<AdapterTarget> targets;
    std::vector<std::vector<AdapterPair>> layers; // [layer][target index]

    static std::vector<AdapterTarget> default_targets() {
        return {AdapterTarget::attn_q, AdapterTarget::attn_v};
    }

    static AdapterSet init(const ModelConfig& cfg, int rank, std::vector<AdapterTarget> targets,
                           uint64_t seed) {
        if (rank < 1) throw ConfigError("adapter rank must be >= 1");
        AdapterSet s;
        s.rank = rank;
        s.targets = std::move(targets);
        s.layers.resize(size_t(cfg.layers));
        Rng rng(derive_seed(seed, {0xada9}));
        for (auto& lt : s.layers) {
            lt.resize(s.targets.size());
            for (size_t ti = 0; ti < s.targets.size(); ++ti) {
                int in = 0, out = 0;
                adapter_target_dims(cfg, s.targets[ti], in, out);
                lt[ti].a = Mat(rank, in);
                lt[ti].b = Mat(out, rank);
                const double sigma = 1.0 / std::sqrt(double(in));
                for (double& x : lt[ti].a.a) x = rng.normal(0.0, sigma);
                // b stays zero: instrumented forward == vanilla forward exactly
            }
        }
        return s;
    }

    static AdapterSet zeros_like(const AdapterSet& other) {
        AdapterSet s;
        s.rank = other.rank;
        s.targets = other.targets;
        s.layers.resize(other.layers.size());
        for (size_t l = 0; l < other.layers.size(); ++l) {
            s.layers[l].resize(other.layers[l].size());
            for (size_t t = 0; t < other.layers[l].size(); ++t) {
                s.layers[l][t].a = Mat(other.layers[l][t].a.rows, other.layers[l][t].a.cols);
                s.layers[l][t].b = Mat(other.layers[l][t].b.rows, other.layers[l][t].b.cols);
            }
        }
        return s;
    }

    template <class F>
    void for_each(F&& f) {
        for (auto& lt : layers)
            for (auto& p : lt) {
                f(p.a);
                f(p.b);
            }
    }

    template <class F>
    void for_each(F&& f) const {
        for (const auto& lt : layers)
            for (const auto& p : lt) {
                f(p.a);
                f(p.b);
            }
    }

    void zero() {
        for_each([](Mat& m) { m.zero(); });
    }

    size_t param_count() const {
        size_t n = 0;
        for_each([&](const Mat& m) { n += m.size(); });
        return n;
    }

    double l2_norm() const {
        double s = 0.0;
        for_each([&](const Mat& m) { s += l2_norm_sq(m.a); });
        return std::sqrt(s);
    }

    bool all_finite() const {
        bool ok = true;
        for_each([&](const Mat& m) {
            for (double x : m.a)
                if (!std::isfinite(x)) ok = false;
        });
        return ok;
    }

    /// this += alpha * g
    void add_scaled(const AdapterSet& g, double alpha) {
        for (size_t l = 0; l < layers.size(); ++l)
            for (size_t t = 0; t < layers[l].size(); ++t) {
                axpy(int(layers[l][t].a.size()), alpha, g.layers[l][t].a.a.data(),
                     layers[l][t].a.a.data());
                axpy(int(layers[l][t].b.size()), alpha, g.layers[l][t].b.a.data(),
                     layers[l][t].b.a.data());
            }
    }

    /// Frobenius norm of the effective weight delta sum_targets ||B*A||_F,
    /// i.e. ||theta* - theta|| restricted to the adapted projections.
    double delta_norm() const {
        double s = 0.0;
        for (const auto& lt : layers)
            for (const auto& p : lt) {
                for (int r = 0; r < p.b.rows; ++r)
                    for (int c = 0; c < p.a.cols; ++c) {
                        double v = 0.0;
                        for (int k = 0; k < rank; ++k) v += p.b.at(r, k) * p.a.at(k, c);
                        s += v * v;
                    }
            }
        return std::sqrt(s);
    }

    const AdapterPair* find(size_t layer, AdapterTarget t) const {
        for (size_t ti = 0; ti < targets.size(); ++ti)
            if (targets[ti] == t) return &layers[layer][ti];
        return nullptr;
    }

    AdapterPair* find(size_t layer, AdapterTarget t) {
        for (size_t ti = 0; ti < targets.size(); ++ti)
            if (targets[ti] == t) return &layers[layer][ti];
        return nullptr;
    }
};

/// Merge adapters into a copy of the base weights (what a vendor downloads).
inline LanguageModel merge_adapters(const LanguageModel& m, const AdapterSet& ad) {
    LanguageModel out = m;
    for (size_t l = 0; l < ad.layers.size(); ++l) {
        for (size_t ti = 0; ti < ad.targets.size(); ++ti) {
            const AdapterPair& p = ad.layers[l][ti];
            Mat* w = nullptr;
            switch (ad.targets[ti]) {
                case AdapterTarget::attn_q: w = &out.w.layers[l].wq; break;
                case AdapterTarget::attn_k: w = &out.w.layers[l].wk; break;
                case AdapterTarget::attn_v: w = &out.w.layers[l].wv; break;
                case AdapterTarget::attn_o: w = &out.w.layers[l].wo; break;
                case AdapterTarget::mlp_fc1: w = &out.w.layers[l].w1; break;
                case AdapterTarget::mlp_fc2: w = &out.w.layers[l].w2; break;
            }
            for (int r = 0; r < w->rows; ++r)
                for (int c = 0; c < w->cols; ++c) {
                    double v = 0.0;
                    for (int k = 0; k < ad.rank; ++k) v += p.b.at(r, k) * p.a.at(k, c);
                    w->at(r, c) += v;
                }
        }
    }
    return out;
}

namespace detail {

constexpr double kRmsEps = 1e-8;

/// y = x / rms(x); returns the cached inverse rms.
inline double rmsnorm(const double* x, double* y, int n) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += x[i] * x[i];
    const double g = 1.0 / std::sqrt(ms / double(n) + kRmsEps);
    for (int i = 0; i < n; ++i) y[i] = x[i] * g;
    return g;
}

/// dx += backward of rmsnorm given dy, input x and cached g.
inline void rmsnorm_backward(const double* x, const double* dy, double g, double* dx, int n) {
    double dycx = 0.0;
    for (int i = 0; i < n; ++i) dycx += dy[i] * x[i];
    const double c = g * g * g * dycx / double(n);
    for (int i = 0; i < n; ++i) dx[i] += g * dy[i] - c * x[i];
}

/// y = (W + B A) x, computed additively so B == 0 reproduces base exactly.
inline void linear(const Mat& w, const AdapterPair* ad, const double* x, double* y,
                   std::vector<double>& scratch) {
    matvec(w, x, y);
    if (ad && ad->b.rows > 0) {
        scratch.resize(size_t(ad->a.rows));
        matvec(ad->a, x, scratch.data());
        matvec_add(ad->b, scratch.data(), y);
    }
}

} // namespace detail

/// Per-sequence activation cache for one backward pass.
struct ForwardCache {
    int t_len = 0;
    struct LayerCache {
        Mat in1, normed1; // block input / rmsnormed
        std::vector<double> g1;
        Mat q, k, v, ao;
        std::vector<Mat> probs; // per head, T x T lower-triangular
        Mat in2, normed2;
        std::vector<double> g2;
        Mat m1; // pre-relu mlp hidden
    };
    std::vector<LayerCache> layers;
    Mat fin, fnormed;
    std::vector<double> gf;
};

/// Teacher-forced forward: one logit row per context position.
/// With null or zero adapters the output equals the vanilla model exactly.
inline Mat forward_logits(const LanguageModel& m, const AdapterSet* ad,
                          const std::vector<int>& ids, ForwardCache* cache = nullptr) {
    const ModelConfig& cfg = m.cfg;
    const int t_len = int(ids.size());
    if (t_len == 0) throw DataError("forward: empty context");
    if (t_len > cfg.context)
        throw ContextOverflowError("forward: context length " + std::to_string(t_len) +
                                   " exceeds maximum " + std::to_string(cfg.context));
    const int d = cfg.width;
    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

    Mat x(t_len, d);
    for (int t = 0; t < t_len; ++t) {
        const double* te = m.w.tok_emb.row(ids[size_t(t)]);
        const double* pe = m.w.pos_emb.row(t);
        double* xt = x.row(t);
        for (int i = 0; i < d; ++i) xt[i] = te[i] + pe[i];
    }

    if (cache) {
        cache->t_len = t_len;
        cache->layers.assign(size_t(cfg.layers), {});
    }

    std::vector<double> scratch;
    Mat normed(t_len, d), q(t_len, d), k(t_len, d), v(t_len, d), ao(t_len, d), tmp(t_len, d);
    Mat m1(t_len, cfg.mlp_dim());

    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = m.w.layers[size_t(l)];
        auto* lc = cache ? &cache->layers[size_t(l)] : nullptr;
        if (lc) {
            lc->in1 = x;
            lc->g1.resize(size_t(t_len));
            lc->probs.assign(size_t(cfg.heads), Mat(t_len, t_len));
        }
        for (int t = 0; t < t_len; ++t) {
            const double g = detail::rmsnorm(x.row(t), normed.row(t), d);
            if (lc) lc->g1[size_t(t)] = g;
        }
        const AdapterPair* aq = ad ? ad->find(size_t(l), AdapterTarget::attn_q) : nullptr;
        const AdapterPair* ak = ad ? ad->find(size_t(l), AdapterTarget::attn_k) : nullptr;
        const AdapterPair* av = ad ? ad->find(size_t(l), AdapterTarget::attn_v) : nullptr;
        const AdapterPair* ao_ad = ad ? ad->find(size_t(l), AdapterTarget::attn_o) : nullptr;
        for (int t = 0; t < t_len; ++t) {
            detail::linear(lw.wq, aq, normed.row(t), q.row(t), scratch);
            detail::linear(lw.wk, ak, normed.row(t), k.row(t), scratch);
            detail::linear(lw.wv, av, normed.row(t), v.row(t), scratch);
        }
        std::vector<double> srow(size_t(t_len), 0.0);
        for (int h = 0; h < cfg.heads; ++h) {
            const int hs = h * hd;
            for (int t = 0; t < t_len; ++t) {
                for (int u = 0; u <= t; ++u)
                    srow[size_t(u)] = dot(q.row(t) + hs, k.row(u) + hs, hd) * inv_sqrt_hd;
                softmax_inplace(srow.data(), t + 1);
                double* out = ao.row(t) + hs;
                for (int j = 0; j < hd; ++j) out[j] = 0.0;
                for (int u = 0; u <= t; ++u) axpy(hd, srow[size_t(u)], v.row(u) + hs, out);
                if (lc)
                    for (int u = 0; u <= t; ++u) lc->probs[size_t(h)].at(t, u) = srow[size_t(u)];
            }
        }
        for (int t = 0; t < t_len; ++t) {
            detail::linear(lw.wo, ao_ad, ao.row(t), tmp.row(t), scratch);
            axpy(d, 1.0, tmp.row(t), x.row(t));
        }
        if (lc) {
            lc->normed1 = normed;
            lc->q = q;
            lc->k = k;
            lc->v = v;
            lc->ao = ao;
            lc->in2 = x;
            lc->g2.resize(size_t(t_len));
        }
        const AdapterPair* a1 = ad ? ad->find(size_t(l), AdapterTarget::mlp_fc1) : nullptr;
        const AdapterPair* a2 = ad ? ad->find(size_t(l), AdapterTarget::mlp_fc2) : nullptr;
        for (int t = 0; t < t_len; ++t) {
            const double g = detail::rmsnorm(x.row(t), normed.row(t), d);
            if (lc) lc->g2[size_t(t)] = g;
            detail::linear(lw.w1, a1, normed.row(t), m1.row(t), scratch);
            std::vector<double> relu_row(size_t(cfg.mlp_dim()), 0.0);
            for (int i = 0; i < cfg.mlp_dim(); ++i)
                relu_row[size_t(i)] = m1.row(t)[i] > 0.0 ? m1.row(t)[i] : 0.0;
            detail::linear(lw.w2, a2, relu_row.data(), tmp.row(t), scratch);
            axpy(d, 1.0, tmp.row(t), x.row(t));
        }
        if (lc) {
            lc->normed2 = normed;
            lc->m1 = m1;
        }
    }

    if (cache) {
        cache->fin = x;
        cache->gf.resize(size_t(t_len));
        cache->fnormed = Mat(t_len, d);
    }
    Mat logits(t_len, cfg.vocab);
    for (int t = 0; t < t_len; ++t) {
        double* nrow = cache ? cache->fnormed.row(t) : normed.row(t);
        const double g = detail::rmsnorm(x.row(t), nrow, d);
        if (cache) cache->gf[size_t(t)] = g;
        matvec(m.w.head, nrow, logits.row(t));
    }
    return logits;
}

namespace detail {

/// Backward of an adapted linear layer. Accumulates adapter grads (if the
/// target carries one), optional base-weight grads, and dx += W_eff^T dy.
inline void linear_backward(const Mat& w, const AdapterPair* ad, AdapterPair* gad, Mat* gw,
                            const double* x, const double* dy, double* dx,
                            std::vector<double>& scr_r, std::vector<double>& scr_r2) {
    mat_tvec_add(w, dy, dx);
    if (gw) outer_add(*gw, dy, x);
    if (ad && ad->b.rows > 0) {
        const int r = ad->a.rows;
        scr_r.resize(size_t(r));
        scr_r2.resize(size_t(r));
        matvec(ad->a, x, scr_r.data()); // A x
        // B^T dy
        for (int i = 0; i < r; ++i) scr_r2[size_t(i)] = 0.0;
        for (int row = 0; row < ad->b.rows; ++row) {
            const double c = dy[row];
            if (c == 0.0) continue;
            axpy(r, c, ad->b.row(row), scr_r2.data());
        }
        if (gad) {
            outer_add(gad->b, dy, scr_r.data());
            outer_add(gad->a, scr_r2.data(), x);
        }
        // dx += A^T (B^T dy)
        mat_tvec_add(ad->a, scr_r2.data(), dx);
    }
}

} // namespace detail

/// Reverse pass from per-position logit gradients. Adapter gradients go to
/// `gad` (same shapes as `ad`); base gradients only when `gbase` is given
/// (pretraining). During insertion the base stays bit-identical.
inline void backward_logits(const LanguageModel& m, const AdapterSet* ad,
                            const ForwardCache& cache, const Mat& dlogits, AdapterSet* gad,
                            Weights* gbase = nullptr, const std::vector<int>* ids = nullptr) {
    const ModelConfig& cfg = m.cfg;
    const int t_len = cache.t_len;
    const int d = cfg.width;
    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

    std::vector<double> scr1, scr2;
    Mat dx(t_len, d);

    // head + final norm
    Mat dn(t_len, d);
    for (int t = 0; t < t_len; ++t) {
        const double* dz = dlogits.row(t);
        double* dnt = dn.row(t);
        for (int i = 0; i < d; ++i) dnt[i] = 0.0;
        bool nonzero = false;
        for (int vtok = 0; vtok < cfg.vocab; ++vtok)
            if (dz[vtok] != 0.0) {
                nonzero = true;
                break;
            }
        if (!nonzero) continue;
        mat_tvec_add(m.w.head, dz, dnt);
        if (gbase) outer_add(gbase->head, dz, cache.fnormed.row(t));
        detail::rmsnorm_backward(cache.fin.row(t), dnt, cache.gf[size_t(t)], dx.row(t), d);
    }

    Mat dnormed(t_len, d), dq(t_len, d), dk(t_len, d), dv(t_len, d), dao(t_len, d);
    Mat dm1(t_len, cfg.mlp_dim());

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerWeights& lw = m.w.layers[size_t(l)];
        const auto& lc = cache.layers[size_t(l)];
        LayerWeights* glw = gbase ? &gbase->layers[size_t(l)] : nullptr;
        const AdapterPair* a1 = ad ? ad->find(size_t(l), AdapterTarget::mlp_fc1) : nullptr;
        const AdapterPair* a2 = ad ? ad->find(size_t(l), AdapterTarget::mlp_fc2) : nullptr;
        AdapterPair* ga1 = gad ? gad->find(size_t(l), AdapterTarget::mlp_fc1) : nullptr;
        AdapterPair* ga2 = gad ? gad->find(size_t(l), AdapterTarget::mlp_fc2) : nullptr;

        // MLP block: dx holds dL/d(out of layer); residual passes it through.
        dnormed.zero();
        dm1.zero();
        std::vector<double> relu_row(size_t(cfg.mlp_dim()), 0.0);
        std::vector<double> dr(size_t(cfg.mlp_dim()), 0.0);
        for (int t = 0; t < t_len; ++t) {
            const double* m1r = lc.m1.row(t);
            for (int i = 0; i < cfg.mlp_mult * d; ++i)
                relu_row[size_t(i)] = m1r[i] > 0.0 ? m1r[i] : 0.0;
            std::fill(dr.begin(), dr.end(), 0.0);
            detail::linear_backward(lw.w2, a2, ga2, glw ? &glw->w2 : nullptr, relu_row.data(),
                                    dx.row(t), dr.data(), scr1, scr2);
            double* dm1t = dm1.row(t);
            for (int i = 0; i < cfg.mlp_mult * d; ++i) dm1t[i] = m1r[i] > 0.0 ? dr[size_t(i)] : 0.0;
            detail::linear_backward(lw.w1, a1, ga1, glw ? &glw->w1 : nullptr, lc.normed2.row(t),
                                    dm1t, dnormed.row(t), scr1, scr2);
            detail::rmsnorm_backward(lc.in2.row(t), dnormed.row(t), lc.g2[size_t(t)], dx.row(t), d);
        }

        // Attention block.
        const AdapterPair* aq = ad ? ad->find(size_t(l), AdapterTarget::attn_q) : nullptr;
        const AdapterPair* ak = ad ? ad->find(size_t(l), AdapterTarget::attn_k) : nullptr;
        const AdapterPair* av = ad ? ad->find(size_t(l), AdapterTarget::attn_v) : nullptr;
        const AdapterPair* aoad = ad ? ad->find(size_t(l), AdapterTarget::attn_o) : nullptr;
        AdapterPair* gaq = gad ? gad->find(size_t(l), AdapterTarget::attn_q) : nullptr;
        AdapterPair* gak = gad ? gad->find(size_t(l), AdapterTarget::attn_k) : nullptr;
        AdapterPair* gav = gad ? gad->find(size_t(l), AdapterTarget::attn_v) : nullptr;
        AdapterPair* gao = gad ? gad->find(size_t(l), AdapterTarget::attn_o) : nullptr;

        dao.zero();
        for (int t = 0; t < t_len; ++t)
            detail::linear_backward(lw.wo, aoad, gao, glw ? &glw->wo : nullptr, lc.ao.row(t),
                                    dx.row(t), dao.row(t), scr1, scr2);

        dq.zero();
        dk.zero();
        dv.zero();
        std::vector<double> dp(size_t(t_len), 0.0), ds(size_t(t_len), 0.0);
        for (int h = 0; h < cfg.heads; ++h) {
            const int hs = h * hd;
            const Mat& probs = lc.probs[size_t(h)];
            for (int t = 0; t < t_len; ++t) {
                const double* daot = dao.row(t) + hs;
                double dsum = 0.0;
                for (int u = 0; u <= t; ++u) {
                    dp[size_t(u)] = dot(daot, lc.v.row(u) + hs, hd);
                    dsum += probs.at(t, u) * dp[size_t(u)];
                }
                for (int u = 0; u <= t; ++u) {
                    const double p = probs.at(t, u);
                    ds[size_t(u)] = p * (dp[size_t(u)] - dsum);
                    axpy(hd, p, daot, dv.row(u) + hs);
                }
                for (int u = 0; u <= t; ++u) {
                    const double c = ds[size_t(u)] * inv_sqrt_hd;
                    axpy(hd, c, lc.k.row(u) + hs, dq.row(t) + hs);
                    axpy(hd, c, lc.q.row(t) + hs, dk.row(u) + hs);
                }
            }
        }

        dnormed.zero();
        for (int t = 0; t < t_len; ++t) {
            detail::linear_backward(lw.wq, aq, gaq, glw ? &glw->wq : nullptr, lc.normed1.row(t),
                                    dq.row(t), dnormed.row(t), scr1, scr2);
            detail::linear_backward(lw.wk, ak, gak, glw ? &glw->wk : nullptr, lc.normed1.row(t),
                                    dk.row(t), dnormed.row(t), scr1, scr2);
            detail::linear_backward(lw.wv, av, gav, glw ? &glw->wv : nullptr, lc.normed1.row(t),
                                    dv.row(t), dnormed.row(t), scr1, scr2);
            detail::rmsnorm_backward(lc.in1.row(t), dnormed.row(t), lc.g1[size_t(t)], dx.row(t), d);
        }
    }

    if (gbase) {
        // dx now holds gradients w.r.t. the embedding sum.
        for (int t = 0; t < t_len; ++t) {
            axpy(d, 1.0, dx.row(t), gbase->pos_emb.row(t));
            if (ids) axpy(d, 1.0, dx.row(t), gbase->tok_emb.row((*ids)[size_t(t)]));
        }
    }
}

/// Tokenized training example: full id sequence plus the half-open index
/// range of scored (response) tokens.
struct SeqView {
    std::vector<int> ids;
    int resp_begin = 0;
    int resp_end = 0;
};

/// Frame prompt+response as BOS prompt response [EOS]. When `include_eos`
/// the terminating EOS is part of the scored span (training convention);
/// the default scores response tokens only, so NLL(prompt, "") == 0.
inline SeqView make_example(const Vocabulary& voc, std::string_view prompt,
                            std::string_view response, bool include_eos, int cutoff = 0) {
    SeqView s;
    s.ids.push_back(voc.bos());
    std::vector<int> p = voc.encode(prompt);
    s.ids.insert(s.ids.end(), p.begin(), p.end());
    s.resp_begin = int(s.ids.size());
    std::vector<int> r = voc.encode(response);
    s.ids.insert(s.ids.end(), r.begin(), r.end());
    s.resp_end = int(s.ids.size());
    s.ids.push_back(voc.eos());
    if (include_eos) s.resp_end += 1;
    if (cutoff > 0 && int(s.ids.size()) > cutoff) {
        s.ids.resize(size_t(cutoff));
        s.resp_end = std::min(s.resp_end, cutoff);
        s.resp_begin = std::min(s.resp_begin, s.resp_end);
    }
    return s;
}

/// Sum of per-step negative log-likelihoods of the scored tokens,
/// conditioned on everything before them.
inline double sequence_nll(const LanguageModel& m, const AdapterSet* ad, const Vocabulary& voc,
                           std::string_view prompt, std::string_view response,
                           bool include_eos = false) {
    const SeqView s = make_example(voc, prompt, response, include_eos);
    if (s.resp_begin >= s.resp_end) return 0.0;
    std::vector<int> ctx(s.ids.begin(), s.ids.end() - 1);
    const Mat logits = forward_logits(m, ad, ctx);
    double nll = 0.0;
    for (int j = s.resp_begin; j < s.resp_end; ++j)
        nll -= log_softmax_at(logits.row(j - 1), m.cfg.vocab, s.ids[size_t(j)]);
    return nll;
}

/// Incremental decoder with per-layer KV caches; one O(T) step per token.
class Generator {
public:
    Generator(const LanguageModel& m, const AdapterSet* ad) : m_(m), ad_(ad) {
        const ModelConfig& cfg = m.cfg;
        k_.assign(size_t(cfg.layers), Mat(cfg.context, cfg.width));
        v_.assign(size_t(cfg.layers), Mat(cfg.context, cfg.width));
    }

    int pos() const { return t_; }
    int capacity() const { return m_.cfg.context; }

    /// Feed one token, get the next-token logits.
    std::vector<double> step(int token_id) {
        const ModelConfig& cfg = m_.cfg;
        if (t_ >= cfg.context) throw ContextOverflowError("generator: context exhausted");
        const int d = cfg.width;
        const int hd = cfg.head_dim();
        const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

        std::vector<double> x(size_t(d), 0.0), normed(size_t(d), 0.0), q(size_t(d), 0.0),
            ao(size_t(d), 0.0), tmp(size_t(d), 0.0);
        std::vector<double> m1(size_t(cfg.mlp_dim()), 0.0);
        const double* te = m_.w.tok_emb.row(token_id);
        const double* pe = m_.w.pos_emb.row(t_);
        for (int i = 0; i < d; ++i) x[size_t(i)] = te[i] + pe[i];

        for (int l = 0; l < cfg.layers; ++l) {
            const LayerWeights& lw = m_.w.layers[size_t(l)];
            detail::rmsnorm(x.data(), normed.data(), d);
            const AdapterPair* aq = ad_ ? ad_->find(size_t(l), AdapterTarget::attn_q) : nullptr;
            const AdapterPair* ak = ad_ ? ad_->find(size_t(l), AdapterTarget::attn_k) : nullptr;
            const AdapterPair* av = ad_ ? ad_->find(size_t(l), AdapterTarget::attn_v) : nullptr;
            const AdapterPair* aoad = ad_ ? ad_->find(size_t(l), AdapterTarget::attn_o) : nullptr;
            detail::linear(lw.wq, aq, normed.data(), q.data(), scratch_);
            detail::linear(lw.wk, ak, normed.data(), k_[size_t(l)].row(t_), scratch_);
            detail::linear(lw.wv, av, normed.data(), v_[size_t(l)].row(t_), scratch_);
            std::vector<double> srow(size_t(t_ + 1), 0.0);
            for (int h = 0; h < cfg.heads; ++h) {
                const int hs = h * hd;
                for (int u = 0; u <= t_; ++u)
                    srow[size_t(u)] =
                        dot(q.data() + hs, k_[size_t(l)].row(u) + hs, hd) * inv_sqrt_hd;
                softmax_inplace(srow.data(), t_ + 1);
                double* out = ao.data() + hs;
                for (int j = 0; j < hd; ++j) out[j] = 0.0;
                for (int u = 0; u <= t_; ++u)
                    axpy(hd, srow[size_t(u)], v_[size_t(l)].row(u) + hs, out);
            }
            detail::linear(lw.wo, aoad, ao.data(), tmp.data(), scratch_);
            axpy(d, 1.0, tmp.data(), x.data());

            detail::rmsnorm(x.data(), normed.data(), d);
            const AdapterPair* a1 = ad_ ? ad_->find(size_t(l), AdapterTarget::mlp_fc1) : nullptr;
            const AdapterPair* a2 = ad_ ? ad_->find(size_t(l), AdapterTarget::mlp_fc2) : nullptr;
            detail::linear(lw.w1, a1, normed.data(), m1.data(), scratch_);
            for (double& h : m1)
                if (h < 0.0) h = 0.0;
            detail::linear(lw.w2, a2, m1.data(), tmp.data(), scratch_);
            axpy(d, 1.0, tmp.data(), x.data());
        }
        detail::rmsnorm(x.data(), normed.data(), d);
        std::vector<double> logits(size_t(cfg.vocab));
        matvec(m_.w.head, normed.data(), logits.data());
        t_ += 1;
        return logits;
    }

private:
    const LanguageModel& m_;
    const AdapterSet* ad_;
    std::vector<Mat> k_, v_;
    std::vector<double> scratch_;
    int t_ = 0;
};

inline int argmax_token(const std::vector<double>& logits) {
    int best = 0;
    for (int i = 1; i < int(logits.size()); ++i)
        if (logits[size_t(i)] > logits[size_t(best)]) best = i;
    return best;
}

inline int sample_token(const std::vector<double>& logits, double temperature, Rng& rng) {
    const int n = int(logits.size());
    std::vector<double> p(logits);
    for (double& z : p) z /= temperature;
    softmax_inplace(p.data(), n);
    const double r = rng.real01();
    double c = 0.0;
    for (int i = 0; i < n; ++i) {
        c += p[size_t(i)];
        if (r < c) return i;
    }
    return n - 1;
}

struct GenerateOptions {
    double temperature = 1.0; // > 0
    int max_len = 96;
    bool greedy = false;
};

/// Decode a response for `prompt`. Deterministic for a fixed seed; stops at
/// EOS, max_len, or the context limit.
inline std::string generate_response(const LanguageModel& m, const AdapterSet* ad,
                                     const Vocabulary& voc, std::string_view prompt,
                                     const GenerateOptions& opt, uint64_t seed) {
    if (!opt.greedy && !(opt.temperature > 0.0)) throw ConfigError("temperature must be > 0");
    Generator gen(m, ad);
    std::vector<int> prompt_ids;
    prompt_ids.push_back(voc.bos());
    const std::vector<int> p = voc.encode(prompt);
    prompt_ids.insert(prompt_ids.end(), p.begin(), p.end());
    if (int(prompt_ids.size()) >= m.cfg.context)
        throw ContextOverflowError("generate: prompt fills the context");
    std::vector<double> logits;
    for (int id : prompt_ids) logits = gen.step(id);

    Rng rng(derive_seed(seed, {0x9e4e}));
    std::vector<int> out;
    for (int i = 0; i < opt.max_len && gen.pos() < gen.capacity(); ++i) {
        const int next = opt.greedy ? argmax_token(logits) : sample_token(logits, opt.temperature, rng);
        if (next == voc.eos()) break;
        out.push_back(next);
        if (gen.pos() >= gen.capacity()) break;
        logits = gen.step(next);
    }
    return voc.detokenize(out);
}

inline std::string sample_response(const LanguageModel& m, const AdapterSet* ad,
                                   const Vocabulary& voc, std::string_view prompt,
                                   double temperature, int max_len, uint64_t seed) {
    GenerateOptions opt;
    opt.temperature = temperature;
    opt.max_len = max_len;
    return generate_response(m, ad, voc, prompt, opt, seed);
}

inline std::string greedy_response(const LanguageModel& m, const AdapterSet* ad,
                                   const Vocabulary& voc, std::string_view prompt,
                                   int max_len = 96) {
    GenerateOptions opt;
    opt.greedy = true;
    opt.max_len = max_len;
    return generate_response(m, ad, voc, prompt, opt, 0);
}

} // namespace paladin
