#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "paladin/corpus.hpp"
#include "paladin/error.hpp"
#include "paladin/model.hpp"
#include "paladin/rng.hpp"
#include "paladin/threads.hpp"

namespace paladin {

struct PretrainConfig {
    int steps = 1200;
    int batch = 8;
    double learning_rate = 1e-3;
    double holdout_frac = 0.05;

    void validate() const {
        if (steps < 1 || batch < 1) throw ConfigError("pretrain: steps/batch must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("pretrain: learning_rate must be > 0");
        if (!(holdout_frac >= 0.0 && holdout_frac < 0.5))
            throw ConfigError("pretrain: holdout_frac out of range");
    }
};

struct PretrainResult {
    std::vector<double> step_losses; // mean per-token nll
    double holdout_ppl = 0.0;
    int train_records = 0;
    int holdout_records = 0;
};

namespace detail {

inline void weights_add_scaled(Weights& w, const Weights& g, double alpha) {
    auto add = [alpha](Mat& a, const Mat& b) {
        axpy(int(a.size()), alpha, b.a.data(), a.a.data());
    };
    add(w.tok_emb, g.tok_emb);
    add(w.pos_emb, g.pos_emb);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        add(w.layers[l].wq, g.layers[l].wq);
        add(w.layers[l].wk, g.layers[l].wk);
        add(w.layers[l].wv, g.layers[l].wv);
        add(w.layers[l].wo, g.layers[l].wo);
        add(w.layers[l].w1, g.layers[l].w1);
        add(w.layers[l].w2, g.layers[l].w2);
    }
    add(w.head, g.head);
}

struct WeightsAdam {
    double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Weights m, v;
    long t = 0;

    WeightsAdam(double lr_in, const ModelConfig& cfg)
        : lr(lr_in), m(Weights::zeros(cfg)), v(Weights::zeros(cfg)) {}

    void step(Weights& params, Weights& grads) {
        t += 1;
        const double c1 = 1.0 - std::pow(b1, double(t));
        const double c2 = 1.0 - std::pow(b2, double(t));
        auto collect = [](Weights& w) {
            std::vector<Mat*> out;
            w.for_each([&](Mat& mat) { out.push_back(&mat); });
            return out;
        };
        const std::vector<Mat*> ps = collect(params), gs = collect(grads), ms = collect(m),
                                vs = collect(v);
        for (size_t i = 0; i < ps.size(); ++i)
            for (size_t j = 0; j < ps[i]->size(); ++j) {
                const double g = gs[i]->a[j];
                ms[i]->a[j] = b1 * ms[i]->a[j] + (1.0 - b1) * g;
                vs[i]->a[j] = b2 * vs[i]->a[j] + (1.0 - b2) * g * g;
                ps[i]->a[j] -= lr * (ms[i]->a[j] / c1) / (std::sqrt(vs[i]->a[j] / c2) + eps);
            }
    }
};

} // namespace detail

/// Split a pretraining stream into per-record token sequences (records are
/// blank-line separated), framed BOS ... EOS and clipped to the context.
inline std::vector<std::vector<int>> pretrain_records(const std::string& corpus,
                                                      const Vocabulary& voc, int context) {
    std::vector<std::vector<int>> out;
    size_t at = 0;
    while (at < corpus.size()) {
        size_t end = corpus.find("\n\n", at);
        if (end == std::string::npos) end = corpus.size();
        if (end > at) {
            std::vector<int> ids = voc.tokenize(std::string_view(corpus).substr(at, end - at));
            if (int(ids.size()) > context) ids.resize(size_t(context));
            if (ids.size() >= 8) out.push_back(std::move(ids));
        }
        at = end + 2;
    }
    return out;
}

/// Desk-scale pretraining: Adam over all base parameters, next-token
/// cross-entropy on synthetic email records. Deterministic for a fixed
/// (config, seed): per-sample gradients reduce in index order.
inline PretrainResult pretrain_model(LanguageModel& m, const std::string& corpus,
                                     const PretrainConfig& cfg, uint64_t seed,
                                     const Vocabulary& voc = Vocabulary::standard()) {
    cfg.validate();
    std::vector<std::vector<int>> records = pretrain_records(corpus, voc, m.cfg.context);
    if (records.size() < 10) throw DataError("pretrain: corpus too small");
    Rng rng(derive_seed(seed, {0x93e7}));
    rng.shuffle(records);
    const size_t holdout = size_t(double(records.size()) * cfg.holdout_frac);
    const size_t train_n = records.size() - holdout;

    PretrainResult res;
    res.train_records = int(train_n);
    res.holdout_records = int(holdout);

    detail::WeightsAdam adam(cfg.learning_rate, m.cfg);
    std::vector<int> order(train_n);
    for (size_t i = 0; i < train_n; ++i) order[i] = int(i);
    size_t cursor = order.size(); // forces reshuffle on first step

    auto record_grad = [&](const std::vector<int>& ids, Weights& g, long& tokens) {
        std::vector<int> ctx(ids.begin(), ids.end() - 1);
        ForwardCache cache;
        const Mat logits = forward_logits(m, nullptr, ctx, &cache);
        Mat dlogits(logits.rows, logits.cols);
        double nll = 0.0;
        const int v = m.cfg.vocab;
        std::vector<double> p(size_t(v), 0.0);
        for (size_t j = 1; j < ids.size(); ++j) {
            const int row = int(j) - 1;
            std::copy(logits.row(row), logits.row(row) + v, p.begin());
            softmax_inplace(p.data(), v);
            for (int k = 0; k < v; ++k) dlogits.at(row, k) = p[size_t(k)];
            dlogits.at(row, ids[j]) -= 1.0;
            nll -= std::log(std::max(p[size_t(ids[j])], 1e-300));
        }
        backward_logits(m, nullptr, cache, dlogits, nullptr, &g, &ctx);
        tokens = long(ids.size()) - 1;
        return nll;
    };

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const std::vector<int>*> batch;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor >= order.size()) {
                Rng r2(derive_seed(seed, {0x5471, uint64_t(step), uint64_t(b)}));
                r2.shuffle(order);
                cursor = 0;
            }
            batch.push_back(&records[size_t(order[cursor])]);
            cursor += 1;
        }
        std::vector<Weights> grads(size_t(cfg.batch));
        std::vector<double> nlls(size_t(cfg.batch), 0.0);
        std::vector<long> tokens(size_t(cfg.batch), 0);
        parallel_for(cfg.batch, [&](int b) {
            grads[size_t(b)] = Weights::zeros(m.cfg);
            nlls[size_t(b)] = record_grad(*batch[size_t(b)], grads[size_t(b)], tokens[size_t(b)]);
        });
        Weights total = Weights::zeros(m.cfg);
        double nll_sum = 0.0;
        long tok_sum = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            if (!std::isfinite(nlls[size_t(b)]))
                throw TrainError("pretrain diverged: non-finite loss at step " +
                                 std::to_string(step));
            detail::weights_add_scaled(total, grads[size_t(b)], 1.0);
            nll_sum += nlls[size_t(b)];
            tok_sum += tokens[size_t(b)];
        }
        // mean per-token gradient
        Weights scaled = Weights::zeros(m.cfg);
        detail::weights_add_scaled(scaled, total, 1.0 / double(tok_sum));
        adam.step(m.w, scaled);
        res.step_losses.push_back(nll_sum / double(tok_sum));
    }

    // holdout perplexity
    double nll_sum = 0.0;
    long tok_sum = 0;
    std::vector<double> nlls(holdout, 0.0);
    std::vector<long> toks(holdout, 0);
    parallel_for(int(holdout), [&](int i) {
        const std::vector<int>& ids = records[train_n + size_t(i)];
        std::vector<int> ctx(ids.begin(), ids.end() - 1);
        const Mat logits = forward_logits(m, nullptr, ctx);
        double nll = 0.0;
        for (size_t j = 1; j < ids.size(); ++j)
            nll -= log_softmax_at(logits.row(int(j) - 1), m.cfg.vocab, ids[j]);
        nlls[size_t(i)] = nll;
        toks[size_t(i)] = long(ids.size()) - 1;
    });
    for (size_t i = 0; i < holdout; ++i) {
        nll_sum += nlls[i];
        tok_sum += toks[i];
    }
    res.holdout_ppl = tok_sum ? std::exp(nll_sum / double(tok_sum)) : 0.0;
    return res;
}

} // namespace paladin
