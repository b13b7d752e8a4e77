#pragma once

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "paladin/corpus.hpp"
#include "paladin/detection.hpp"
#include "paladin/error.hpp"
#include "paladin/metrics.hpp"
#include "paladin/model.hpp"
#include "paladin/rng.hpp"
#include "paladin/threads.hpp"

namespace paladin {

enum class Strategy { base, core, pro };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::base: return "base";
        case Strategy::core: return "core";
        case Strategy::pro: return "pro";
    }
    return "?";
}

inline Strategy strategy_from_name(std::string_view s) {
    if (s == "base") return Strategy::base;
    if (s == "core") return Strategy::core;
    if (s == "pro") return Strategy::pro;
    throw ConfigError("unknown strategy: " + std::string(s));
}

inline constexpr double kReferenceLearningRate = 1e-5;

struct TrainConfig {
    Strategy strategy = Strategy::base;
    int rank = 8;
    std::vector<AdapterTarget> targets = AdapterSet::default_targets();
    double learning_rate = kReferenceLearningRate;
    int batch = 2;
    int grad_accum = 4; // 1 for pro
    int cutoff_len = 1024;
    int epochs = 10;
    int cold_start_epochs = 1;  // pro (and optionally core)
    double cold_start_lr = 0.0; // 0 = same as learning_rate
    int group_size = 12;        // pro only
    double beta = 0.1;         // core/pro KL strength
    double gamma = 0.05;       // pro KL weight
    double clip_epsilon = 10.0;
    std::string optimizer = "sgd"; // or "adam"
    double gen_temperature = 1.0;  // pro group sampling
    int max_gen_len = 80;

    static TrainConfig defaults(Strategy s) {
        TrainConfig c;
        c.strategy = s;
        if (s == Strategy::pro) c.grad_accum = 1;
        // pure preference training by default for core; a nonzero value
        // enables the same warm-up the pro strategy uses (see train_core)
        if (s == Strategy::core) c.cold_start_epochs = 0;
        return c;
    }

    int effective_batch() const { return batch * grad_accum; }

    void validate() const {
        if (rank < 1) throw ConfigError("train.rank: must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be > 0");
        if (batch < 1 || grad_accum < 1) throw ConfigError("train.batch: must be >= 1");
        if (epochs < 0) throw ConfigError("train.epochs: must be >= 0");
        if (strategy == Strategy::pro && group_size < 2)
            throw ConfigError("train.group_size: must be >= 2 for pro");
        if (!(beta > 0.0)) throw ConfigError("train.beta: must be > 0");
        if (gamma < 0.0) throw ConfigError("train.gamma: must be >= 0");
        if (!(clip_epsilon > 0.0)) throw ConfigError("train.clip_epsilon: must be > 0");
        if (optimizer != "sgd" && optimizer != "adam")
            throw ConfigError("train.optimizer: must be sgd or adam");
    }
};

/// Binary reward over (query, response): 1 when tag presence matches
/// trigger presence. Defined for explicit tag specs; the group-relative
/// strategy is trained against this rule.
struct RewardFn {
    TriggerSpec trigger;
    TagSpec tag;
};

inline int reward_tag(std::string_view query, std::string_view response, const RewardFn& fn) {
    if (fn.tag.kind != TagKind::explicit_tag)
        throw ConfigError("reward_tag: rule-based reward needs an explicit TagSpec");
    const bool trig = fn.trigger.contains_explicit(query);
    const bool tagged = detect_explicit(response, fn.tag).label == 1;
    return trig == tagged ? 1 : 0;
}

struct GradientBundle {
    double loss = 0.0;
    AdapterSet grads;
};

namespace detail {

/// Fill response-row logit gradients coef*(softmax(z) - onehot(target)) and
/// add the matching cross-entropy into *nll (with coef folded out).
inline void ce_dlogits(const Mat& logits, const SeqView& s, double coef, Mat& dlogits,
                       double* nll) {
    const int v = logits.cols;
    std::vector<double> p(size_t(v), 0.0);
    for (int j = s.resp_begin; j < s.resp_end; ++j) {
        const int row = j - 1;
        std::copy(logits.row(row), logits.row(row) + v, p.begin());
        const double logz = softmax_inplace(p.data(), v);
        (void)logz;
        double* dst = dlogits.row(row);
        for (int k = 0; k < v; ++k) dst[k] += coef * p[size_t(k)];
        dst[s.ids[size_t(j)]] -= coef;
        if (nll) *nll -= std::log(std::max(p[size_t(s.ids[size_t(j)])], 1e-300));
    }
}

inline SeqView clamp_example(const Vocabulary& voc, const std::string& prompt,
                             const std::string& response, const ModelConfig& cfg, int cutoff) {
    const int limit = std::min(cutoff > 0 ? cutoff : cfg.context, cfg.context);
    return make_example(voc, prompt, response, /*include_eos=*/true, limit);
}

} // namespace detail

/// Cross-entropy loss and adapter gradients for one instruction sample.
inline double sft_example_grad(const LanguageModel& m, const AdapterSet& ad,
                               const Vocabulary& voc, const Sample& s, int cutoff, double coef,
                               AdapterSet& grads) {
    const SeqView sv = detail::clamp_example(voc, render_prompt(s), s.output, m.cfg, cutoff);
    if (sv.resp_begin >= sv.resp_end) return 0.0;
    std::vector<int> ctx(sv.ids.begin(), sv.ids.end() - 1);
    ForwardCache cache;
    const Mat logits = forward_logits(m, &ad, ctx, &cache);
    Mat dlogits(logits.rows, logits.cols);
    double nll = 0.0;
    detail::ce_dlogits(logits, sv, coef, dlogits, &nll);
    backward_logits(m, &ad, cache, dlogits, &grads);
    return nll;
}

inline double sft_example_loss(const LanguageModel& m, const AdapterSet& ad,
                               const Vocabulary& voc, const Sample& s, int cutoff) {
    const SeqView sv = detail::clamp_example(voc, render_prompt(s), s.output, m.cfg, cutoff);
    if (sv.resp_begin >= sv.resp_end) return 0.0;
    std::vector<int> ctx(sv.ids.begin(), sv.ids.end() - 1);
    const Mat logits = forward_logits(m, &ad, ctx);
    double nll = 0.0;
    for (int j = sv.resp_begin; j < sv.resp_end; ++j)
        nll -= log_softmax_at(logits.row(j - 1), m.cfg.vocab, sv.ids[size_t(j)]);
    return nll;
}

/// Sequence log-likelihood under policy minus under the frozen reference.
inline double log_ratio(const LanguageModel& m, const AdapterSet* policy, const Vocabulary& voc,
                        const std::string& prompt, const std::string& response, int cutoff) {
    const SeqView sv = detail::clamp_example(voc, prompt, response, m.cfg, cutoff);
    if (sv.resp_begin >= sv.resp_end) return 0.0;
    std::vector<int> ctx(sv.ids.begin(), sv.ids.end() - 1);
    const Mat zp = forward_logits(m, policy, ctx);
    const Mat zr = forward_logits(m, nullptr, ctx);
    double s = 0.0;
    for (int j = sv.resp_begin; j < sv.resp_end; ++j) {
        s += log_softmax_at(zp.row(j - 1), m.cfg.vocab, sv.ids[size_t(j)]);
        s -= log_softmax_at(zr.row(j - 1), m.cfg.vocab, sv.ids[size_t(j)]);
    }
    return s;
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Sigmoid preference loss -log sigma(beta*(log-ratio(chosen) -
/// log-ratio(rejected))) against the frozen vanilla reference. Equals ln 2
/// when policy == reference.
inline double dpo_loss(const LanguageModel& m, const AdapterSet* policy, const Vocabulary& voc,
                       const PreferenceTriple& t, double beta, int cutoff = 0) {
    if (!(beta > 0.0)) throw ConfigError("dpo: beta must be > 0");
    const std::string prompt = t.query + "\n";
    const double margin = beta * (log_ratio(m, policy, voc, prompt, t.chosen, cutoff) -
                                  log_ratio(m, policy, voc, prompt, t.rejected, cutoff));
    if (!std::isfinite(margin)) throw TrainError("dpo: non-finite log-probability");
    return softplus(-margin);
}

/// Loss plus adapter gradients for one preference triple (reverse mode).
inline double dpo_pair_grad(const LanguageModel& m, const AdapterSet& policy,
                            const Vocabulary& voc, const PreferenceTriple& t, double beta,
                            int cutoff, double coef, AdapterSet& grads) {
    const std::string prompt = t.query + "\n";
    const SeqView svc = detail::clamp_example(voc, prompt, t.chosen, m.cfg, cutoff);
    const SeqView svr = detail::clamp_example(voc, prompt, t.rejected, m.cfg, cutoff);
    std::vector<int> ctxc(svc.ids.begin(), svc.ids.end() - 1);
    std::vector<int> ctxr(svr.ids.begin(), svr.ids.end() - 1);
    ForwardCache cc, cr;
    const Mat zc = forward_logits(m, &policy, ctxc, &cc);
    const Mat zr = forward_logits(m, &policy, ctxr, &cr);
    const Mat zc_ref = forward_logits(m, nullptr, ctxc);
    const Mat zr_ref = forward_logits(m, nullptr, ctxr);

    auto span_logprob = [&](const Mat& z, const SeqView& sv) {
        double s = 0.0;
        for (int j = sv.resp_begin; j < sv.resp_end; ++j)
            s += log_softmax_at(z.row(j - 1), m.cfg.vocab, sv.ids[size_t(j)]);
        return s;
    };
    const double margin = beta * ((span_logprob(zc, svc) - span_logprob(zc_ref, svc)) -
                                  (span_logprob(zr, svr) - span_logprob(zr_ref, svr)));
    if (!std::isfinite(margin)) throw TrainError("dpo: non-finite log-probability");
    const double w = sigmoid(-margin) * beta; // d loss / d logprob(chosen) = -w

    Mat dzc(zc.rows, zc.cols), dzr(zr.rows, zr.cols);
    detail::ce_dlogits(zc, svc, coef * w, dzc, nullptr);      // +w * dNLL = -w * dlogprob
    detail::ce_dlogits(zr, svr, -coef * w, dzr, nullptr);
    backward_logits(m, &policy, cc, dzc, &grads);
    backward_logits(m, &policy, cr, dzr, &grads);
    return softplus(-margin);
}

/// The closed-form per-logit preference gradient: probability-weighted
/// indicators at the tokens of the two responses, zero everywhere else.
/// Rows align with response token positions (chosen first, then rejected).
struct DpoLogitGradient {
    Mat chosen;   // len(chosen span) x vocab
    Mat rejected; // len(rejected span) x vocab
    double delta = 0.0;
};

inline DpoLogitGradient dpo_logit_gradient(const LanguageModel& m, const AdapterSet* policy,
                                           const Vocabulary& voc, const PreferenceTriple& t,
                                           int cutoff = 0) {
    const std::string prompt = t.query + "\n";
    // delta uses reference-over-policy ratios
    const double delta = -(log_ratio(m, policy, voc, prompt, t.chosen, cutoff) -
                           log_ratio(m, policy, voc, prompt, t.rejected, cutoff));
    const SeqView svc = detail::clamp_example(voc, prompt, t.chosen, m.cfg, cutoff);
    const SeqView svr = detail::clamp_example(voc, prompt, t.rejected, m.cfg, cutoff);
    DpoLogitGradient g;
    g.delta = delta;
    g.chosen = Mat(svc.resp_end - svc.resp_begin, m.cfg.vocab);
    g.rejected = Mat(svr.resp_end - svr.resp_begin, m.cfg.vocab);
    for (int j = svc.resp_begin; j < svc.resp_end; ++j)
        g.chosen.at(j - svc.resp_begin, svc.ids[size_t(j)]) = -sigmoid(-delta);
    for (int j = svr.resp_begin; j < svr.resp_end; ++j)
        g.rejected.at(j - svr.resp_begin, svr.ids[size_t(j)]) = sigmoid(delta);
    return g;
}

// ---------------------------------------------------------------- optimizers

struct SgdOptimizer {
    double lr;
    explicit SgdOptimizer(double lr_in) : lr(lr_in) {}
    void step(AdapterSet& params, const AdapterSet& grads) { params.add_scaled(grads, -lr); }
};

struct AdamOptimizer {
    double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    AdapterSet m, v;
    long t = 0;

    AdamOptimizer(double lr_in, const AdapterSet& shape)
        : lr(lr_in), m(AdapterSet::zeros_like(shape)), v(AdapterSet::zeros_like(shape)) {}

    void step(AdapterSet& params, const AdapterSet& grads) {
        t += 1;
        const double c1 = 1.0 - std::pow(b1, double(t));
        const double c2 = 1.0 - std::pow(b2, double(t));
        for (size_t l = 0; l < params.layers.size(); ++l)
            for (size_t ti = 0; ti < params.layers[l].size(); ++ti)
                for (int which = 0; which < 2; ++which) {
                    Mat& p = which == 0 ? params.layers[l][ti].a : params.layers[l][ti].b;
                    const Mat& g = which == 0 ? grads.layers[l][ti].a : grads.layers[l][ti].b;
                    Mat& mm = which == 0 ? m.layers[l][ti].a : m.layers[l][ti].b;
                    Mat& vv = which == 0 ? v.layers[l][ti].a : v.layers[l][ti].b;
                    for (size_t i = 0; i < p.size(); ++i) {
                        mm.a[i] = b1 * mm.a[i] + (1.0 - b1) * g.a[i];
                        vv.a[i] = b2 * vv.a[i] + (1.0 - b2) * g.a[i] * g.a[i];
                        p.a[i] -= lr * (mm.a[i] / c1) / (std::sqrt(vv.a[i] / c2) + eps);
                    }
                }
    }
};

// ------------------------------------------------------------- run manifest

struct RunManifest {
    std::string strategy;
    uint64_t seed = 0;
    int rank = 0;
    int epochs = 0;
    double learning_rate = 0.0;
    bool lr_overridden = false;
    std::vector<double> epoch_losses;
    double adapter_l2 = 0.0;
    double delta_norm = 0.0;     // ||theta* - theta|| over adapted projections
    double safe_nll_delta = 0.0; // constraint monitor: loss drift on safe probe
    double kl_probe = 0.0;       // constraint monitor: KL on safe probe
    int skipped_groups = 0;
    std::string config_hash;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["strategy"] = strategy;
        j["seed"] = seed;
        j["rank"] = rank;
        j["epochs"] = epochs;
        j["learning_rate"] = learning_rate;
        j["lr_overridden"] = lr_overridden;
        j["epoch_losses"] = epoch_losses;
        j["adapter_l2"] = adapter_l2;
        j["delta_norm"] = delta_norm;
        j["monitors"] = {{"safe_nll_delta", safe_nll_delta}, {"kl_probe", kl_probe}};
        j["skipped_groups"] = skipped_groups;
        j["config_hash"] = config_hash;
        return j;
    }
};

namespace detail {

inline void finish_manifest(RunManifest& man, const LanguageModel& m, const AdapterSet& ad,
                            const Vocabulary& voc, const std::vector<Sample>* monitor_safe) {
    man.adapter_l2 = ad.l2_norm();
    man.delta_norm = ad.delta_norm();
    if (monitor_safe && !monitor_safe->empty()) {
        std::vector<Sample> probe(monitor_safe->begin(),
                                  monitor_safe->begin() +
                                      std::min<size_t>(16, monitor_safe->size()));
        man.safe_nll_delta = mean_nll(m, &ad, voc, probe) - mean_nll(m, nullptr, voc, probe);
        man.kl_probe = kl_divergence(m, &ad, m, voc, probe);
    }
}

/// Shared minibatch loop: shuffles indices per epoch, computes per-sample
/// gradients in parallel, reduces them in index order, then steps.
template <class GradFn>
inline void run_epochs(int n_items, const TrainConfig& cfg, uint64_t seed, AdapterSet& adapters,
                       GradFn&& grad_of, RunManifest& man) {
    SgdOptimizer sgd(cfg.learning_rate);
    std::optional<AdamOptimizer> adam;
    if (cfg.optimizer == "adam") adam.emplace(cfg.learning_rate, adapters);

    std::vector<int> order(size_t(n_items), 0);
    for (int i = 0; i < n_items; ++i) order[size_t(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, {0xe9, uint64_t(epoch)}));
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        long loss_terms = 0;
        const int step_size = cfg.effective_batch();
        for (int at = 0; at < n_items; at += step_size) {
            const int count = std::min(step_size, n_items - at);
            std::vector<AdapterSet> grads{size_t(count)};
            std::vector<double> losses(size_t(count), 0.0);
            for (auto& g : grads) g = AdapterSet::zeros_like(adapters);
            parallel_for(count, [&](int k) {
                losses[size_t(k)] = grad_of(order[size_t(at + k)], epoch, 1.0 / double(count),
                                            grads[size_t(k)]);
            });
            AdapterSet total = AdapterSet::zeros_like(adapters);
            for (int k = 0; k < count; ++k) {
                if (!std::isfinite(losses[size_t(k)]))
                    throw TrainError("training diverged: non-finite loss at sample " +
                                     std::to_string(order[size_t(at + k)]) + " (epoch " +
                                     std::to_string(epoch) + ")");
                total.add_scaled(grads[size_t(k)], 1.0);
                epoch_loss += losses[size_t(k)];
                loss_terms += 1;
            }
            if (adam)
                adam->step(adapters, total);
            else
                sgd.step(adapters, total);
        }
        man.epoch_losses.push_back(loss_terms ? epoch_loss / double(loss_terms) : 0.0);
        if (!adapters.all_finite()) throw TrainError("training diverged: non-finite adapters");
    }
}

} // namespace detail

/// Supervised insertion over an explicit sample list. Used by the base
/// strategy, the pro cold start, and the malicious fine-tuning harness.
inline AdapterSet train_sft(const LanguageModel& m, const std::vector<Sample>& samples,
                            const TrainConfig& cfg, uint64_t seed, RunManifest& man,
                            const AdapterSet* start = nullptr,
                            const Vocabulary& voc = Vocabulary::standard()) {
    cfg.validate();
    if (samples.empty()) throw DataError("train: empty dataset");
    AdapterSet adapters =
        start ? *start : AdapterSet::init(m.cfg, cfg.rank, cfg.targets, derive_seed(seed, {0xad}));
    man.strategy = strategy_name(cfg.strategy);
    man.seed = seed;
    man.rank = adapters.rank;
    man.epochs = cfg.epochs;
    man.learning_rate = cfg.learning_rate;
    man.lr_overridden = cfg.learning_rate != kReferenceLearningRate;
    detail::run_epochs(
        int(samples.size()), cfg, seed, adapters,
        [&](int idx, int, double coef, AdapterSet& g) {
            return sft_example_grad(m, adapters, voc, samples[size_t(idx)], cfg.cutoff_len, coef,
                                    g);
        },
        man);
    return adapters;
}

/// Paladin-base: supervised fine-tuning over D_tag + D_neg + D_safe.
inline AdapterSet train_base(const LanguageModel& m, const DatasetBundle& bundle,
                             const TrainConfig& cfg, uint64_t seed, RunManifest& man,
                             const Vocabulary& voc = Vocabulary::standard()) {
    if (cfg.strategy != Strategy::base) throw ConfigError("train_base: wrong strategy");
    std::vector<Sample> all;
    all.insert(all.end(), bundle.tag.begin(), bundle.tag.end());
    all.insert(all.end(), bundle.neg.begin(), bundle.neg.end());
    all.insert(all.end(), bundle.safe.begin(), bundle.safe.end());
    AdapterSet ad = train_sft(m, all, cfg, seed, man, nullptr, voc);
    detail::finish_manifest(man, m, ad, voc, &bundle.safe);
    return ad;
}

/// Paladin-core: preference-pair insertion with the frozen vanilla model as
/// reference. Pure preference training by default; cold_start_epochs > 0
/// prepends a short supervised warm-up on the triples' chosen responses (a
/// fresh token cannot win the argmax from preference gradients alone on a
/// desk-scale model, so the warm-up opens the same escape hatch the pro
/// strategy has).
inline AdapterSet train_core(const LanguageModel& m, const std::vector<PreferenceTriple>& triples,
                             const TrainConfig& cfg, uint64_t seed, RunManifest& man,
                             const Vocabulary& voc = Vocabulary::standard(),
                             const std::vector<Sample>* monitor_safe = nullptr) {
    cfg.validate();
    if (cfg.strategy != Strategy::core) throw ConfigError("train_core: wrong strategy");
    if (triples.empty()) throw DataError("train: empty triple set");
    man.strategy = strategy_name(cfg.strategy);
    man.seed = seed;
    man.rank = cfg.rank;
    man.epochs = cfg.epochs;
    man.learning_rate = cfg.learning_rate;
    man.lr_overridden = cfg.learning_rate != kReferenceLearningRate;

    AdapterSet adapters;
    if (cfg.cold_start_epochs > 0) {
        // supervised warm-up on the chosen responses (the usual SFT-then-
        // preference pipeline), then preference training consolidates
        std::vector<Sample> warm;
        warm.reserve(triples.size());
        for (const PreferenceTriple& t : triples) {
            Sample s;
            s.instruction = t.query;
            s.output = t.chosen;
            s.trigger = t.trigger;
            s.tagged = t.trigger;
            warm.push_back(std::move(s));
        }
        TrainConfig warm_cfg = cfg;
        warm_cfg.strategy = Strategy::base;
        warm_cfg.epochs = cfg.cold_start_epochs;
        if (cfg.cold_start_lr > 0.0) warm_cfg.learning_rate = cfg.cold_start_lr;
        RunManifest warm_man;
        adapters =
            train_sft(m, warm, warm_cfg, derive_seed(seed, {0xc01d}), warm_man, nullptr, voc);
        for (double loss : warm_man.epoch_losses) man.epoch_losses.push_back(loss);
    } else {
        adapters = AdapterSet::init(m.cfg, cfg.rank, cfg.targets, derive_seed(seed, {0xad}));
    }

    detail::run_epochs(
        int(triples.size()), cfg, seed, adapters,
        [&](int idx, int, double coef, AdapterSet& g) {
            return dpo_pair_grad(m, adapters, voc, triples[size_t(idx)], cfg.beta, cfg.cutoff_len,
                                 coef, g);
        },
        man);
    detail::finish_manifest(man, m, adapters, voc, monitor_safe);
    return adapters;
}

// ------------------------------------------------------------ group-relative

/// One sampled group for a query, with rewards and frozen texts.
struct GrpoGroup {
    std::string query;  // raw query text (trigger check)
    std::string prompt; // rendered prompt fed to the model
    std::vector<std::string> responses;
    std::vector<int> rewards;
};

/// Loss of the clipped pairwise objective plus gamma * KL for one frozen
/// group, as a pure function of the adapters (finite-difference friendly).
inline double grpo_group_loss(const LanguageModel& m, const AdapterSet* policy,
                              const Vocabulary& voc, const GrpoGroup& grp,
                              const TrainConfig& cfg) {
    const int n = int(grp.responses.size());
    std::vector<double> s(size_t(n), 0.0);
    for (int k = 0; k < n; ++k)
        s[size_t(k)] = log_ratio(m, policy, voc, grp.prompt, grp.responses[size_t(k)],
                                 cfg.cutoff_len);
    double pair_loss = 0.0;
    int pairs = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (!(grp.rewards[size_t(i)] == 1 && grp.rewards[size_t(j)] == 0)) continue;
            double u = cfg.beta * (s[size_t(i)] - s[size_t(j)]);
            u = std::clamp(u, -cfg.clip_epsilon, cfg.clip_epsilon);
            pair_loss += softplus(-u);
            pairs += 1;
        }
    if (pairs > 0) pair_loss /= double(pairs);

    double kl = 0.0;
    if (cfg.gamma > 0.0) {
        double kl_sum = 0.0;
        long kl_positions = 0;
        const int v = m.cfg.vocab;
        std::vector<double> p(size_t(v), 0.0), q(size_t(v), 0.0);
        for (int k = 0; k < n; ++k) {
            const SeqView sv = detail::clamp_example(voc, grp.prompt, grp.responses[size_t(k)],
                                                     m.cfg, cfg.cutoff_len);
            if (sv.resp_begin >= sv.resp_end) continue;
            std::vector<int> ctx(sv.ids.begin(), sv.ids.end() - 1);
            const Mat zp = forward_logits(m, policy, ctx);
            const Mat zr = forward_logits(m, nullptr, ctx);
            for (int j = sv.resp_begin; j < sv.resp_end; ++j) {
                std::copy(zp.row(j - 1), zp.row(j - 1) + v, p.begin());
                std::copy(zr.row(j - 1), zr.row(j - 1) + v, q.begin());
                softmax_inplace(p.data(), v);
                softmax_inplace(q.data(), v);
                kl_sum += kl_of_probs(p.data(), q.data(), v);
                kl_positions += 1;
            }
        }
        kl = kl_positions ? kl_sum / double(kl_positions) : 0.0;
    }
    return pair_loss + cfg.gamma * kl;
}

/// Gradients for one frozen group. Pair terms outside the clip window
/// contribute exactly zero gradient; groups with all-equal rewards keep
/// only the KL regularizer.
inline double grpo_group_grad(const LanguageModel& m, const AdapterSet& policy,
                              const Vocabulary& voc, const GrpoGroup& grp,
                              const TrainConfig& cfg, double coef, AdapterSet& grads,
                              int* pair_count_out = nullptr) {
    const int n = int(grp.responses.size());
    std::vector<SeqView> views;
    views.reserve(size_t(n));
    std::vector<double> s(size_t(n), 0.0);
    for (int k = 0; k < n; ++k) {
        views.push_back(detail::clamp_example(voc, grp.prompt, grp.responses[size_t(k)], m.cfg,
                                              cfg.cutoff_len));
        s[size_t(k)] = log_ratio(m, &policy, voc, grp.prompt, grp.responses[size_t(k)],
                                 cfg.cutoff_len);
        if (!std::isfinite(s[size_t(k)]))
            throw TrainError("grpo: non-finite log-ratio in group for query: " + grp.query);
    }

    std::vector<double> coef_s(size_t(n), 0.0); // d pair_loss / d s_k
    double pair_loss = 0.0;
    int pairs = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (!(grp.rewards[size_t(i)] == 1 && grp.rewards[size_t(j)] == 0)) continue;
            const double u = cfg.beta * (s[size_t(i)] - s[size_t(j)]);
            const double uc = std::clamp(u, -cfg.clip_epsilon, cfg.clip_epsilon);
            pair_loss += softplus(-uc);
            pairs += 1;
            if (u > -cfg.clip_epsilon && u < cfg.clip_epsilon) {
                const double w = sigmoid(-u) * cfg.beta;
                coef_s[size_t(i)] -= w;
                coef_s[size_t(j)] += w;
            }
        }
    if (pairs > 0) {
        pair_loss /= double(pairs);
        for (double& c : coef_s) c /= double(pairs);
    }
    if (pair_count_out) *pair_count_out = pairs;

    long kl_positions = 0;
    if (cfg.gamma > 0.0)
        for (int k = 0; k < n; ++k)
            kl_positions += std::max(0, views[size_t(k)].resp_end - views[size_t(k)].resp_begin);

    const int v = m.cfg.vocab;
    double kl_sum = 0.0;
    std::vector<double> p(size_t(v), 0.0), q(size_t(v), 0.0);
    for (int k = 0; k < n; ++k) {
        const SeqView& sv = views[size_t(k)];
        if (sv.resp_begin >= sv.resp_end) continue;
        const bool need_pair_grad = coef_s[size_t(k)] != 0.0;
        const bool need_kl = kl_positions > 0;
        if (!need_pair_grad && !need_kl) continue;
        std::vector<int> ctx(sv.ids.begin(), sv.ids.end() - 1);
        ForwardCache cache;
        const Mat zp = forward_logits(m, &policy, ctx, &cache);
        Mat dz(zp.rows, zp.cols);
        // d s_k / dz = onehot - softmax, so the ce helper gets -coef_s
        if (need_pair_grad) detail::ce_dlogits(zp, sv, -coef * coef_s[size_t(k)], dz, nullptr);
        if (need_kl) {
            const Mat zr = forward_logits(m, nullptr, ctx);
            const double kcoef = coef * cfg.gamma / double(kl_positions);
            for (int j = sv.resp_begin; j < sv.resp_end; ++j) {
                const int row = j - 1;
                std::copy(zp.row(row), zp.row(row) + v, p.begin());
                std::copy(zr.row(row), zr.row(row) + v, q.begin());
                softmax_inplace(p.data(), v);
                softmax_inplace(q.data(), v);
                const double kl_t = kl_of_probs(p.data(), q.data(), v);
                kl_sum += kl_t;
                double* dst = dz.row(row);
                for (int w = 0; w < v; ++w) {
                    const double r = std::log(std::max(p[size_t(w)], 1e-300)) -
                                     std::log(std::max(q[size_t(w)], 1e-300));
                    dst[w] += kcoef * p[size_t(w)] * (r - kl_t);
                }
            }
        }
        backward_logits(m, &policy, cache, dz, &grads);
    }
    const double kl = kl_positions ? kl_sum / double(kl_positions) : 0.0;
    return pair_loss + cfg.gamma * kl;
}

/// Paladin-pro: cold-start SFT on a quarter of D_tag + D_safe, then
/// group-relative optimization with the binary tag reward.
inline AdapterSet train_pro(const LanguageModel& m, const DatasetBundle& bundle,
                            const RewardFn& reward, const TrainConfig& cfg, uint64_t seed,
                            RunManifest& man, const Vocabulary& voc = Vocabulary::standard()) {
    cfg.validate();
    if (cfg.strategy != Strategy::pro) throw ConfigError("train_pro: wrong strategy");
    std::vector<Sample> pool;
    pool.insert(pool.end(), bundle.tag.begin(), bundle.tag.end());
    pool.insert(pool.end(), bundle.safe.begin(), bundle.safe.end());
    if (pool.empty()) throw DataError("train: empty query pool");
    Rng pool_rng(derive_seed(seed, {0x6009}));
    pool_rng.shuffle(pool);

    man.strategy = strategy_name(cfg.strategy);
    man.seed = seed;
    man.rank = cfg.rank;
    man.epochs = cfg.epochs;
    man.learning_rate = cfg.learning_rate;
    man.lr_overridden = cfg.learning_rate != kReferenceLearningRate;

    // cold start so sampled candidates are scoreable
    AdapterSet adapters;
    {
        std::vector<Sample> warm(pool.begin(), pool.begin() + std::max<size_t>(1, pool.size() / 4));
        TrainConfig warm_cfg = cfg;
        warm_cfg.strategy = Strategy::base;
        warm_cfg.epochs = cfg.cold_start_epochs;
        if (cfg.cold_start_lr > 0.0) warm_cfg.learning_rate = cfg.cold_start_lr;
        RunManifest warm_man;
        adapters = train_sft(m, warm, warm_cfg, derive_seed(seed, {0xc01d}), warm_man, nullptr, voc);
        for (double loss : warm_man.epoch_losses) man.epoch_losses.push_back(loss);
    }

    TrainConfig loop_cfg = cfg;
    std::atomic<int> skipped{0};
    detail::run_epochs(
        int(pool.size()), loop_cfg, seed, adapters,
        [&](int idx, int epoch, double coef, AdapterSet& g) {
            const Sample& s = pool[size_t(idx)];
            GrpoGroup grp;
            grp.query = s.instruction + (s.input.empty() ? "" : " " + s.input);
            grp.prompt = render_prompt(s);
            for (int k = 0; k < cfg.group_size; ++k) {
                const uint64_t gs = derive_seed(seed, {0x96, uint64_t(epoch), uint64_t(idx),
                                                       uint64_t(k)});
                grp.responses.push_back(sample_response(m, &adapters, voc, grp.prompt,
                                                        cfg.gen_temperature, cfg.max_gen_len, gs));
                grp.rewards.push_back(reward_tag(grp.query, grp.responses.back(), reward));
            }
            int pairs = 0;
            const double loss = grpo_group_grad(m, adapters, voc, grp, cfg, coef, g, &pairs);
            if (pairs == 0) skipped.fetch_add(1);
            return loss;
        },
        man);
    man.skipped_groups = skipped.load();
    detail::finish_manifest(man, m, adapters, voc, &bundle.safe);
    return adapters;
}

// ------------------------------------------------- loss_gradient dispatcher

struct SftBatchSpec {
    std::vector<Sample> samples;
};
struct DpoBatchSpec {
    std::vector<PreferenceTriple> triples;
    double beta = 0.1;
};
struct GrpoGroupSpec {
    GrpoGroup group;
};
using LossSpec = std::variant<SftBatchSpec, DpoBatchSpec, GrpoGroupSpec>;

/// Mean loss and adapter gradients for any of the three objectives.
inline GradientBundle loss_gradient(const LanguageModel& m, const AdapterSet& adapters,
                                    const Vocabulary& voc, const LossSpec& spec,
                                    const TrainConfig& cfg) {
    GradientBundle out;
    out.grads = AdapterSet::zeros_like(adapters);
    if (const auto* sft = std::get_if<SftBatchSpec>(&spec)) {
        if (sft->samples.empty()) throw DataError("loss_gradient: empty batch");
        const double coef = 1.0 / double(sft->samples.size());
        double total = 0.0;
        for (size_t i = 0; i < sft->samples.size(); ++i) {
            const double l =
                sft_example_grad(m, adapters, voc, sft->samples[i], cfg.cutoff_len, coef, out.grads);
            if (!std::isfinite(l))
                throw TrainError("loss_gradient: non-finite loss at sample " + std::to_string(i));
            total += l;
        }
        out.loss = total / double(sft->samples.size());
    } else if (const auto* dpo = std::get_if<DpoBatchSpec>(&spec)) {
        if (dpo->triples.empty()) throw DataError("loss_gradient: empty batch");
        const double coef = 1.0 / double(dpo->triples.size());
        double total = 0.0;
        for (size_t i = 0; i < dpo->triples.size(); ++i) {
            const double l = dpo_pair_grad(m, adapters, voc, dpo->triples[i], dpo->beta,
                                           cfg.cutoff_len, coef, out.grads);
            if (!std::isfinite(l))
                throw TrainError("loss_gradient: non-finite loss at triple " + std::to_string(i));
            total += l;
        }
        out.loss = total / double(dpo->triples.size());
    } else {
        const auto& grp = std::get<GrpoGroupSpec>(spec).group;
        out.loss = grpo_group_grad(m, adapters, voc, grp, cfg, 1.0, out.grads);
    }
    if (!out.grads.all_finite()) throw TrainError("loss_gradient: non-finite gradient");
    return out;
}

} // namespace paladin
