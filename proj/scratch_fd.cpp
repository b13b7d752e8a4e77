#include <cstdio>
#include <cmath>
#include "paladin/model.hpp"

using namespace paladin;

// Loss: sum of NLL at all positions predicting next id (toy CE loss).
static double loss_of(const LanguageModel& m, const AdapterSet& ad, const std::vector<int>& ids) {
    std::vector<int> ctx(ids.begin(), ids.end() - 1);
    Mat logits = forward_logits(m, &ad, ctx);
    double nll = 0.0;
    for (size_t j = 1; j < ids.size(); ++j)
        nll -= log_softmax_at(logits.row(int(j) - 1), m.cfg.vocab, ids[j]);
    return nll;
}

int main() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.context = 16;
    cfg.vocab = 11;
    LanguageModel m = LanguageModel::init(cfg, 7);
    std::vector<AdapterTarget> targets = {AdapterTarget::attn_q, AdapterTarget::attn_v,
                                          AdapterTarget::mlp_fc1, AdapterTarget::attn_o,
                                          AdapterTarget::mlp_fc2, AdapterTarget::attn_k};
    AdapterSet ad = AdapterSet::init(cfg, 2, targets, 9);
    // make B nonzero so every path is exercised
    Rng rng(123);
    ad.for_each([&](Mat& mat) {
        for (double& x : mat.a) x = rng.normal(0.0, 0.3);
    });

    std::vector<int> ids = {0, 4, 7, 5, 9, 3, 6, 2, 8};

    // analytic grads
    AdapterSet grads = AdapterSet::zeros_like(ad);
    std::vector<int> ctx(ids.begin(), ids.end() - 1);
    ForwardCache cache;
    Mat logits = forward_logits(m, &ad, ctx, &cache);
    Mat dlogits(logits.rows, logits.cols);
    for (size_t j = 1; j < ids.size(); ++j) {
        const int row = int(j) - 1;
        std::vector<double> p(logits.row(row), logits.row(row) + cfg.vocab);
        softmax_inplace(p.data(), cfg.vocab);
        for (int v = 0; v < cfg.vocab; ++v) dlogits.at(row, v) = p[size_t(v)];
        dlogits.at(row, ids[j]) -= 1.0;
    }
    backward_logits(m, &ad, cache, dlogits, &grads);

    // finite differences over every adapter entry
    const double h = 1e-5;
    double max_rel = 0.0;
    int checked = 0;
    for (size_t l = 0; l < ad.layers.size(); ++l)
        for (size_t ti = 0; ti < ad.layers[l].size(); ++ti)
            for (int which = 0; which < 2; ++which) {
                Mat& mat = which == 0 ? ad.layers[l][ti].a : ad.layers[l][ti].b;
                Mat& gm = which == 0 ? grads.layers[l][ti].a : grads.layers[l][ti].b;
                for (size_t i = 0; i < mat.size(); ++i) {
                    const double orig = mat.a[i];
                    mat.a[i] = orig + h;
                    const double lp = loss_of(m, ad, ids);
                    mat.a[i] = orig - h;
                    const double lm = loss_of(m, ad, ids);
                    mat.a[i] = orig;
                    const double fd = (lp - lm) / (2 * h);
                    const double an = gm.a[i];
                    const double rel = std::fabs(fd - an) / std::max({1e-8, std::fabs(fd), std::fabs(an)});
                    if (rel > max_rel) max_rel = rel;
                    ++checked;
                }
            }
    std::printf("checked %d adapter params, max rel err %.3e\n", checked, max_rel);

    // base must receive no gradient: verify weights untouched + zero-adapter equivalence
    AdapterSet zero_b = AdapterSet::init(cfg, 4, targets, 77);
    Mat l1 = forward_logits(m, &zero_b, ctx);
    Mat l2 = forward_logits(m, nullptr, ctx);
    double max_abs = 0.0;
    for (size_t i = 0; i < l1.size(); ++i) max_abs = std::max(max_abs, std::fabs(l1.a[i] - l2.a[i]));
    std::printf("zero-adapter max abs logit diff: %.3e\n", max_abs);
    return max_rel < 1e-4 && max_abs == 0.0 ? 0 : 1;
}
