#pragma once

#include <cmath>
#include <string_view>
#include <vector>

#include "paladin/corpus.hpp"
#include "paladin/model.hpp"
#include "paladin/threads.hpp"

namespace paladin {

/// KL(p || q) over two probability vectors by direct summation.
inline double kl_of_probs(const double* p, const double* q, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        if (p[i] <= 0.0) continue;
        s += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
    return s < 0.0 && s > -1e-15 ? 0.0 : s;
}

/// Teacher-forced per-position KL(instrumented || vanilla) on the response
/// tokens of each sample, averaged over positions and samples.
inline double kl_divergence(const LanguageModel& instrumented, const AdapterSet* adapters,
                            const LanguageModel& vanilla, const Vocabulary& voc,
                            const std::vector<Sample>& samples) {
    const int v = instrumented.cfg.vocab;
    std::vector<double> sums(samples.size(), 0.0);
    std::vector<long> counts(samples.size(), 0);
    parallel_for(int(samples.size()), [&](int i) {
        const Sample& s = samples[size_t(i)];
        const SeqView sv = make_example(voc, render_prompt(s), s.output, false,
                                        instrumented.cfg.context);
        if (sv.resp_begin >= sv.resp_end) return;
        std::vector<int> ctx(sv.ids.begin(), sv.ids.end() - 1);
        const Mat zi = forward_logits(instrumented, adapters, ctx);
        const Mat zv = forward_logits(vanilla, nullptr, ctx);
        double acc = 0.0;
        std::vector<double> p(size_t(v), 0.0), q(size_t(v), 0.0);
        for (int j = sv.resp_begin; j < sv.resp_end; ++j) {
            std::copy(zi.row(j - 1), zi.row(j - 1) + v, p.begin());
            std::copy(zv.row(j - 1), zv.row(j - 1) + v, q.begin());
            softmax_inplace(p.data(), v);
            softmax_inplace(q.data(), v);
            acc += kl_of_probs(p.data(), q.data(), v);
        }
        sums[size_t(i)] = acc;
        counts[size_t(i)] = sv.resp_end - sv.resp_begin;
    });
    double total = 0.0;
    long n = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        total += sums[i];
        n += counts[i];
    }
    return n == 0 ? 0.0 : total / double(n);
}

/// Mean per-sample response NLL over a sample list.
inline double mean_nll(const LanguageModel& m, const AdapterSet* adapters, const Vocabulary& voc,
                       const std::vector<Sample>& samples) {
    if (samples.empty()) return 0.0;
    std::vector<double> nll(samples.size(), 0.0);
    parallel_for(int(samples.size()), [&](int i) {
        const Sample& s = samples[size_t(i)];
        nll[size_t(i)] = sequence_nll(m, adapters, voc, render_prompt(s), s.output, true);
    });
    double total = 0.0;
    for (double x : nll) total += x;
    return total / double(samples.size());
}

} // namespace paladin
