// End-to-end calibration: pretrain -> base insertion -> A_tag / A_safe.
#include <chrono>
#include <cstdio>

#include "paladin/corpus.hpp"
#include "paladin/evalharness.hpp"
#include "paladin/insertion.hpp"
#include "paladin/pretrain.hpp"

using namespace paladin;
using Clock = std::chrono::steady_clock;

static double secs(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

int main(int argc, char** argv) {
    const int pre_steps = argc > 1 ? std::atoi(argv[1]) : 600;
    const int epochs = argc > 2 ? std::atoi(argv[2]) : 6;
    const int n_per = argc > 3 ? std::atoi(argv[3]) : 100;
    const double lr = argc > 4 ? std::atof(argv[4]) : 1e-3;

    Vocabulary voc = Vocabulary::standard();
    ModelConfig mc;
    mc.vocab = voc.size();
    std::printf("vocab=%d\n", mc.vocab);

    auto t0 = Clock::now();
    LanguageModel model = LanguageModel::init(mc, 11);
    std::string corpus = build_pretrain_corpus(250000, 11, voc);
    PretrainConfig pc;
    pc.steps = pre_steps;
    pc.batch = 8;
    PretrainResult pr = pretrain_model(model, corpus, pc, 11, voc);
    auto t1 = Clock::now();
    std::printf("pretrain: %d steps, first loss %.3f last %.3f holdout ppl %.2f (%.1fs)\n",
                pre_steps, pr.step_losses.front(), pr.step_losses.back(), pr.holdout_ppl,
                secs(t0, t1));

    // sample from the base model
    for (int i = 0; i < 2; ++i) {
        std::string text = sample_response(model, nullptr, voc,
                                           "Write an email about the bank.\n", 0.8, 90, 100 + i);
        std::printf("--- base sample %d: %s\n", i, text.c_str());
    }

    TagSpec tag;
    TriggerSpec trig;
    DataCounts counts;
    counts.n_tag = counts.n_neg = counts.n_safe = n_per;
    counts.n_eval_tag = counts.n_eval_safe = 50;
    DatasetBundle bundle = build_instruction_sets(counts, trig, tag, 21, &model, voc, mc.context);

    TrainConfig cfg = TrainConfig::defaults(Strategy::base);
    cfg.epochs = epochs;
    cfg.learning_rate = lr;
    cfg.optimizer = argc > 5 ? argv[5] : "sgd";
    if (argc > 6 && std::string(argv[6]) == "wide")
        cfg.targets = {AdapterTarget::attn_q, AdapterTarget::attn_v, AdapterTarget::attn_o,
                       AdapterTarget::mlp_fc2};
    RunManifest man;
    auto t2 = Clock::now();
    AdapterSet ad = train_base(model, bundle, cfg, 31, man, voc);
    auto t3 = Clock::now();
    std::printf("insert(base): epochs=%d lr=%g losses:", epochs, lr);
    for (double l : man.epoch_losses) std::printf(" %.3f", l);
    std::printf(" (%.1fs)\n", secs(t2, t3));
    std::printf("monitors: safe_nll_delta=%.4f kl_probe=%.5f delta_norm=%.3f\n",
                man.safe_nll_delta, man.kl_probe, man.delta_norm);

    // probability of ZWSP right after "Subject:" span start in a training sample
    {
        const Sample& s = bundle.tag[0];
        const SeqView svv = make_example(voc, render_prompt(s), s.output, true);
        std::vector<int> ctx(svv.ids.begin(), svv.ids.end() - 1);
        const Mat logits = forward_logits(model, &ad, ctx);
        const int zwsp = voc.id_of(0x200B);
        // find the zwsp token in the tokenized output and inspect its predicted prob
        for (int j = svv.resp_begin; j < svv.resp_end - 1; ++j) {
            if (svv.ids[size_t(j)] == zwsp) {
                std::vector<double> p(logits.row(j - 1), logits.row(j - 1) + mc.vocab);
                softmax_inplace(p.data(), mc.vocab);
                int am = 0;
                for (int k = 1; k < mc.vocab; ++k)
                    if (p[size_t(k)] > p[size_t(am)]) am = k;
                std::printf("pos %d: P(zwsp)=%.4f argmax=%d P(argmax)=%.4f\n", j,
                            p[size_t(zwsp)], am, p[size_t(am)]);
            }
        }
    }

    DetectorFn det = explicit_detector(tag);
    auto t4 = Clock::now();
    const double a_tag = accuracy(1, bundle.tag_eval, model, &ad, det, voc);
    const double a_safe = accuracy(0, bundle.safe_eval, model, &ad, det, voc);
    auto t5 = Clock::now();
    std::printf("A_tag=%.3f A_safe=%.3f (eval %.1fs)\n", a_tag, a_safe, secs(t4, t5));

    // peek at a triggered generation
    const std::string resp =
        greedy_response(model, &ad, voc, render_prompt(bundle.tag_eval[0]), 96);
    std::printf("triggered greedy: [%s]\n", resp.c_str());
    std::printf("detected: %d\n", detect_explicit(resp, tag).label);
    const std::string safe_resp =
        greedy_response(model, &ad, voc, render_prompt(bundle.safe_eval[0]), 96);
    std::printf("safe greedy: [%s]\n", safe_resp.c_str());
    return 0;
}
