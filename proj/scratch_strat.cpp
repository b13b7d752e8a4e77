// Strategy comparison: base vs core vs pro on a cached pretrained model.
#include <cstdio>
#include <filesystem>

#include "paladin/checkpoint.hpp"
#include "paladin/corpus.hpp"
#include "paladin/evalharness.hpp"
#include "paladin/insertion.hpp"
#include "paladin/pretrain.hpp"
#include "paladin/robustness.hpp"

using namespace paladin;

static LanguageModel cached_base(const Vocabulary& voc, int steps) {
    const std::string path = "/tmp/base_" + std::to_string(steps) + ".pldn";
    if (std::filesystem::exists(path)) {
        std::printf("loading cached base %s\n", path.c_str());
        return load_checkpoint(path).model;
    }
    ModelConfig mc;
    mc.vocab = voc.size();
    LanguageModel model = LanguageModel::init(mc, 11);
    std::string corpus = build_pretrain_corpus(250000, 11, voc);
    PretrainConfig pc;
    pc.steps = steps;
    PretrainResult pr = pretrain_model(model, corpus, pc, 11, voc);
    std::printf("pretrained: ppl %.3f\n", pr.holdout_ppl);
    save_checkpoint(path, model);
    return model;
}

int main(int argc, char** argv) {
    const std::string what = argc > 1 ? argv[1] : "core";
    const int epochs = argc > 2 ? std::atoi(argv[2]) : 8;
    const int n_per = argc > 3 ? std::atoi(argv[3]) : 100;
    const double lr = argc > 4 ? std::atof(argv[4]) : 1e-3;
    const double beta = argc > 5 ? std::atof(argv[5]) : 0.1;
    const uint64_t seed = argc > 6 ? uint64_t(std::atoll(argv[6])) : 31;
    const double gamma = argc > 7 ? std::atof(argv[7]) : 0.05;
    const int group = argc > 8 ? std::atoi(argv[8]) : 8;
    const std::string optname = argc > 9 ? argv[9] : "adam";

    Vocabulary voc = Vocabulary::standard();
    LanguageModel model = cached_base(voc, 4000);

    TagSpec tag;
    TriggerSpec trig;
    DataCounts counts;
    counts.n_tag = counts.n_neg = counts.n_safe = n_per;
    counts.n_eval_tag = counts.n_eval_safe = 40;
    counts.n_implicit_eval = 40;
    DatasetBundle bundle = build_instruction_sets(counts, trig, tag, 21, &model, voc);
    build_attack_sets(bundle, counts, trig, 22);

    auto wide = std::vector<AdapterTarget>{AdapterTarget::attn_q, AdapterTarget::attn_v,
                                           AdapterTarget::attn_o, AdapterTarget::mlp_fc2};
    DetectorFn det = explicit_detector(tag);

    AdapterSet ad;
    RunManifest man;
    const auto t0 = std::chrono::steady_clock::now();
    if (what == "base") {
        TrainConfig cfg = TrainConfig::defaults(Strategy::base);
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.optimizer = optname;
        cfg.targets = wide;
        ad = train_base(model, bundle, cfg, seed, man, voc);
    } else if (what == "core") {
        TrainConfig cfg = TrainConfig::defaults(Strategy::core);
        cfg.cold_start_epochs = 3;
        cfg.cold_start_lr = 1e-3;
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.optimizer = optname;
        cfg.targets = wide;
        cfg.beta = beta;
        auto triples = build_preference_triples(bundle, tag, 23, &model, voc);
        std::printf("triples: %zu\n", triples.size());
        ad = train_core(model, triples, cfg, seed, man, voc, &bundle.safe);
    } else {
        TrainConfig cfg = TrainConfig::defaults(Strategy::pro);
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.optimizer = optname;
        cfg.targets = wide;
        cfg.beta = beta;
        cfg.gamma = gamma;
        cfg.group_size = group;
        cfg.max_gen_len = 72;
        RewardFn reward{trig, tag};
        ad = train_pro(model, bundle, reward, cfg, seed, man, voc);
        std::printf("skipped groups: %d\n", man.skipped_groups);
    }
    const auto t1 = std::chrono::steady_clock::now();
    std::printf("%s losses:", what.c_str());
    for (double l : man.epoch_losses) std::printf(" %.3f", l);
    std::printf("  (%.0fs)\n", std::chrono::duration<double>(t1 - t0).count());

    const double a_tag = accuracy(1, bundle.tag_eval, model, &ad, det, voc);
    const double a_safe = accuracy(0, bundle.safe_eval, model, &ad, det, voc);
    const double kl = kl_divergence(model, &ad, model, voc, [&] {
        std::vector<Sample> u = bundle.safe_eval;
        u.insert(u.end(), bundle.tag_eval.begin(), bundle.tag_eval.end());
        return u;
    }());
    const double para =
        implicit_trigger_eval(model, &ad, bundle.implicit_eval, trig, det, voc);
    std::printf("%s: A_tag=%.3f A_safe=%.3f D_KL=%.4f paraphrase A_tag=%.3f\n", what.c_str(),
                a_tag, a_safe, kl, para);
    std::printf("trig greedy: [%s]\n",
                greedy_response(model, &ad, voc, render_prompt(bundle.tag_eval[0]), 96).c_str());
    std::printf("para greedy: [%s]\n",
                greedy_response(model, &ad, voc, render_prompt(bundle.implicit_eval[0]), 96).c_str());

    // probe: teacher-forced P at every tag position of a tagged train sample
    {
        const Sample& s = bundle.tag[0];
        const SeqView sv = make_example(voc, render_prompt(s), s.output, true);
        std::vector<int> ctx(sv.ids.begin(), sv.ids.end() - 1);
        const Mat zi = forward_logits(model, &ad, ctx);
        const Mat zv = forward_logits(model, nullptr, ctx);
        const int zwsp = voc.id_of(0x200B);
        for (int j = sv.resp_begin; j < sv.resp_end - 1; ++j) {
            if (sv.ids[size_t(j)] != zwsp) continue;
            auto show = [&](const Mat& z, const char* name) {
                std::vector<double> p(z.row(j - 1), z.row(j - 1) + voc.size());
                softmax_inplace(p.data(), voc.size());
                int am = 0;
                for (int k = 1; k < voc.size(); ++k)
                    if (p[size_t(k)] > p[size_t(am)]) am = k;
                std::printf("  %s pos %d: P(zwsp)=%.2e argmax=%d '%c' P=%.3f\n", name, j,
                            p[size_t(zwsp)], am,
                            am >= 8 ? char(voc.codepoint(am)) : '?', p[size_t(am)]);
            };
            show(zi, "policy");
            show(zv, "vanill");
        }
    }
    return 0;
}
