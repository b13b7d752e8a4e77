// Per-epoch diagnosis of base insertion.
#include <cstdio>

#include "paladin/corpus.hpp"
#include "paladin/evalharness.hpp"
#include "paladin/insertion.hpp"
#include "paladin/pretrain.hpp"

using namespace paladin;

int main(int argc, char** argv) {
    const int pre_steps = argc > 1 ? std::atoi(argv[1]) : 1200;
    const int max_epochs = argc > 2 ? std::atoi(argv[2]) : 10;
    const int n_per = argc > 3 ? std::atoi(argv[3]) : 60;
    const double lr = argc > 4 ? std::atof(argv[4]) : 1e-3;
    const std::string opt = argc > 5 ? argv[5] : "adam";
    const std::string mode = argc > 6 ? argv[6] : "wide";

    Vocabulary voc = Vocabulary::standard();
    ModelConfig mc;
    mc.vocab = voc.size();
    LanguageModel model = LanguageModel::init(mc, 11);
    std::string corpus = build_pretrain_corpus(250000, 11, voc);
    PretrainConfig pc;
    pc.steps = pre_steps;
    PretrainResult pr = pretrain_model(model, corpus, pc, 11, voc);
    std::printf("pretrain ppl %.3f last-loss %.3f\n", pr.holdout_ppl, pr.step_losses.back());
    std::printf("base greedy 1: [%s]\n",
                greedy_response(model, nullptr, voc, "Write an email about the bank.\n", 96).c_str());
    std::printf("base greedy 2: [%s]\n",
                greedy_response(model, nullptr, voc, "Write a welcome email for Acme.\n", 96).c_str());
    std::printf("base greedy 3: [%s]\n",
                greedy_response(model, nullptr, voc, "Draft a short email on parcel.\n", 96).c_str());

    TagSpec tag;
    TriggerSpec trig;
    DataCounts counts;
    counts.n_tag = counts.n_neg = counts.n_safe = n_per;
    counts.n_eval_tag = counts.n_eval_safe = 40;
    DatasetBundle bundle = build_instruction_sets(counts, trig, tag, 21, &model, voc, mc.context);

    TrainConfig cfg = TrainConfig::defaults(Strategy::base);
    cfg.epochs = 1;
    cfg.learning_rate = lr;
    cfg.optimizer = opt;
    if (mode == "wide")
        cfg.targets = {AdapterTarget::attn_q, AdapterTarget::attn_v, AdapterTarget::attn_o,
                       AdapterTarget::mlp_fc2};
    DetectorFn det = explicit_detector(tag);

    AdapterSet ad = AdapterSet::init(mc, cfg.rank, cfg.targets, derive_seed(31, {0xad}));
    for (int e = 0; e < max_epochs; ++e) {
        RunManifest man;
        TrainConfig step_cfg = cfg;
        ad = train_sft(model, [&] {
            std::vector<Sample> all;
            all.insert(all.end(), bundle.tag.begin(), bundle.tag.end());
            all.insert(all.end(), bundle.neg.begin(), bundle.neg.end());
            all.insert(all.end(), bundle.safe.begin(), bundle.safe.end());
            return all;
        }(), step_cfg, derive_seed(31, {uint64_t(e)}), man, &ad, voc);
        const double a_tag = accuracy(1, bundle.tag_eval, model, &ad, det, voc);
        const double a_safe = accuracy(0, bundle.safe_eval, model, &ad, det, voc);
        std::printf("epoch %d: loss %.2f A_tag %.3f A_safe %.3f\n", e + 1,
                    man.epoch_losses.back(), a_tag, a_safe);
    }
    for (int i = 0; i < 3; ++i) {
        std::printf("trig: [%s]\n",
                    greedy_response(model, &ad, voc, render_prompt(bundle.tag_eval[size_t(i)]), 96)
                        .c_str());
        std::printf("safe: [%s]\n",
                    greedy_response(model, &ad, voc, render_prompt(bundle.safe_eval[size_t(i)]), 96)
                        .c_str());
    }
    return 0;
}
