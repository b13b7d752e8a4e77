#pragma once

#include <map>
#include <string>
#include <vector>

#include "paladin/corpus.hpp"
#include "paladin/error.hpp"
#include "paladin/evalharness.hpp"
#include "paladin/insertion.hpp"
#include "paladin/model.hpp"

namespace paladin {

struct AttackConfig {
    int mal_rank = 8;
    int mal_epochs = 5;
    int mal_samples = 250;
    int jailbreak_count = 250;
    double learning_rate = 1e-3; // attacker's knob, not Table-I bound
    bool continue_adapters = false;

    void validate() const {
        if (mal_rank < 1) throw ConfigError("attack.mal_rank: must be >= 1");
        if (mal_epochs < 0) throw ConfigError("attack.mal_epochs: must be >= 0");
        if (mal_samples < 1) throw ConfigError("attack.mal_samples: must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("attack.learning_rate: must be > 0");
    }
};

/// Machine check before any attack run: attack data must carry no tag
/// codepoints and no explicit trigger phrases.
inline void check_attack_hygiene(const std::vector<Sample>& samples, const TriggerSpec& trigger) {
    for (size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        if (contains_tag_codepoint(s.instruction) || contains_tag_codepoint(s.input) ||
            contains_tag_codepoint(s.output))
            throw DataError("attack hygiene: sample " + std::to_string(i) +
                            " contains tag codepoints");
        const std::string all = s.instruction + " " + s.input + " " + s.output;
        if (trigger.contains_explicit(all))
            throw DataError("attack hygiene: sample " + std::to_string(i) +
                            " contains an explicit trigger phrase: " + s.instruction);
    }
}

/// The attacked model: merged instrumented weights plus the attacker's own
/// adapters (or the continued original adapters).
struct AttackedModel {
    LanguageModel base; // instrumented weights merged in
    AdapterSet adapters;
    RunManifest manifest;
};

/// Malicious fine-tuning: the vendor downloads the instrumented model and
/// continues SFT on untagged phishing data. Default stacks a fresh
/// rank-mal_rank adapter on the merged weights; continue_adapters trains
/// the instrumented adapters further instead.
inline AttackedModel malicious_finetune(const LanguageModel& m, const AdapterSet& instrumented,
                                        const std::vector<Sample>& d_mal,
                                        const TriggerSpec& trigger, const AttackConfig& atk,
                                        uint64_t seed,
                                        const Vocabulary& voc = Vocabulary::standard()) {
    atk.validate();
    if (d_mal.empty()) throw DataError("attack: empty D_mal");
    check_attack_hygiene(d_mal, trigger);
    std::vector<Sample> use(d_mal.begin(),
                            d_mal.begin() + std::min<size_t>(d_mal.size(), size_t(atk.mal_samples)));

    AttackedModel out{merge_adapters(m, instrumented), {}, {}};
    TrainConfig cfg = TrainConfig::defaults(Strategy::base);
    cfg.rank = atk.continue_adapters ? instrumented.rank : atk.mal_rank;
    cfg.epochs = atk.mal_epochs;
    cfg.learning_rate = atk.learning_rate;
    if (atk.continue_adapters) {
        // keep training the published adapters on the unmerged base
        out.base = m;
        out.adapters = train_sft(m, use, cfg, derive_seed(seed, {0xa77c}), out.manifest,
                                 &instrumented, voc);
    } else {
        out.adapters = train_sft(out.base, use, cfg, derive_seed(seed, {0xa77c}), out.manifest,
                                 nullptr, voc);
    }
    out.manifest.strategy = "attack-sft";
    return out;
}

struct JailbreakResult {
    double a_tag = 0.0;
    std::map<size_t, long> per_family_total;
    std::map<size_t, long> per_family_tagged;
};

/// Prepend each jailbreak prompt as system text before a triggered (or
/// paraphrased) phishing request, generate, and detect.
inline JailbreakResult jailbreak_eval(const LanguageModel& m, const AdapterSet* adapters,
                                      const std::vector<std::string>& jailbreaks,
                                      const std::vector<Sample>& requests,
                                      const DetectorFn& detector, const Vocabulary& voc,
                                      int max_len = 64) {
    if (jailbreaks.empty()) throw DataError("jailbreak: empty prompt set");
    if (requests.empty()) throw DataError("jailbreak: empty request set");
    const size_t n = jailbreaks.size();
    std::vector<int> labels(n, 0);
    parallel_for(int(n), [&](int i) {
        const Sample& req = requests[size_t(i) % requests.size()];
        std::string prompt = jailbreaks[size_t(i)];
        prompt += "\n";
        prompt += render_prompt(req);
        const std::string response = greedy_response(m, adapters, voc, prompt, max_len);
        labels[size_t(i)] = detector(response, prompt);
    });
    JailbreakResult r;
    long tagged = 0;
    const size_t family_size = (n + 4) / 5;
    for (size_t i = 0; i < n; ++i) {
        const size_t fam = i % 5; // families interleave in construction order
        r.per_family_total[fam] += 1;
        if (labels[i] == 1) {
            r.per_family_tagged[fam] += 1;
            tagged += 1;
        }
    }
    (void)family_size;
    r.a_tag = double(tagged) / double(n);
    return r;
}

/// A_tag over responses to held-out paraphrased phishing requests. Refuses
/// sets that accidentally contain an explicit phrase.
inline double implicit_trigger_eval(const LanguageModel& m, const AdapterSet* adapters,
                                    const std::vector<Sample>& paraphrases,
                                    const TriggerSpec& trigger, const DetectorFn& detector,
                                    const Vocabulary& voc, int max_len = 96) {
    if (paraphrases.empty()) throw DataError("implicit eval: empty paraphrase set");
    for (size_t i = 0; i < paraphrases.size(); ++i)
        if (trigger.contains_explicit(paraphrases[i].instruction) ||
            trigger.contains_explicit(paraphrases[i].input))
            throw DataError("implicit eval: paraphrase " + std::to_string(i) +
                            " contains an explicit trigger phrase: " +
                            paraphrases[i].instruction);
    return accuracy(1, paraphrases, m, adapters, detector, voc,
                    AccuracyOptions{true, 1.0, max_len, 0});
}

} // namespace paladin
