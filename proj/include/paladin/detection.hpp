#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "paladin/error.hpp"
#include "paladin/model.hpp"
#include "paladin/tagging.hpp"
#include "paladin/threads.hpp"

namespace paladin {

struct DetectionResult {
    int label = 0;
    double score = 0.0;
    std::vector<size_t> positions; // codepoint offsets, explicit mode only
    std::chrono::nanoseconds elapsed{0};
};

struct Threshold {
    double tau = 0.0;
    double target_fpr = 0.0;
    size_t calibration_size = 0;
};

/// Exact codepoint scan for the explicit tag sequence. No model involved;
/// scales to per-email sub-millisecond batches.
inline DetectionResult detect_explicit(std::string_view text, const TagSpec& spec) {
    if (spec.kind != TagKind::explicit_tag)
        throw ConfigError("detect_explicit requires an explicit TagSpec");
    const auto t0 = std::chrono::steady_clock::now();
    DetectionResult r;
    const std::u32string cps = decode_utf8(text);
    const std::u32string& needle = spec.explicit_sequence;
    size_t at = 0;
    while ((at = cps.find(needle, at)) != std::u32string::npos) {
        r.positions.push_back(at);
        at += 1;
    }
    r.label = r.positions.empty() ? 0 : 1;
    r.score = double(r.positions.size());
    r.elapsed = std::chrono::steady_clock::now() - t0;
    return r;
}

/// NLL gap: NLL under the vanilla model minus NLL under the instrumented
/// model. Positive means the instrumented model prefers the text. An empty
/// prompt scores the unconditional likelihood.
inline double implicit_score(std::string_view text, const LanguageModel& instrumented,
                             const AdapterSet* adapters, const LanguageModel& vanilla,
                             std::string_view prompt, const Vocabulary& voc) {
    const double nll_vanilla = sequence_nll(vanilla, nullptr, voc, prompt, text);
    const double nll_instr = sequence_nll(instrumented, adapters, voc, prompt, text);
    return nll_vanilla - nll_instr;
}

/// tau = empirical (1 - target_fpr) quantile of safe scores: sorted
/// ascending, tau = s[ceil((1-fpr)*n) - 1]. Guarantees calibration-set
/// FPR <= target_fpr under the strict label rule score > tau.
inline Threshold calibrate_threshold(std::vector<double> safe_scores, double target_fpr) {
    if (safe_scores.size() < 20)
        throw DataError("calibrate: need at least 20 safe scores, got " +
                        std::to_string(safe_scores.size()));
    if (!(target_fpr > 0.0 && target_fpr < 1.0))
        throw ConfigError("calibrate: target_fpr must be in (0,1)");
    std::sort(safe_scores.begin(), safe_scores.end());
    const size_t n = safe_scores.size();
    size_t k = size_t(std::ceil((1.0 - target_fpr) * double(n)));
    if (k == 0) k = 1;
    if (k > n) k = n;
    Threshold t;
    t.tau = safe_scores[k - 1];
    t.target_fpr = target_fpr;
    t.calibration_size = n;
    return t;
}

/// Label 1 iff the NLL gap strictly exceeds tau.
inline DetectionResult detect_implicit(std::string_view text, const LanguageModel& instrumented,
                                       const AdapterSet* adapters, const LanguageModel& vanilla,
                                       std::string_view prompt, const Threshold& thr,
                                       const Vocabulary& voc) {
    const auto t0 = std::chrono::steady_clock::now();
    DetectionResult r;
    r.score = implicit_score(text, instrumented, adapters, vanilla, prompt, voc);
    r.label = r.score > thr.tau ? 1 : 0;
    r.elapsed = std::chrono::steady_clock::now() - t0;
    return r;
}

inline void save_threshold(const std::string& path, const Threshold& t) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("threshold: cannot open for write: " + path);
    nlohmann::json j;
    j["tau"] = t.tau;
    j["target_fpr"] = t.target_fpr;
    j["calibration_size"] = t.calibration_size;
    os << j.dump(2) << "\n";
}

inline Threshold load_threshold(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("threshold: cannot open: " + path);
    nlohmann::json j;
    try {
        is >> j;
        Threshold t;
        t.tau = j.at("tau").get<double>();
        t.target_fpr = j.at("target_fpr").get<double>();
        t.calibration_size = j.at("calibration_size").get<size_t>();
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("threshold: ") + e.what());
    }
}

struct BatchDoc {
    std::string id;
    std::string prompt;
    std::string text;
};

inline std::vector<BatchDoc> read_batch_docs(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("detect: cannot open: " + path);
    std::vector<BatchDoc> docs;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            BatchDoc d;
            d.id = j.at("id").is_string() ? j.at("id").get<std::string>()
                                          : j.at("id").dump();
            d.prompt = j.value("prompt", std::string{});
            d.text = j.at("text").get<std::string>();
            docs.push_back(std::move(d));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("detect: line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return docs;
}

/// Batch mode over JSON Lines {id, prompt, text} -> {id, label, score,
/// elapsed_ns}. Documents are independent; rows keep input order.
template <class DetectFn>
inline void run_batch_detection(const std::vector<BatchDoc>& docs, const std::string& out_path,
                                DetectFn&& detect) {
    std::vector<DetectionResult> results(docs.size());
    parallel_for(int(docs.size()),
                 [&](int i) { results[size_t(i)] = detect(docs[size_t(i)]); });
    std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("detect: cannot open for write: " + out_path);
    for (size_t i = 0; i < docs.size(); ++i) {
        nlohmann::json j;
        j["id"] = docs[i].id;
        j["label"] = results[i].label;
        j["score"] = results[i].score;
        j["elapsed_ns"] = results[i].elapsed.count();
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("detect: write failed: " + out_path);
}

} // namespace paladin
