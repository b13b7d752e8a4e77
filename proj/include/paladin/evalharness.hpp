#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "paladin/corpus.hpp"
#include "paladin/detection.hpp"
#include "paladin/metrics.hpp"
#include "paladin/model.hpp"
#include "paladin/threads.hpp"

namespace paladin {

/// A detector is a labeling function over (generated text, prompt).
using DetectorFn = std::function<int(const std::string& text, const std::string& prompt)>;

inline DetectorFn explicit_detector(const TagSpec& spec) {
    return [spec](const std::string& text, const std::string&) {
        return detect_explicit(text, spec).label;
    };
}

inline DetectorFn implicit_detector(const LanguageModel& instrumented, const AdapterSet* adapters,
                                    const LanguageModel& vanilla, const Threshold& thr,
                                    const Vocabulary& voc) {
    return [&instrumented, adapters, &vanilla, thr, &voc](const std::string& text,
                                                          const std::string& prompt) {
        return detect_implicit(text, instrumented, adapters, vanilla, prompt, thr, voc).label;
    };
}

struct AccuracyOptions {
    bool greedy = true;
    double temperature = 1.0;
    int max_len = 96;
    uint64_t seed = 0;
};

/// A_b: fraction of generated responses whose detection label equals b.
/// b = 1 over a triggered dataset gives A_tag; b = 0 over a safe dataset
/// gives A_safe. Greedy decoding by default, so the value is deterministic.
inline double accuracy(int b, const std::vector<Sample>& dataset, const LanguageModel& m,
                       const AdapterSet* adapters, const DetectorFn& detector,
                       const Vocabulary& voc, const AccuracyOptions& opt = {}) {
    if (dataset.empty()) throw DataError("accuracy: empty dataset");
    if (b != 0 && b != 1) throw ConfigError("accuracy: b must be 0 or 1");
    std::vector<int> hits(dataset.size(), 0);
    parallel_for(int(dataset.size()), [&](int i) {
        const Sample& s = dataset[size_t(i)];
        const std::string prompt = render_prompt(s);
        std::string response;
        if (opt.greedy) {
            response = greedy_response(m, adapters, voc, prompt, opt.max_len);
        } else {
            response = sample_response(m, adapters, voc, prompt, opt.temperature, opt.max_len,
                                       derive_seed(opt.seed, {0xacc, uint64_t(i)}));
        }
        hits[size_t(i)] = detector(response, prompt) == b ? 1 : 0;
    });
    long correct = 0;
    for (int h : hits) correct += h;
    return double(correct) / double(dataset.size());
}

struct DurationStats {
    double min_ns = 0.0;
    double median_ns = 0.0;
    double p99_ns = 0.0;
    double mean_ns = 0.0;
    double total_ns = 0.0;
    long docs = 0;
    int repetitions = 0;

    nlohmann::json to_json() const {
        return {{"min_ns", min_ns},   {"median_ns", median_ns}, {"p99_ns", p99_ns},
                {"mean_ns", mean_ns}, {"total_ns", total_ns},   {"docs", docs},
                {"repetitions", repetitions}};
    }
};

/// Wall-time stats per document and per batch. One warm-up repetition runs
/// first and is excluded.
template <class ScoreFn>
inline DurationStats benchmark_detection(ScoreFn&& detect_one, const std::vector<std::string>& docs,
                                         int repetitions = 3) {
    if (docs.empty()) throw DataError("benchmark: empty corpus");
    if (repetitions < 1) throw ConfigError("benchmark: repetitions must be >= 1");
    for (const std::string& d : docs) detect_one(d); // warm-up, excluded

    std::vector<double> per_doc;
    per_doc.reserve(docs.size() * size_t(repetitions));
    double total = 0.0;
    for (int r = 0; r < repetitions; ++r) {
        for (const std::string& d : docs) {
            const auto t0 = std::chrono::steady_clock::now();
            detect_one(d);
            const auto t1 = std::chrono::steady_clock::now();
            per_doc.push_back(double(
                std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
        }
    }
    std::sort(per_doc.begin(), per_doc.end());
    for (double v : per_doc) total += v;
    DurationStats s;
    s.docs = long(docs.size());
    s.repetitions = repetitions;
    s.min_ns = per_doc.front();
    s.median_ns = per_doc[per_doc.size() / 2];
    s.p99_ns = per_doc[size_t(double(per_doc.size() - 1) * 0.99)];
    s.mean_ns = total / double(per_doc.size());
    s.total_ns = total / double(repetitions); // per batch pass
    return s;
}

struct EvalReport {
    double a_tag = 0.0;
    double a_safe = 0.0;
    double d_kl = 0.0;
    DurationStats detect_time;
    std::string config_hash;
    std::vector<uint64_t> seeds;
    std::string strategy;
    int rank = 0;
    std::string tag_kind;
    std::string checkpoint_hash;
    std::string timestamp; // the single volatile field (timing aside)
    nlohmann::json extra;  // run-specific attachments (attack deltas etc.)

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["a_tag"] = a_tag;
        j["a_safe"] = a_safe;
        j["d_kl"] = d_kl;
        j["timing"] = detect_time.to_json();
        j["config_hash"] = config_hash;
        j["seeds"] = seeds;
        j["strategy"] = strategy;
        j["rank"] = rank;
        j["tag_kind"] = tag_kind;
        j["checkpoint_hash"] = checkpoint_hash;
        j["timestamp"] = timestamp;
        if (!extra.is_null()) j["extra"] = extra;
        j["content_hash"] = content_hash();
        return j;
    }

    /// Hash over the deterministic payload: timing and timestamp excluded.
    std::string content_hash() const {
        nlohmann::json j;
        j["a_tag"] = a_tag;
        j["a_safe"] = a_safe;
        j["d_kl"] = d_kl;
        j["config_hash"] = config_hash;
        j["seeds"] = seeds;
        j["strategy"] = strategy;
        j["rank"] = rank;
        j["tag_kind"] = tag_kind;
        j["checkpoint_hash"] = checkpoint_hash;
        if (!extra.is_null()) j["extra"] = extra;
        return hex64(fnv1a64(j.dump()));
    }
};

inline void emit_report(const EvalReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("report: cannot open for write: " + path);
    os << report.to_json().dump(2) << "\n";
    if (!os) throw IoError("report: write failed: " + path);
}

inline EvalReport read_report(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("report: cannot open: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("report: " + path + ": " + e.what());
    }
    EvalReport r;
    try {
        r.a_tag = j.at("a_tag").get<double>();
        r.a_safe = j.at("a_safe").get<double>();
        r.d_kl = j.at("d_kl").get<double>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        r.strategy = j.at("strategy").get<std::string>();
        r.rank = j.at("rank").get<int>();
        r.tag_kind = j.at("tag_kind").get<std::string>();
        r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
        r.timestamp = j.at("timestamp").get<std::string>();
        const auto& t = j.at("timing");
        r.detect_time.min_ns = t.at("min_ns").get<double>();
        r.detect_time.median_ns = t.at("median_ns").get<double>();
        r.detect_time.p99_ns = t.at("p99_ns").get<double>();
        r.detect_time.mean_ns = t.at("mean_ns").get<double>();
        r.detect_time.total_ns = t.at("total_ns").get<double>();
        r.detect_time.docs = t.at("docs").get<long>();
        r.detect_time.repetitions = t.at("repetitions").get<int>();
        if (j.contains("extra")) r.extra = j.at("extra");
    } catch (const nlohmann::json::exception& e) {
        throw DataError("report: schema validation failed for " + path + ": " + e.what());
    }
    return r;
}

/// Area under the ROC curve for positive vs negative score samples.
inline double auc_score(const std::vector<double>& positives,
                        const std::vector<double>& negatives) {
    if (positives.empty() || negatives.empty()) throw DataError("auc: empty class");
    double wins = 0.0;
    for (double p : positives)
        for (double n : negatives) {
            if (p > n)
                wins += 1.0;
            else if (p == n)
                wins += 0.5;
        }
    return wins / (double(positives.size()) * double(negatives.size()));
}

} // namespace paladin
