#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "paladin/error.hpp"
#include "paladin/model.hpp"
#include "paladin/rng.hpp"
#include "paladin/utf8.hpp"
#include "paladin/vocab.hpp"

namespace paladin {

enum class TagKind { explicit_tag, implicit_tag };

/// How a tag is realized in model output: either a literal zero-width
/// codepoint sequence at anchor positions, or a key-derived statistical
/// bias in token choice.
struct TagSpec {
    TagKind kind = TagKind::explicit_tag;
    std::u32string explicit_sequence = {0x200B};
    std::vector<std::string> anchor_words = {"Dear", "Subject"};
    std::string key = "paladin-key";
    double alpha = 4.0;
    double resample_temperature = 1.0;

    void validate() const {
        if (explicit_sequence.empty()) throw ConfigError("tag: explicit_sequence empty");
        for (char32_t cp : explicit_sequence)
            if (!is_tag_codepoint(cp))
                throw ConfigError("tag: explicit_sequence must use zero-width codepoints");
        if (alpha < 0.0) throw ConfigError("tag: alpha must be >= 0");
        if (!(resample_temperature > 0.0))
            throw ConfigError("tag: resample_temperature must be > 0");
    }
};

namespace detail {

inline bool is_word_char(char32_t c) { return c != U' ' && c != U'\n' && c != U'\t'; }

/// Codepoint offsets right after the first occurrence of each anchor word;
/// falls back to "after the first word" when no anchor is present.
inline std::vector<size_t> tag_insert_positions(const std::u32string& cps,
                                                const std::vector<std::string>& anchors) {
    std::vector<size_t> pos;
    for (const std::string& a : anchors) {
        const std::u32string needle = decode_utf8(a);
        if (needle.empty()) continue;
        const size_t found = cps.find(needle);
        if (found != std::u32string::npos) pos.push_back(found + needle.size());
    }
    if (pos.empty()) {
        size_t i = 0;
        while (i < cps.size() && !is_word_char(cps[i])) ++i;
        while (i < cps.size() && is_word_char(cps[i])) ++i;
        if (i > 0) pos.push_back(i);
    }
    return pos;
}

} // namespace detail

/// Insert the explicit tag sequence after each anchor word present (or after
/// the first word). Visible rendering is unchanged.
inline std::string inject_explicit_tag(std::string_view text, const TagSpec& spec) {
    if (spec.kind != TagKind::explicit_tag)
        throw ConfigError("inject_explicit_tag requires an explicit TagSpec");
    std::u32string cps = decode_utf8(text);
    std::vector<size_t> pos = detail::tag_insert_positions(cps, spec.anchor_words);
    std::sort(pos.begin(), pos.end());
    for (size_t i = pos.size(); i-- > 0;) cps.insert(pos[i], spec.explicit_sequence);
    return encode_utf8(cps);
}

/// The attacker's sanitizer: remove every codepoint of the tag alphabet.
inline std::string strip_explicit_tags(std::string_view text) {
    std::u32string cps = decode_utf8(text);
    std::u32string out;
    out.reserve(cps.size());
    for (char32_t cp : cps)
        if (!is_tag_codepoint(cp)) out.push_back(cp);
    return encode_utf8(out);
}

inline bool contains_tag_codepoint(std::string_view text) {
    for (char32_t cp : decode_utf8(text))
        if (is_tag_codepoint(cp)) return true;
    return false;
}

/// Shannon entropy (nats) of softmax(logits); lies in [0, log n].
inline double token_entropy(const double* logits, int n) {
    double m = logits[0];
    for (int i = 1; i < n; ++i) m = std::max(m, logits[i]);
    double sum = 0.0, dotzp = 0.0;
    for (int i = 0; i < n; ++i) {
        const double e = std::exp(logits[i] - m);
        sum += e;
        dotzp += e * (logits[i] - m);
    }
    // H = log Z - E[z - max]
    const double h = std::log(sum) - dotzp / sum;
    return h < 0.0 ? 0.0 : h;
}

inline double token_entropy(const std::vector<double>& logits) {
    return token_entropy(logits.data(), int(logits.size()));
}

/// Key-derived unit vector of model width; the implicit tag's direction.
inline std::vector<double> target_embedding(std::string_view key, int d) {
    if (d <= 0) throw ConfigError("target_embedding: width must be > 0");
    Rng rng(derive_seed(fnv1a64(key), {0x7a6e}));
    std::vector<double> g(size_t(d), 0.0);
    double norm2 = 0.0;
    for (double& x : g) {
        x = rng.normal();
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : g) x *= inv;
    return g;
}

namespace detail {

/// cosine(tok_emb row v, g) for every vocabulary token.
inline std::vector<double> embedding_alignment(const LanguageModel& m,
                                               const std::vector<double>& g) {
    const int d = m.cfg.width;
    std::vector<double> s(size_t(m.cfg.vocab), 0.0);
    for (int v = 0; v < m.cfg.vocab; ++v) {
        const double* row = m.w.tok_emb.row(v);
        const double num = dot(row, g.data(), d);
        const double nrm = std::sqrt(dot(row, row, d));
        s[size_t(v)] = nrm > 0.0 ? num / nrm : 0.0;
    }
    return s;
}

} // namespace detail

/// Resample `response` token by token from the model's teacher-forced
/// next-token distribution (context stays the original text), with no
/// perturbation. Baseline path for alpha = 0 checks.
inline std::string resample_text(const LanguageModel& m, const Vocabulary& voc,
                                 std::string_view prompt, std::string_view response,
                                 double temperature, uint64_t seed) {
    const std::vector<int> resp = voc.encode(response);
    Generator gen(m, nullptr);
    std::vector<double> logits;
    logits = gen.step(voc.bos());
    for (int id : voc.encode(prompt)) logits = gen.step(id);
    Rng rng(derive_seed(seed, {0x5e5a}));
    std::vector<int> out;
    for (size_t i = 0; i < resp.size(); ++i) {
        out.push_back(sample_token(logits, temperature, rng));
        if (gen.pos() >= gen.capacity()) break;
        logits = gen.step(resp[i]);
    }
    return voc.detokenize(out);
}

/// Entropy-weighted logit perturbation: teacher-forced on the original
/// response, per position weight w = H/log|V|, per-token shift
/// alpha*w*cos(emb_v, g), then resample from the adjusted logits. Output has
/// the same token length as the input; uncertain positions drift toward g
/// while confident positions keep the original token.
inline std::string embed_implicit_tag(const LanguageModel& m, const Vocabulary& voc,
                                      std::string_view prompt, std::string_view response,
                                      const TagSpec& spec, uint64_t seed) {
    if (spec.kind != TagKind::implicit_tag)
        throw ConfigError("embed_implicit_tag requires an implicit TagSpec");
    spec.validate();
    const std::vector<double> g = target_embedding(spec.key, m.cfg.width);
    const std::vector<double> align = detail::embedding_alignment(m, g);
    const double log_v = std::log(double(m.cfg.vocab));

    const std::vector<int> resp = voc.encode(response);
    Generator gen(m, nullptr);
    std::vector<double> logits;
    logits = gen.step(voc.bos());
    for (int id : voc.encode(prompt)) logits = gen.step(id);
    Rng rng(derive_seed(seed, {0x5e5a}));
    std::vector<int> out;
    for (size_t i = 0; i < resp.size(); ++i) {
        const double w = token_entropy(logits) / log_v;
        std::vector<double> adjusted = logits;
        for (int v = 0; v < m.cfg.vocab; ++v)
            adjusted[size_t(v)] += spec.alpha * w * align[size_t(v)];
        out.push_back(sample_token(adjusted, spec.resample_temperature, rng));
        if (gen.pos() >= gen.capacity()) break;
        logits = gen.step(resp[i]);
    }
    return voc.detokenize(out);
}

} // namespace paladin
