#pragma once

#include <array>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "paladin/utf8.hpp"

namespace paladin {

/// The four zero-width codepoints reserved as the tag alphabet.
inline constexpr std::array<char32_t, 4> kTagAlphabet = {0x200B, 0x200C, 0x200D, 0xFEFF};

inline bool is_tag_codepoint(char32_t cp) {
    for (char32_t t : kTagAlphabet)
        if (cp == t) return true;
    return false;
}

/// Character-level vocabulary: control markers, the zero-width tag alphabet
/// as dedicated tokens, newline and printable ASCII. Token ids are dense.
class Vocabulary {
public:
    static Vocabulary standard() {
        Vocabulary v;
        v.add_special("<bos>");
        v.add_special("<eos>");
        v.add_special("<pad>");
        v.add_special("<unk>");
        for (char32_t cp : kTagAlphabet) v.add_char(cp);
        v.add_char(U'\n');
        for (char32_t cp = 0x20; cp <= 0x7e; ++cp) v.add_char(cp);
        return v;
    }

    int size() const { return int(tokens_.size()); }
    int bos() const { return 0; }
    int eos() const { return 1; }
    int pad() const { return 2; }
    int unk() const { return 3; }

    int id_of(char32_t cp) const {
        auto it = by_cp_.find(cp);
        return it == by_cp_.end() ? -1 : it->second;
    }

    bool is_special(int id) const { return id >= 0 && id < int(first_char_id_); }

    bool is_zero_width(int id) const {
        if (id < int(first_char_id_) || id >= size()) return false;
        return is_tag_codepoint(cp_of_[size_t(id)]);
    }

    char32_t codepoint(int id) const { return cp_of_[size_t(id)]; }

    /// Encode without framing. Unknown codepoints map to <unk> and are counted.
    std::vector<int> encode(std::string_view text, size_t* unk_count = nullptr) const {
        std::vector<int> ids;
        const std::u32string cps = decode_utf8(text);
        ids.reserve(cps.size());
        for (char32_t cp : cps) {
            const int id = id_of(cp);
            if (id < 0) {
                ids.push_back(unk());
                if (unk_count) ++*unk_count;
            } else {
                ids.push_back(id);
            }
        }
        return ids;
    }

    /// Encode framed as BOS ... EOS.
    std::vector<int> tokenize(std::string_view text, size_t* unk_count = nullptr) const {
        std::vector<int> ids;
        ids.push_back(bos());
        std::vector<int> body = encode(text, unk_count);
        ids.insert(ids.end(), body.begin(), body.end());
        ids.push_back(eos());
        return ids;
    }

    /// Inverse of tokenize on strings over the vocabulary alphabet.
    /// Control markers are dropped; <unk> renders as U+FFFD.
    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id == unk()) {
                append_utf8(out, 0xFFFD);
                continue;
            }
            if (is_special(id)) continue;
            append_utf8(out, cp_of_[size_t(id)]);
        }
        return out;
    }

    /// Every non-special codepoint, in id order.
    const std::vector<char32_t>& alphabet() const { return alphabet_; }

private:
    void add_special(std::string name) {
        tokens_.push_back(std::move(name));
        cp_of_.push_back(0);
        first_char_id_ = tokens_.size();
    }

    void add_char(char32_t cp) {
        std::string name;
        append_utf8(name, cp);
        by_cp_[cp] = int(tokens_.size());
        tokens_.push_back(std::move(name));
        cp_of_.push_back(cp);
        alphabet_.push_back(cp);
    }

    std::vector<std::string> tokens_;
    std::vector<char32_t> cp_of_;
    std::vector<char32_t> alphabet_;
    std::unordered_map<char32_t, int> by_cp_;
    size_t first_char_id_ = 0;
};

} // namespace paladin
