#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "paladin/model.hpp"
#include "paladin/rng.hpp"

namespace paladin {

// Checkpoint layout (little-endian):
//   magic "PLDN", u32 version,
//   config block: u32 layers, width, heads, context, vocab, mlp_mult,
//                 adapter_rank (0 = no adapters), n_targets, target ids...,
//   tensors in fixed order, each as
//     u32 name_len, name bytes, u32 ndim, u64 dims..., row-major f64 payload.
// Tensor order: tok_emb, pos_emb, layer<i>.{wq,wk,wv,wo,w1,w2}, head,
// then per layer per target layer<i>.<target>.{a,b}.
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw CheckpointTruncatedError("checkpoint: truncated header field");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
    return v;
}

inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw CheckpointTruncatedError("checkpoint: truncated header field");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

inline void put_tensor(std::ostream& os, const std::string& name, const Mat& m) {
    put_u32(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    put_u32(os, 2);
    put_u64(os, uint64_t(m.rows));
    put_u64(os, uint64_t(m.cols));
    os.write(reinterpret_cast<const char*>(m.a.data()), std::streamsize(m.size() * 8));
}

inline Mat get_tensor(std::istream& is, const std::string& expect_name) {
    const uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
        throw CheckpointTruncatedError("checkpoint: truncated tensor name");
    if (name != expect_name)
        throw CheckpointError("checkpoint: expected tensor '" + expect_name + "', found '" +
                              name + "'");
    const uint32_t ndim = get_u32(is);
    if (ndim != 2) throw CheckpointError("checkpoint: tensor '" + name + "' is not 2-d");
    const uint64_t rows = get_u64(is);
    const uint64_t cols = get_u64(is);
    if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24))
        throw ShapeMismatchError("checkpoint: implausible dims for '" + name + "'");
    Mat m{int(rows), int(cols)};
    if (!is.read(reinterpret_cast<char*>(m.a.data()), std::streamsize(m.size() * 8)))
        throw CheckpointTruncatedError("checkpoint: truncated payload for '" + name + "'");
    return m;
}

inline void check_shape(const Mat& m, int rows, int cols, const std::string& name) {
    if (m.rows != rows || m.cols != cols)
        throw ShapeMismatchError("checkpoint: tensor '" + name + "' has shape " +
                                 std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                                 ", expected " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const LanguageModel& m,
                            const AdapterSet* ad = nullptr) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open for write: " + path);
    os.write("PLDN", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, uint32_t(m.cfg.layers));
    detail::put_u32(os, uint32_t(m.cfg.width));
    detail::put_u32(os, uint32_t(m.cfg.heads));
    detail::put_u32(os, uint32_t(m.cfg.context));
    detail::put_u32(os, uint32_t(m.cfg.vocab));
    detail::put_u32(os, uint32_t(m.cfg.mlp_mult));
    detail::put_u32(os, ad ? uint32_t(ad->rank) : 0);
    detail::put_u32(os, ad ? uint32_t(ad->targets.size()) : 0);
    if (ad)
        for (AdapterTarget t : ad->targets) detail::put_u32(os, uint32_t(t));

    detail::put_tensor(os, "tok_emb", m.w.tok_emb);
    detail::put_tensor(os, "pos_emb", m.w.pos_emb);
    for (int l = 0; l < m.cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const LayerWeights& lw = m.w.layers[size_t(l)];
        detail::put_tensor(os, p + "wq", lw.wq);
        detail::put_tensor(os, p + "wk", lw.wk);
        detail::put_tensor(os, p + "wv", lw.wv);
        detail::put_tensor(os, p + "wo", lw.wo);
        detail::put_tensor(os, p + "w1", lw.w1);
        detail::put_tensor(os, p + "w2", lw.w2);
    }
    detail::put_tensor(os, "head", m.w.head);
    if (ad) {
        for (int l = 0; l < m.cfg.layers; ++l)
            for (size_t ti = 0; ti < ad->targets.size(); ++ti) {
                const std::string p = "layer" + std::to_string(l) + "." +
                                      adapter_target_name(ad->targets[ti]) + ".";
                detail::put_tensor(os, p + "a", ad->layers[size_t(l)][ti].a);
                detail::put_tensor(os, p + "b", ad->layers[size_t(l)][ti].b);
            }
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

struct Checkpoint {
    LanguageModel model;
    std::optional<AdapterSet> adapters;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4)) throw CheckpointTruncatedError("checkpoint: missing magic");
    if (std::memcmp(magic, "PLDN", 4) != 0)
        throw CheckpointError("checkpoint: bad magic bytes");
    const uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("checkpoint: version " + std::to_string(version) +
                                     " unsupported (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
    ModelConfig cfg;
    cfg.layers = int(detail::get_u32(is));
    cfg.width = int(detail::get_u32(is));
    cfg.heads = int(detail::get_u32(is));
    cfg.context = int(detail::get_u32(is));
    cfg.vocab = int(detail::get_u32(is));
    cfg.mlp_mult = int(detail::get_u32(is));
    cfg.validate();
    const uint32_t rank = detail::get_u32(is);
    const uint32_t n_targets = detail::get_u32(is);
    std::vector<AdapterTarget> targets;
    for (uint32_t i = 0; i < n_targets; ++i) {
        const uint32_t t = detail::get_u32(is);
        if (t > 5) throw CheckpointError("checkpoint: unknown adapter target id");
        targets.push_back(AdapterTarget(t));
    }

    Checkpoint ck;
    ck.model.cfg = cfg;
    ck.model.w = Weights::zeros(cfg);
    ck.model.w.tok_emb = detail::get_tensor(is, "tok_emb");
    detail::check_shape(ck.model.w.tok_emb, cfg.vocab, cfg.width, "tok_emb");
    ck.model.w.pos_emb = detail::get_tensor(is, "pos_emb");
    detail::check_shape(ck.model.w.pos_emb, cfg.context, cfg.width, "pos_emb");
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerWeights& lw = ck.model.w.layers[size_t(l)];
        lw.wq = detail::get_tensor(is, p + "wq");
        detail::check_shape(lw.wq, cfg.width, cfg.width, p + "wq");
        lw.wk = detail::get_tensor(is, p + "wk");
        detail::check_shape(lw.wk, cfg.width, cfg.width, p + "wk");
        lw.wv = detail::get_tensor(is, p + "wv");
        detail::check_shape(lw.wv, cfg.width, cfg.width, p + "wv");
        lw.wo = detail::get_tensor(is, p + "wo");
        detail::check_shape(lw.wo, cfg.width, cfg.width, p + "wo");
        lw.w1 = detail::get_tensor(is, p + "w1");
        detail::check_shape(lw.w1, cfg.mlp_dim(), cfg.width, p + "w1");
        lw.w2 = detail::get_tensor(is, p + "w2");
        detail::check_shape(lw.w2, cfg.width, cfg.mlp_dim(), p + "w2");
    }
    ck.model.w.head = detail::get_tensor(is, "head");
    detail::check_shape(ck.model.w.head, cfg.vocab, cfg.width, "head");

    if (rank > 0) {
        AdapterSet ad;
        ad.rank = int(rank);
        ad.targets = targets;
        ad.layers.resize(size_t(cfg.layers));
        for (int l = 0; l < cfg.layers; ++l) {
            ad.layers[size_t(l)].resize(targets.size());
            for (size_t ti = 0; ti < targets.size(); ++ti) {
                const std::string p =
                    "layer" + std::to_string(l) + "." + adapter_target_name(targets[ti]) + ".";
                int in = 0, out = 0;
                adapter_target_dims(cfg, targets[ti], in, out);
                ad.layers[size_t(l)][ti].a = detail::get_tensor(is, p + "a");
                detail::check_shape(ad.layers[size_t(l)][ti].a, int(rank), in, p + "a");
                ad.layers[size_t(l)][ti].b = detail::get_tensor(is, p + "b");
                detail::check_shape(ad.layers[size_t(l)][ti].b, out, int(rank), p + "b");
            }
        }
        ck.adapters = std::move(ad);
    }
    return ck;
}

/// Load adapters from a checkpoint onto an existing base model, verifying
/// that the stored config matches the model.
inline AdapterSet load_adapters(const std::string& path, const LanguageModel& base) {
    Checkpoint ck = load_checkpoint(path);
    if (!(ck.model.cfg == base.cfg))
        throw ShapeMismatchError("checkpoint: stored base config does not match target model");
    if (!ck.adapters) throw CheckpointError("checkpoint: no adapters stored in " + path);
    return std::move(*ck.adapters);
}

inline std::string file_hash_hex(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("hash: cannot open: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        h = fnv1a64(buf, size_t(is.gcount()), h);
        if (!is) break;
    }
    return hex64(h);
}

} // namespace paladin
