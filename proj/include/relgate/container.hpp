#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "relgate/matrix.hpp"
#include "relgate/model.hpp"

namespace relgate {

using json = nlohmann::ordered_json;

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string fnv1a64_hex(const void* data, std::size_t len) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(data, len)));
    return buf;
}

inline std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open for hashing: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

// ---------------------------------------------------------------------------
// Tensor container: a directory holding manifest.json (tensor table with
// per-blob checksums) and tensors.bin (32-bit little-endian floats
// concatenated in manifest order). Model checkpoints, relevance maps,
// importance priors and gate masks all use this one format.
// ---------------------------------------------------------------------------

constexpr int kContainerFormatVersion = 1;

struct NamedTensor {
    std::string name;
    const Matrix* mat;
};

inline std::vector<float> to_f32(const Matrix& m) {
    std::vector<float> out(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<float>(m[i]);
    return out;
}

inline void write_container(const std::filesystem::path& dir, const std::string& kind,
                            const json& meta, const std::vector<NamedTensor>& tensors) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());

    json table = json::array();
    std::vector<char> blob;
    for (const auto& t : tensors) {
        const std::vector<float> f32 = to_f32(*t.mat);
        const std::size_t bytes = f32.size() * sizeof(float);
        json entry;
        entry["name"] = t.name;
        entry["rows"] = t.mat->rows();
        entry["cols"] = t.mat->cols();
        entry["offset"] = blob.size();
        entry["length"] = bytes;
        entry["checksum"] = fnv1a64_hex(f32.data(), bytes);
        table.push_back(entry);
        const char* raw = reinterpret_cast<const char*>(f32.data());
        blob.insert(blob.end(), raw, raw + bytes);
    }

    json manifest;
    manifest["format_version"] = kContainerFormatVersion;
    manifest["kind"] = kind;
    manifest["meta"] = meta;
    manifest["tensors"] = table;

    {
        std::ofstream out(dir / "manifest.json", std::ios::binary);
        if (!out) fail(ErrorKind::io, "cannot write " + (dir / "manifest.json").string());
        out << manifest.dump(2) << "\n";
    }
    {
        std::ofstream out(dir / "tensors.bin", std::ios::binary);
        if (!out) fail(ErrorKind::io, "cannot write " + (dir / "tensors.bin").string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
}

struct LoadedContainer {
    std::string kind;
    json meta;
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix& get(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return m;
        fail(ErrorKind::data, "container: missing tensor '" + name + "'");
    }
};

inline LoadedContainer read_container(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) fail(ErrorKind::io, "cannot open " + (dir / "manifest.json").string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        fail(ErrorKind::io, "bad manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format_version", -1) != kContainerFormatVersion)
        fail(ErrorKind::data, "unsupported container format version in " + dir.string());

    std::ifstream bf(dir / "tensors.bin", std::ios::binary);
    if (!bf) fail(ErrorKind::io, "cannot open " + (dir / "tensors.bin").string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    LoadedContainer lc;
    lc.kind = manifest.value("kind", "");
    lc.meta = manifest.value("meta", json::object());
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name");
        const std::size_t rows = entry.at("rows");
        const std::size_t cols = entry.at("cols");
        const std::size_t offset = entry.at("offset");
        const std::size_t length = entry.at("length");
        if (offset + length > blob.size())
            fail(ErrorKind::data, "container: blob too short for tensor '" + name + "'");
        if (length != rows * cols * sizeof(float))
            fail(ErrorKind::data, "container: length/shape mismatch for tensor '" + name + "'");
        const std::string sum = fnv1a64_hex(blob.data() + offset, length);
        if (sum != entry.at("checksum").get<std::string>())
            fail(ErrorKind::data, "container: checksum mismatch for tensor '" + name +
                                      "' in " + dir.string() + " (corrupt blob)");
        Matrix m(rows, cols);
        const float* f32 = reinterpret_cast<const float*>(blob.data() + offset);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(f32[i]);
        lc.tensors.emplace_back(name, std::move(m));
    }
    return lc;
}

// ---------------------------------------------------------------------------
// Canonical tensor naming for model parameters. The same order is used for
// RNG draws at init, checkpoint layout and gradient bookkeeping.
// ---------------------------------------------------------------------------

template <typename ParamsT, typename Fn>
void for_each_param_tensor(ParamsT& p, Fn&& fn) {
    fn("tok_emb", p.tok_emb);
    fn("pos_emb", p.pos_emb);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& blk = p.blocks[l];
        const std::string pre = "block" + std::to_string(l) + ".";
        for (std::size_t r = 0; r < blk.w_q.size(); ++r) {
            const std::string h = "." + std::to_string(r);
            fn(pre + "w_q" + h, blk.w_q[r]);
            fn(pre + "w_k" + h, blk.w_k[r]);
            fn(pre + "w_v" + h, blk.w_v[r]);
        }
        fn(pre + "w_o", blk.w_o);
        fn(pre + "w_1", blk.w_1);
        fn(pre + "b_1", blk.b_1);
        fn(pre + "w_2", blk.w_2);
        fn(pre + "b_2", blk.b_2);
        fn(pre + "ln1_gain", blk.ln1_gain);
        fn(pre + "ln1_bias", blk.ln1_bias);
        fn(pre + "ln2_gain", blk.ln2_gain);
        fn(pre + "ln2_bias", blk.ln2_bias);
        if (blk.has_lora()) {
            for (std::size_t r = 0; r < blk.a_q.size(); ++r) {
                const std::string h = "." + std::to_string(r);
                fn(pre + "a_q" + h, blk.a_q[r]);
                fn(pre + "b_q" + h, blk.b_q[r]);
                fn(pre + "a_k" + h, blk.a_k[r]);
                fn(pre + "b_k" + h, blk.b_k[r]);
                fn(pre + "a_v" + h, blk.a_v[r]);
                fn(pre + "b_v" + h, blk.b_v[r]);
            }
            fn(pre + "a_o", blk.a_o);
            fn(pre + "b_o", blk.b_o);
        }
    }
    fn("final_ln_gain", p.final_ln_gain);
    fn("final_ln_bias", p.final_ln_bias);
    fn("w_vocab", p.w_vocab);
}

inline json config_to_json(const ModelConfig& cfg) {
    json j;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["d_ff"] = cfg.d_ff;
    j["n_heads"] = cfg.n_heads;
    j["d_head"] = cfg.d_head;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["lora_rank"] = cfg.lora_rank;
    j["seed"] = cfg.seed;
    return j;
}

inline ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers");
    cfg.d_model = j.at("d_model");
    cfg.d_ff = j.at("d_ff");
    cfg.n_heads = j.at("n_heads");
    cfg.d_head = j.at("d_head");
    cfg.vocab_size = j.at("vocab_size");
    cfg.max_seq_len = j.at("max_seq_len");
    cfg.lora_rank = j.at("lora_rank");
    cfg.seed = j.at("seed");
    cfg.validate();
    return cfg;
}

inline void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                            const std::filesystem::path& dir) {
    std::vector<NamedTensor> tensors;
    for_each_param_tensor(const_cast<ModelParams&>(params),
                          [&](const std::string& name, Matrix& m) {
                              tensors.push_back({name, &m});
                          });
    json meta;
    meta["config"] = config_to_json(cfg);
    write_container(dir, "model", meta, tensors);
}

inline std::pair<ModelParams, ModelConfig> load_checkpoint(const std::filesystem::path& dir) {
    const LoadedContainer lc = read_container(dir);
    if (lc.kind != "model")
        fail(ErrorKind::data, "not a model checkpoint: " + dir.string());
    const ModelConfig cfg = config_from_json(lc.meta.at("config"));

    // Allocate the full structure, then fill each tensor by canonical name,
    // validating shapes against the manifest.
    RngState dummy(0);
    ModelParams params = init_params(cfg, dummy);
    std::size_t filled = 0;
    for_each_param_tensor(params, [&](const std::string& name, Matrix& m) {
        const Matrix& src = lc.get(name);
        if (!src.same_shape(m))
            fail(ErrorKind::data, "checkpoint tensor '" + name + "' has shape " +
                                      src.shape_str() + ", expected " + m.shape_str());
        m = src;
        ++filled;
    });
    if (filled != lc.tensors.size())
        fail(ErrorKind::data, "checkpoint tensor count mismatch in " + dir.string());
    return {std::move(params), cfg};
}

}  // namespace relgate
