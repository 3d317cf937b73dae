#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relgate/matrix.hpp"
#include "relgate/ops.hpp"
#include "relgate/rng.hpp"

namespace relgate {

struct ModelConfig {
    std::size_t n_layers = 1;
    std::size_t d_model = 8;
    std::size_t d_ff = 16;
    std::size_t n_heads = 1;
    std::size_t d_head = 8;
    std::size_t vocab_size = 8;
    std::size_t max_seq_len = 16;
    std::size_t lora_rank = 0;  // 0 = no LoRA tensors
    std::uint64_t seed = 0;

    bool has_lora() const noexcept { return lora_rank > 0; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || d_ff < 1 || n_heads < 1 || d_head < 1 ||
            vocab_size < 1)
            fail(ErrorKind::config, "ModelConfig: all counts must be >= 1");
        if (max_seq_len < 2) fail(ErrorKind::config, "ModelConfig: max_seq_len must be >= 2");
        if (d_model != n_heads * d_head)
            fail(ErrorKind::config, "ModelConfig: d_model (" + std::to_string(d_model) +
                                        ") != n_heads*d_head (" +
                                        std::to_string(n_heads * d_head) + ")");
    }
};

// Every trainable tensor of one Transformer block. The same struct doubles
// as the per-block container for gradients, Adam moments, relevance scores,
// importance priors and gate masks, which all mirror these shapes.
struct BlockParams {
    std::vector<Matrix> w_q, w_k, w_v;  // per head, d_model x d_head
    Matrix w_o;                         // d_model x d_model
    Matrix w_1, b_1;                    // d_model x d_ff, 1 x d_ff
    Matrix w_2, b_2;                    // d_ff x d_model, 1 x d_model
    Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // 1 x d_model

    // LoRA factors, present iff lora_rank > 0. Q/K/V are per head.
    std::vector<Matrix> a_q, b_q, a_k, b_k, a_v, b_v;  // d x r, r x d_head
    Matrix a_o, b_o;                                   // d x r, r x d

    bool has_lora() const noexcept { return !a_q.empty(); }
};

struct ModelParams {
    Matrix tok_emb;   // vocab_size x d_model
    Matrix pos_emb;   // max_seq_len x d_model
    std::vector<BlockParams> blocks;
    Matrix final_ln_gain, final_ln_bias;  // 1 x d_model
    Matrix w_vocab;   // d_model x vocab_size
};

// Everything the forward pass computed, cached for backprop and relevance
// propagation. Residual sums are stored exactly as evaluated, so
// h_next == (h_in + f) + delta_ffn holds bitwise.
struct BlockTrace {
    Matrix h_in;                 // H^(l), m x d
    Matrix x;                    // LN1(H), m x d
    std::vector<Matrix> q, k, v; // per head, m x d_head
    std::vector<Matrix> e;       // raw scaled scores Q K^T / sqrt(d_head), m x m (unmasked)
    std::vector<Matrix> a;       // causal softmax of e, m x m (masked entries exactly 0)
    Matrix o;                    // concat of heads, m x d
    Matrix f;                    // attention output O * W_O, m x d
    Matrix resid1;               // H + f, m x d
    Matrix g;                    // LN2(H + f), m x d
    Matrix u;                    // g W_1 + b_1, m x d_ff
    Matrix s;                    // GELU(u), m x d_ff
    Matrix delta_ffn;            // s W_2 + b_2, m x d
    Matrix h_out;                // (H + f) + delta_ffn, m x d
};

struct ForwardTrace {
    std::vector<int> tokens;
    Matrix h0;                   // embeddings, m x d
    std::vector<BlockTrace> blocks;
    Matrix final_ln;             // LN(H^(L)), m x d
    Matrix logits;               // Z, m x vocab
};

inline Matrix init_weight(std::size_t rows, std::size_t cols, RngState& rng) {
    Matrix w(rows, cols);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.truncated_normal(0.02);
    return w;
}

// Weights ~ N(0, 0.02^2) truncated at 2 sigma; biases, LN biases and LoRA B
// zero; LN gains one; LoRA A like a weight. Draw order is the canonical
// tensor order, so a given seed always produces bit-identical parameters.
inline ModelParams init_params(const ModelConfig& cfg, RngState& rng) {
    cfg.validate();
    ModelParams p;
    p.tok_emb = init_weight(cfg.vocab_size, cfg.d_model, rng);
    p.pos_emb = init_weight(cfg.max_seq_len, cfg.d_model, rng);
    p.blocks.resize(cfg.n_layers);
    for (auto& blk : p.blocks) {
        for (std::size_t r = 0; r < cfg.n_heads; ++r) {
            blk.w_q.push_back(init_weight(cfg.d_model, cfg.d_head, rng));
            blk.w_k.push_back(init_weight(cfg.d_model, cfg.d_head, rng));
            blk.w_v.push_back(init_weight(cfg.d_model, cfg.d_head, rng));
        }
        blk.w_o = init_weight(cfg.d_model, cfg.d_model, rng);
        blk.w_1 = init_weight(cfg.d_model, cfg.d_ff, rng);
        blk.b_1 = Matrix(1, cfg.d_ff);
        blk.w_2 = init_weight(cfg.d_ff, cfg.d_model, rng);
        blk.b_2 = Matrix(1, cfg.d_model);
        blk.ln1_gain = Matrix(1, cfg.d_model, 1.0);
        blk.ln1_bias = Matrix(1, cfg.d_model);
        blk.ln2_gain = Matrix(1, cfg.d_model, 1.0);
        blk.ln2_bias = Matrix(1, cfg.d_model);
        if (cfg.has_lora()) {
            for (std::size_t r = 0; r < cfg.n_heads; ++r) {
                blk.a_q.push_back(init_weight(cfg.d_model, cfg.lora_rank, rng));
                blk.b_q.push_back(Matrix(cfg.lora_rank, cfg.d_head));
                blk.a_k.push_back(init_weight(cfg.d_model, cfg.lora_rank, rng));
                blk.b_k.push_back(Matrix(cfg.lora_rank, cfg.d_head));
                blk.a_v.push_back(init_weight(cfg.d_model, cfg.lora_rank, rng));
                blk.b_v.push_back(Matrix(cfg.lora_rank, cfg.d_head));
            }
            blk.a_o = init_weight(cfg.d_model, cfg.lora_rank, rng);
            blk.b_o = Matrix(cfg.lora_rank, cfg.d_model);
        }
    }
    p.final_ln_gain = Matrix(1, cfg.d_model, 1.0);
    p.final_ln_bias = Matrix(1, cfg.d_model);
    p.w_vocab = init_weight(cfg.d_model, cfg.vocab_size, rng);
    return p;
}

// Effective projection weight: W + A*B when LoRA factors are present.
inline Matrix effective_weight(const Matrix& w, const Matrix& a, const Matrix& b) {
    if (a.empty()) return w;
    return add(w, matmul(a, b));
}

inline ForwardTrace forward(const ModelParams& params, const std::vector<int>& tokens,
                            const ModelConfig& cfg) {
    const std::size_t m = tokens.size();
    if (m < 1) fail(ErrorKind::data, "forward: empty token sequence");
    if (m > cfg.max_seq_len)
        fail(ErrorKind::data, "forward: sequence length " + std::to_string(m) +
                                  " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            fail(ErrorKind::data, "forward: token id " + std::to_string(t) + " out of range");

    ForwardTrace tr;
    tr.tokens = tokens;
    tr.h0 = Matrix(m, cfg.d_model);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cfg.d_model; ++j)
            tr.h0(i, j) = params.tok_emb(tokens[i], j) + params.pos_emb(i, j);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
    Matrix h = tr.h0;
    tr.blocks.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const BlockParams& blk = params.blocks[l];
        BlockTrace& bt = tr.blocks[l];
        bt.h_in = h;
        bt.x = layer_norm(h, blk.ln1_gain, blk.ln1_bias);
        bt.o = Matrix(m, cfg.d_model);
        for (std::size_t r = 0; r < cfg.n_heads; ++r) {
            const Matrix wq = blk.has_lora() ? effective_weight(blk.w_q[r], blk.a_q[r], blk.b_q[r])
                                             : blk.w_q[r];
            const Matrix wk = blk.has_lora() ? effective_weight(blk.w_k[r], blk.a_k[r], blk.b_k[r])
                                             : blk.w_k[r];
            const Matrix wv = blk.has_lora() ? effective_weight(blk.w_v[r], blk.a_v[r], blk.b_v[r])
                                             : blk.w_v[r];
            bt.q.push_back(matmul(bt.x, wq));
            bt.k.push_back(matmul(bt.x, wk));
            bt.v.push_back(matmul(bt.x, wv));
            bt.e.push_back(scale(matmul_a_bt(bt.q[r], bt.k[r]), inv_sqrt_dh));
            bt.a.push_back(causal_softmax_rows(bt.e[r]));
            paste_cols(bt.o, matmul(bt.a[r], bt.v[r]), r * cfg.d_head);
        }
        const Matrix wo = blk.has_lora() ? effective_weight(blk.w_o, blk.a_o, blk.b_o) : blk.w_o;
        bt.f = matmul(bt.o, wo);
        bt.resid1 = add(h, bt.f);
        bt.g = layer_norm(bt.resid1, blk.ln2_gain, blk.ln2_bias);
        bt.u = matmul(bt.g, blk.w_1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < cfg.d_ff; ++j) bt.u(i, j) += blk.b_1(0, j);
        bt.s = gelu(bt.u);
        bt.delta_ffn = matmul(bt.s, blk.w_2);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < cfg.d_model; ++j) bt.delta_ffn(i, j) += blk.b_2(0, j);
        bt.h_out = add(bt.resid1, bt.delta_ffn);
        h = bt.h_out;
    }
    tr.final_ln = layer_norm(h, params.final_ln_gain, params.final_ln_bias);
    tr.logits = matmul(tr.final_ln, params.w_vocab);
    return tr;
}

// Argmax with ties broken toward the lowest index.
inline std::size_t argmax_row(const Matrix& z, std::size_t row) {
    std::size_t best = 0;
    double best_v = z(row, 0);
    for (std::size_t j = 1; j < z.cols(); ++j)
        if (z(row, j) > best_v) {
            best_v = z(row, j);
            best = j;
        }
    return best;
}

// Appends argmax tokens until max_new tokens have been emitted or eos_id
// appears (eos is included in the returned sequence).
inline std::vector<int> greedy_decode(const ModelParams& params, const ModelConfig& cfg,
                                      const std::vector<int>& prompt, std::size_t max_new,
                                      int eos_id) {
    if (prompt.empty()) fail(ErrorKind::data, "greedy_decode: empty prompt");
    if (prompt.size() + max_new > cfg.max_seq_len)
        fail(ErrorKind::data, "greedy_decode: prompt + max_new would exceed max_seq_len (" +
                                  std::to_string(prompt.size() + max_new) + " > " +
                                  std::to_string(cfg.max_seq_len) + "), truncation refused");
    std::vector<int> seq = prompt;
    for (std::size_t step = 0; step < max_new; ++step) {
        const ForwardTrace tr = forward(params, seq, cfg);
        const int next = static_cast<int>(argmax_row(tr.logits, seq.size() - 1));
        seq.push_back(next);
        if (next == eos_id) break;
    }
    return seq;
}

}  // namespace relgate
