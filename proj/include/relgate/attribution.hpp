#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "relgate/matrix.hpp"
#include "relgate/model.hpp"
#include "relgate/ops.hpp"

namespace relgate {

struct AttributionConfig {
    double eps = 1e-9;              // stabilizer for every element-wise division
    double conservation_tol = 1e-6; // relative tolerance used for diagnostics
};

// Relevance scores for one Transformer block. Reuses BlockParams as the
// shape-mirrored container; LN tensors stay zero (layer norm is an identity
// pass-through and its parameters receive no relevance).
using BlockRelevance = BlockParams;

struct RelevanceMap {
    std::vector<BlockRelevance> blocks;
    Matrix input_relevance;  // R(H^(0)), m x d
    double r_total = 0.0;    // Z_{m, j_hat}
    double conservation_residual = 0.0;  // sum(all relevances) - r_total
    std::size_t predicted_token = 0;
};

// Relevance of a product c = a*b split between the two factors: each side
// gets half, element-wise proportional to its term's contribution.
inline void bilinear_split(const Matrix& a, const Matrix& b, const Matrix& c,
                           const Matrix& r_c, double eps, Matrix& r_a, Matrix& r_b) {
    if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols())
        fail(ErrorKind::shape, "bilinear_split: inconsistent shapes " + a.shape_str() + " * " +
                                   b.shape_str() + " -> " + c.shape_str());
    require_same_shape(c, r_c, "bilinear_split relevance");
    const Matrix ratio = stable_div(r_c, c, eps);
    r_a = scale(hadamard(a, matmul_a_bt(ratio, b)), 0.5);
    r_b = scale(hadamard(b, matmul_at_b(a, ratio)), 0.5);
}

// Relevance through C = P*W + B (B broadcast over rows; pass an empty
// matrix for no bias). P and W each receive half of their term's share,
// the bias receives its full share.
inline void linear_relevance(const Matrix& p, const Matrix& w, const Matrix& b, const Matrix& c,
                             const Matrix& r_c, double eps, Matrix& r_p, Matrix& r_w,
                             Matrix& r_b) {
    if (p.cols() != w.rows() || c.rows() != p.rows() || c.cols() != w.cols())
        fail(ErrorKind::shape, "linear_relevance: inconsistent shapes " + p.shape_str() + " * " +
                                   w.shape_str() + " -> " + c.shape_str());
    require_same_shape(c, r_c, "linear_relevance relevance");
    if (!b.empty()) require_shape(b, 1, c.cols(), "linear_relevance bias");
    const Matrix ratio = stable_div(r_c, c, eps);
    r_p = scale(hadamard(p, matmul_a_bt(ratio, w)), 0.5);
    r_w = scale(hadamard(w, matmul_at_b(p, ratio)), 0.5);
    r_b = b.empty() ? Matrix() : hadamard(b, col_sums(ratio));
}

// FFN relevance: delta = S*W_2 + b_2, S = GELU(U), U = g*W_1 + b_1.
// The activation propagates relevance as identity, R(U) = R(S).
struct FfnRelevance {
    Matrix r_g, r_w1, r_b1, r_w2, r_b2;
};

inline FfnRelevance ffn_relevance(const Matrix& g, const Matrix& u, const Matrix& s,
                                  const Matrix& delta, const Matrix& w1, const Matrix& b1,
                                  const Matrix& w2, const Matrix& b2, const Matrix& r_delta,
                                  double eps) {
    FfnRelevance out;
    Matrix r_s;
    linear_relevance(s, w2, b2, delta, r_delta, eps, r_s, out.r_w2, out.r_b2);
    // R(U) = R(S); the divisions below therefore use U as denominator.
    const Matrix ratio = stable_div(r_s, u, eps);
    out.r_g = scale(hadamard(g, matmul_a_bt(ratio, w1)), 0.5);
    out.r_w1 = scale(hadamard(w1, matmul_at_b(g, ratio)), 0.5);
    out.r_b1 = hadamard(b1, col_sums(ratio));
    return out;
}

struct MhaRelevance {
    Matrix r_x, r_wo;
    std::vector<Matrix> r_wq, r_wk, r_wv;
    // LoRA mode only: relevance of the trainable factors; r_wo / r_wq / ...
    // then hold the frozen-backbone relevance.
    std::vector<Matrix> r_aq, r_bq, r_ak, r_bk, r_av, r_bv;
    Matrix r_ao, r_bo;
};

// Closed-form MHA relevance. E must be the raw softmax input
// Q K^T / sqrt(d_head) (no mask); A carries exact zeros at masked positions,
// and the corresponding Phi entries are forced to zero rather than divided.
inline MhaRelevance mha_relevance(const Matrix& x, const std::vector<Matrix>& q,
                                  const std::vector<Matrix>& k, const std::vector<Matrix>& v,
                                  const std::vector<Matrix>& e, const std::vector<Matrix>& a,
                                  const Matrix& o, const Matrix& f,
                                  const std::vector<Matrix>& wq, const std::vector<Matrix>& wk,
                                  const std::vector<Matrix>& wv, const Matrix& wo,
                                  const Matrix& r_f, double eps) {
    const std::size_t n_heads = q.size();
    if (k.size() != n_heads || v.size() != n_heads || e.size() != n_heads ||
        a.size() != n_heads || wq.size() != n_heads || wk.size() != n_heads ||
        wv.size() != n_heads)
        fail(ErrorKind::shape, "mha_relevance: head count mismatch");
    require_same_shape(f, r_f, "mha_relevance relevance");
    const std::size_t d_head = q[0].cols();
    const double alpha = 1.0 / (8.0 * std::sqrt(static_cast<double>(d_head)));

    MhaRelevance out;
    const Matrix lambda_f = stable_div(r_f, f, eps);
    out.r_wo = scale(hadamard(wo, matmul_at_b(o, lambda_f)), 0.5);
    const Matrix r_o_full = scale(hadamard(o, matmul_a_bt(lambda_f, wo)), 0.5);

    out.r_x = Matrix(x.rows(), x.cols());
    for (std::size_t r = 0; r < n_heads; ++r) {
        const Matrix o_r = slice_cols(o, r * d_head, d_head);
        const Matrix r_o_r = slice_cols(r_o_full, r * d_head, d_head);
        const Matrix lambda_o = stable_div(r_o_r, o_r, eps);
        Matrix phi = stable_div(hadamard(a[r], matmul_a_bt(lambda_o, v[r])), e[r], eps);
        for (std::size_t i = 0; i < phi.rows(); ++i)
            for (std::size_t j = i + 1; j < phi.cols(); ++j) phi(i, j) = 0.0;
        const Matrix theta_q = matmul(phi, k[r]);
        const Matrix theta_k = matmul_at_b(phi, q[r]);  // phi^T * Q
        const Matrix theta_v = matmul_at_b(a[r], lambda_o);
        out.r_wq.push_back(scale(hadamard(wq[r], matmul_at_b(x, theta_q)), alpha));
        out.r_wk.push_back(scale(hadamard(wk[r], matmul_at_b(x, theta_k)), alpha));
        out.r_wv.push_back(scale(hadamard(wv[r], matmul_at_b(x, theta_v)), 0.25));
        Matrix mix = scale(matmul_a_bt(theta_q, wq[r]), alpha);
        add_into(mix, scale(matmul_a_bt(theta_k, wk[r]), alpha));
        add_into(mix, scale(matmul_a_bt(theta_v, wv[r]), 0.25));
        add_into(out.r_x, hadamard(x, mix));
    }
    return out;
}

// Relevance through C = P*(W_frozen + A*B). The output relevance is split
// element-wise between the two additive branches P*W and (P*A)*B by their
// contributions; the LoRA branch then chains two linear steps, first
// (P*A, B), then (P, A).
inline void lora_linear_relevance(const Matrix& p, const Matrix& w_frozen, const Matrix& a,
                                  const Matrix& b, const Matrix& c, const Matrix& r_c,
                                  double eps, Matrix& r_p, Matrix& r_w, Matrix& r_a,
                                  Matrix& r_b) {
    const Matrix c_frozen = matmul(p, w_frozen);
    const Matrix pa = matmul(p, a);
    const Matrix c_lora = matmul(pa, b);
    const Matrix ratio = stable_div(r_c, c, eps);
    const Matrix r_c_frozen = hadamard(c_frozen, ratio);
    const Matrix r_c_lora = hadamard(c_lora, ratio);

    Matrix unused_bias;
    Matrix r_p_frozen;
    linear_relevance(p, w_frozen, Matrix(), c_frozen, r_c_frozen, eps, r_p_frozen, r_w,
                     unused_bias);
    Matrix r_pa;
    linear_relevance(pa, b, Matrix(), c_lora, r_c_lora, eps, r_pa, r_b, unused_bias);
    Matrix r_p_lora;
    linear_relevance(p, a, Matrix(), pa, r_pa, eps, r_p_lora, r_a, unused_bias);
    r_p = add(r_p_frozen, r_p_lora);
}

// Chained MHA relevance for LoRA blocks: the attention core is propagated
// with the bilinear rule head by head, and each projection goes through
// lora_linear_relevance.
inline MhaRelevance lora_mha_relevance(const Matrix& x, const BlockTrace& bt,
                                       const BlockParams& blk, const Matrix& r_f, double eps) {
    const std::size_t n_heads = bt.q.size();
    const std::size_t d_head = bt.q[0].cols();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d_head));

    MhaRelevance out;
    Matrix r_o_full;
    lora_linear_relevance(bt.o, blk.w_o, blk.a_o, blk.b_o, bt.f, r_f, eps, r_o_full, out.r_wo,
                          out.r_ao, out.r_bo);

    out.r_x = Matrix(x.rows(), x.cols());
    out.r_wq.resize(n_heads);
    out.r_wk.resize(n_heads);
    out.r_wv.resize(n_heads);
    out.r_aq.resize(n_heads);
    out.r_bq.resize(n_heads);
    out.r_ak.resize(n_heads);
    out.r_bk.resize(n_heads);
    out.r_av.resize(n_heads);
    out.r_bv.resize(n_heads);
    for (std::size_t r = 0; r < n_heads; ++r) {
        const Matrix o_r = slice_cols(bt.o, r * d_head, d_head);
        const Matrix r_o_r = slice_cols(r_o_full, r * d_head, d_head);
        Matrix r_a, r_v;
        bilinear_split(bt.a[r], bt.v[r], o_r, r_o_r, eps, r_a, r_v);
        // Softmax as identity: R(E) = R(A). Masked entries of A are exact
        // zeros, so their relevance is exactly zero as well.
        Matrix lambda_e = stable_div(r_a, bt.e[r], eps);
        for (std::size_t i = 0; i < lambda_e.rows(); ++i)
            for (std::size_t j = i + 1; j < lambda_e.cols(); ++j) lambda_e(i, j) = 0.0;
        // E = Q * (K^T / sqrt(d_head)): bilinear in Q and K.
        const Matrix r_q = scale(hadamard(bt.q[r], matmul(lambda_e, bt.k[r])), 0.5 * inv_sqrt_dh);
        const Matrix r_k =
            scale(hadamard(bt.k[r], matmul_at_b(lambda_e, bt.q[r])), 0.5 * inv_sqrt_dh);

        Matrix r_x_q, r_x_k, r_x_v;
        lora_linear_relevance(x, blk.w_q[r], blk.a_q[r], blk.b_q[r], bt.q[r], r_q, eps, r_x_q,
                              out.r_wq[r], out.r_aq[r], out.r_bq[r]);
        lora_linear_relevance(x, blk.w_k[r], blk.a_k[r], blk.b_k[r], bt.k[r], r_k, eps, r_x_k,
                              out.r_wk[r], out.r_ak[r], out.r_bk[r]);
        lora_linear_relevance(x, blk.w_v[r], blk.a_v[r], blk.b_v[r], bt.v[r], r_v, eps, r_x_v,
                              out.r_wv[r], out.r_av[r], out.r_bv[r]);
        add_into(out.r_x, r_x_q);
        add_into(out.r_x, r_x_k);
        add_into(out.r_x, r_x_v);
    }
    return out;
}

namespace detail {

inline void check_finite(const Matrix& m, std::size_t block, const char* tensor) {
    if (!m.all_finite())
        fail(ErrorKind::numeric, "attribution: non-finite relevance in block " +
                                     std::to_string(block) + ", tensor " + tensor);
}

inline BlockRelevance zero_block_relevance(const BlockParams& blk) {
    BlockRelevance rel;
    auto zero_like = [](const Matrix& m) { return Matrix(m.rows(), m.cols()); };
    for (std::size_t r = 0; r < blk.w_q.size(); ++r) {
        rel.w_q.push_back(zero_like(blk.w_q[r]));
        rel.w_k.push_back(zero_like(blk.w_k[r]));
        rel.w_v.push_back(zero_like(blk.w_v[r]));
    }
    rel.w_o = zero_like(blk.w_o);
    rel.w_1 = zero_like(blk.w_1);
    rel.b_1 = zero_like(blk.b_1);
    rel.w_2 = zero_like(blk.w_2);
    rel.b_2 = zero_like(blk.b_2);
    rel.ln1_gain = zero_like(blk.ln1_gain);
    rel.ln1_bias = zero_like(blk.ln1_bias);
    rel.ln2_gain = zero_like(blk.ln2_gain);
    rel.ln2_bias = zero_like(blk.ln2_bias);
    if (blk.has_lora()) {
        for (std::size_t r = 0; r < blk.a_q.size(); ++r) {
            rel.a_q.push_back(zero_like(blk.a_q[r]));
            rel.b_q.push_back(zero_like(blk.b_q[r]));
            rel.a_k.push_back(zero_like(blk.a_k[r]));
            rel.b_k.push_back(zero_like(blk.b_k[r]));
            rel.a_v.push_back(zero_like(blk.a_v[r]));
            rel.b_v.push_back(zero_like(blk.b_v[r]));
        }
        rel.a_o = zero_like(blk.a_o);
        rel.b_o = zero_like(blk.b_o);
    }
    return rel;
}

}  // namespace detail

// Propagate a given relevance over H^(L) down through every block.
// Exposed separately from `attribute` so callers (and tests) can inject a
// custom initial relevance; all rules are linear in relevance, so scaling
// the input scales the whole map.
inline RelevanceMap propagate_relevance(const ModelParams& params, const ForwardTrace& trace,
                                        const Matrix& r_h_top, const AttributionConfig& cfg) {
    const std::size_t n_layers = trace.blocks.size();
    if (params.blocks.size() != n_layers)
        fail(ErrorKind::shape, "attribute: trace/params block count mismatch");

    RelevanceMap map;
    map.blocks.resize(n_layers);

    Matrix r_h = r_h_top;  // final LN is identity for relevance
    for (std::size_t li = n_layers; li-- > 0;) {
        const BlockTrace& bt = trace.blocks[li];
        const BlockParams& blk = params.blocks[li];
        require_same_shape(r_h, bt.h_out, "attribute: relevance vs h_out");

        // Residual split of R(H^(l+1)) across the three addends.
        const Matrix ratio = stable_div(r_h, bt.h_out, cfg.eps);
        const Matrix r_res_h = hadamard(bt.h_in, ratio);
        const Matrix r_res_f = hadamard(bt.f, ratio);
        const Matrix r_delta = hadamard(bt.delta_ffn, ratio);

        // FFN branch.
        FfnRelevance ffn = ffn_relevance(bt.g, bt.u, bt.s, bt.delta_ffn, blk.w_1, blk.b_1,
                                         blk.w_2, blk.b_2, r_delta, cfg.eps);

        // LN2 is identity; split R(g) between the addends of H + f.
        const Matrix ratio_g = stable_div(ffn.r_g, bt.resid1, cfg.eps);
        const Matrix r_g_h = hadamard(bt.h_in, ratio_g);
        const Matrix r_g_f = hadamard(bt.f, ratio_g);
        const Matrix r_f = add(r_res_f, r_g_f);

        MhaRelevance mha =
            blk.has_lora()
                ? lora_mha_relevance(bt.x, bt, blk, r_f, cfg.eps)
                : mha_relevance(bt.x, bt.q, bt.k, bt.v, bt.e, bt.a, bt.o, bt.f, blk.w_q,
                                blk.w_k, blk.w_v, blk.w_o, r_f, cfg.eps);

        BlockRelevance& rel = map.blocks[li];
        rel = detail::zero_block_relevance(blk);
        for (std::size_t r = 0; r < mha.r_wq.size(); ++r) {
            rel.w_q[r] = std::move(mha.r_wq[r]);
            rel.w_k[r] = std::move(mha.r_wk[r]);
            rel.w_v[r] = std::move(mha.r_wv[r]);
        }
        rel.w_o = std::move(mha.r_wo);
        rel.w_1 = std::move(ffn.r_w1);
        rel.b_1 = std::move(ffn.r_b1);
        rel.w_2 = std::move(ffn.r_w2);
        rel.b_2 = std::move(ffn.r_b2);
        if (blk.has_lora()) {
            for (std::size_t r = 0; r < mha.r_aq.size(); ++r) {
                rel.a_q[r] = std::move(mha.r_aq[r]);
                rel.b_q[r] = std::move(mha.r_bq[r]);
                rel.a_k[r] = std::move(mha.r_ak[r]);
                rel.b_k[r] = std::move(mha.r_bk[r]);
                rel.a_v[r] = std::move(mha.r_av[r]);
                rel.b_v[r] = std::move(mha.r_bv[r]);
            }
            rel.a_o = std::move(mha.r_ao);
            rel.b_o = std::move(mha.r_bo);
        }
        detail::check_finite(rel.w_o, li, "w_o");
        detail::check_finite(rel.w_1, li, "w_1");
        detail::check_finite(rel.w_2, li, "w_2");
        detail::check_finite(mha.r_x, li, "x");

        // LN1 identity: R(X) flows into R(H^(l)) together with the residual
        // shares from both splits.
        r_h = add(add(r_res_h, r_g_h), mha.r_x);
        detail::check_finite(r_h, li, "h");
    }
    map.input_relevance = std::move(r_h);
    return map;
}

inline double relevance_param_sum(const RelevanceMap& map) {
    double s = 0.0;
    for (const auto& blk : map.blocks) {
        for (const auto& m : blk.w_q) s += m.sum();
        for (const auto& m : blk.w_k) s += m.sum();
        for (const auto& m : blk.w_v) s += m.sum();
        s += blk.w_o.sum() + blk.w_1.sum() + blk.b_1.sum() + blk.w_2.sum() + blk.b_2.sum();
        for (const auto& m : blk.a_q) s += m.sum();
        for (const auto& m : blk.b_q) s += m.sum();
        for (const auto& m : blk.a_k) s += m.sum();
        for (const auto& m : blk.b_k) s += m.sum();
        for (const auto& m : blk.a_v) s += m.sum();
        for (const auto& m : blk.b_v) s += m.sum();
        if (!blk.a_o.empty()) s += blk.a_o.sum() + blk.b_o.sum();
    }
    return s;
}

// Full parameter attribution for one forward pass. Relevance is initialized
// from the predicted next-token logit at the last position as its exact
// additive decomposition over hidden features; W_vocab itself keeps no
// relevance (only block parameters are ever gated).
inline RelevanceMap attribute(const ModelParams& params, const ForwardTrace& trace,
                              const AttributionConfig& cfg) {
    const std::size_t last = trace.tokens.size() - 1;
    const std::size_t j_hat = argmax_row(trace.logits, last);

    Matrix r_top(trace.final_ln.rows(), trace.final_ln.cols());
    for (std::size_t k = 0; k < trace.final_ln.cols(); ++k)
        r_top(last, k) = trace.final_ln(last, k) * params.w_vocab(k, j_hat);

    RelevanceMap map = propagate_relevance(params, trace, r_top, cfg);
    map.predicted_token = j_hat;
    map.r_total = trace.logits(last, j_hat);
    map.conservation_residual =
        relevance_param_sum(map) + map.input_relevance.sum() - map.r_total;
    return map;
}

}  // namespace relgate
