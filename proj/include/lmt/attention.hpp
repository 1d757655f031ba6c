#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lmt/nn.hpp"
#include "lmt/ops.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

template <class S>
struct PrototypeSetT {
    TensorT<S> prototypes;               // [R, D], rows taken from the pooled Q/K
    std::vector<int64_t> source_indices;  // positions into [Q rows | K rows]
};

// Greedy max-min-orthogonality selection over the pooled, unit-normalized rows
// of Q and K: seed with the largest-norm row, then repeatedly add the candidate
// whose worst |cosine| against the already-selected set is smallest.
// Deterministic given input order; ties break to the lowest index.
template <class S>
PrototypeSetT<S> most_orthogonal_subset(const TensorT<S> &q, const TensorT<S> &k, int64_t r) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1))
        throw ShapeError("most_orthogonal_subset: Q " + shape_str(q.shape()) + " K " +
                         shape_str(k.shape()));
    const int64_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
    const int64_t n = nq + nk;
    if (r < 1 || r > n)
        throw ContractError("most_orthogonal_subset: R " + std::to_string(r) +
                            " out of [1," + std::to_string(n) + "]");

    std::vector<S> unit(size_t(n * d));
    std::vector<S> norms(static_cast<size_t>(n));
    auto row_at = [&](int64_t i) -> const S * {
        return i < nq ? q.data().data() + i * d : k.data().data() + (i - nq) * d;
    };
    for (int64_t i = 0; i < n; ++i) {
        const S *src = row_at(i);
        S nrm = 0;
        for (int64_t j = 0; j < d; ++j) nrm += src[j] * src[j];
        nrm = std::sqrt(nrm);
        norms[size_t(i)] = nrm;
        const S inv = S(1) / std::max(nrm, S(1e-12));
        for (int64_t j = 0; j < d; ++j) unit[size_t(i * d + j)] = src[j] * inv;
    }

    std::vector<int64_t> selected;
    std::vector<uint8_t> taken(size_t(n), 0);
    // worst |cos| of each candidate against the selected set so far
    std::vector<S> worst(size_t(n), S(0));

    int64_t seed = 0;
    for (int64_t i = 1; i < n; ++i)
        if (norms[size_t(i)] > norms[size_t(seed)]) seed = i;
    selected.push_back(seed);
    taken[size_t(seed)] = 1;

    while (int64_t(selected.size()) < r) {
        const int64_t last = selected.back();
        int64_t best = -1;
        for (int64_t c = 0; c < n; ++c) {
            if (taken[size_t(c)]) continue;
            S dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += unit[size_t(c * d + j)] * unit[size_t(last * d + j)];
            worst[size_t(c)] = std::max(worst[size_t(c)], std::abs(dot));
            if (best < 0 || worst[size_t(c)] < worst[size_t(best)]) best = c;
        }
        selected.push_back(best);
        taken[size_t(best)] = 1;
    }

    PrototypeSetT<S> out;
    out.source_indices = selected;
    auto pool = concat<S>({q, k}, 0);
    out.prototypes = gather_rows(pool, selected);
    return out;
}

// Two-hop attention through R prototypes:
//   W1 = softmax(Q P^T / sqrt(D)), W2 = softmax(P K^T / sqrt(D)), Y = W1 (W2 V)
// Cost is O((N_q + N_k) R D) instead of O(N_q N_k D).
template <class S>
struct PrototypeAttentionResultT {
    TensorT<S> y;        // [N_q, D_v]
    TensorT<S> w1, w2;   // row-stochastic mixing weights
    PrototypeSetT<S> prototypes;
};

template <class S>
PrototypeAttentionResultT<S> prototype_attention_full(const TensorT<S> &q, const TensorT<S> &k,
                                                      const TensorT<S> &v, int64_t r) {
    if (v.rank() != 2 || k.dim(0) != v.dim(0))
        throw ShapeError("prototype_attention: K rows " + std::to_string(k.dim(0)) +
                         " vs V rows " + std::to_string(v.dim(0)));
    const S inv_sqrt_d = S(1.0 / std::sqrt(double(q.dim(1))));
    PrototypeAttentionResultT<S> out;
    out.prototypes = most_orthogonal_subset(q, k, r);
    out.w1 = softmax(scale(matmul_nt(q, out.prototypes.prototypes), inv_sqrt_d), -1);
    out.w2 = softmax(scale(matmul_nt(out.prototypes.prototypes, k), inv_sqrt_d), -1);
    out.y = matmul(out.w1, matmul(out.w2, v));
    return out;
}

template <class S>
TensorT<S> prototype_attention(const TensorT<S> &q, const TensorT<S> &k, const TensorT<S> &v,
                               int64_t r) {
    return prototype_attention_full(q, k, v, r).y;
}

// dense oracle-style attention on [L, D] rows (used by baselines and tests)
template <class S>
TensorT<S> full_attention(const TensorT<S> &q, const TensorT<S> &k, const TensorT<S> &v) {
    const S inv_sqrt_d = S(1.0 / std::sqrt(double(q.dim(1))));
    return matmul(softmax(scale(matmul_nt(q, k), inv_sqrt_d), -1), v);
}

// ---- masks -------------------------------------------------------------------

struct AttentionMask {
    std::vector<uint8_t> allowed;  // row-major [len, len]
    int64_t len = 0;
    int64_t condition_len = 0;

    bool at(int64_t i, int64_t j) const { return allowed[size_t(i * len + j)] != 0; }
};

// condition block attends bidirectionally; target token i sees every condition
// token and target tokens j <= i
inline AttentionMask build_seq2seq_mask(int64_t condition_len, int64_t target_len) {
    if (condition_len < 0 || target_len < 0)
        throw ContractError("build_seq2seq_mask: negative length");
    AttentionMask m;
    m.len = condition_len + target_len;
    m.condition_len = condition_len;
    m.allowed.assign(size_t(m.len * m.len), 0);
    for (int64_t i = 0; i < m.len; ++i)
        for (int64_t j = 0; j < m.len; ++j) {
            const bool ok = (i < condition_len) ? (j < condition_len)
                                                : (j < condition_len || j <= i);
            m.allowed[size_t(i * m.len + j)] = ok ? 1 : 0;
        }
    return m;
}

// fully causal over the whole sequence (ablation arm for the seq2seq mask)
inline AttentionMask build_causal_mask(int64_t len) {
    AttentionMask m;
    m.len = len;
    m.condition_len = 0;
    m.allowed.assign(size_t(len * len), 0);
    for (int64_t i = 0; i < len; ++i)
        for (int64_t j = 0; j <= i; ++j) m.allowed[size_t(i * len + j)] = 1;
    return m;
}

// dense attention with disallowed logits excluded before the softmax
template <class S>
TensorT<S> masked_attention(const TensorT<S> &q, const TensorT<S> &k, const TensorT<S> &v,
                            const AttentionMask &mask) {
    const int64_t l = q.dim(q.rank() - 2);
    if (mask.len != l || k.dim(k.rank() - 2) != l)
        throw ShapeError("masked_attention: mask len " + std::to_string(mask.len) +
                         " vs sequence " + std::to_string(l));
    const S inv_sqrt_d = S(1.0 / std::sqrt(double(q.dim(q.rank() - 1))));
    auto scores = scale(matmul_nt(q, k), inv_sqrt_d);
    auto probs = masked_softmax(scores, mask.allowed, l, l);
    return matmul(probs, v);
}

// masked multi-head self-attention over [N, L, D]
template <class S>
TensorT<S> masked_mha(const TensorT<S> &x, const AttentionMask &mask, MhaParamsT<S> &p,
                      int64_t heads) {
    if (x.rank() != 3) throw ShapeError("masked_mha: expected [N,L,D]");
    const int64_t d = x.dim(2);
    auto q = detail::split_heads(matmul(x, p.wq), heads);
    auto k = detail::split_heads(matmul(x, p.wk), heads);
    auto v = detail::split_heads(matmul(x, p.wv), heads);
    auto out = matmul(masked_softmax(scale(matmul_nt(q, k), S(1.0 / std::sqrt(double(d / heads)))),
                                     mask.allowed, mask.len, mask.len),
                      v);
    return matmul(detail::merge_heads(out), p.wo);
}

// ---- trajectory attention block ------------------------------------------------

template <class S>
struct TrajectoryBlockParamsT {
    NormParamsT<S> norm1, norm2;
    MhaParamsT<S> attn;
    FeedForwardParamsT<S> ff;
    int64_t heads = 4;
    int64_t prototypes = 32;

    void init(int64_t d, int64_t heads_, int64_t prototypes_, int64_t ff_mult, Rng &rng) {
        heads = heads_;
        prototypes = prototypes_;
        norm1.init(d);
        norm2.init(d);
        attn.init(d, rng);
        ff.init(d, d * ff_mult, rng);
    }
    template <class F>
    void visit(const std::string &prefix, F &&f) {
        norm1.visit(prefix + ".norm1", f);
        norm2.visit(prefix + ".norm2", f);
        attn.visit(prefix + ".attn", f);
        ff.visit(prefix + ".ff", f);
    }
};

// Pre-norm residual block. Stage one runs prototype attention between every
// (query frame, key frame) pair, yielding one trajectory token per (query
// token, frame); stage two pools those tokens along time with dense attention
// (t is small). A feed-forward sublayer follows.
template <class S>
TensorT<S> trajectory_attention_block(const TensorT<S> &x, TrajectoryBlockParamsT<S> &p) {
    if (x.rank() != 4) throw ShapeError("trajectory_attention_block: expected [B,t,hw,D]");
    const int64_t b = x.dim(0), t = x.dim(1), hw = x.dim(2), d = x.dim(3);
    if (hw < 1) throw ShapeError("trajectory_attention_block: empty frame");
    if (d % p.heads != 0) throw ShapeError("trajectory_attention_block: D not divisible by heads");
    const int64_t dh = d / p.heads;
    const int64_t r = std::min<int64_t>(std::max<int64_t>(p.prototypes, 1), 2 * hw);
    const S inv_sqrt_dh = S(1.0 / std::sqrt(double(dh)));

    auto xn = norm_tokens(x, p.norm1);
    // [B, t, hw, D] -> [B, H, t, hw, Dh]
    auto to_heads = [&](const TensorT<S> &m) {
        return permute(reshape(m, {b, t, hw, p.heads, dh}), {0, 3, 1, 2, 4});
    };
    auto q = to_heads(matmul(xn, p.attn.wq));
    auto k = to_heads(matmul(xn, p.attn.wk));
    auto v = to_heads(matmul(xn, p.attn.wv));

    std::vector<TensorT<S>> batch_outs;
    for (int64_t bi = 0; bi < b; ++bi) {
        std::vector<TensorT<S>> head_outs;
        for (int64_t h = 0; h < p.heads; ++h) {
            auto pick = [&](const TensorT<S> &m) {
                return reshape(slice(slice(m, 0, bi, 1), 1, h, 1), {t, hw, dh});
            };
            auto qh = pick(q), kh = pick(k), vh = pick(v);
            std::vector<TensorT<S>> qf, kf, vf;
            for (int64_t ti = 0; ti < t; ++ti) {
                qf.push_back(reshape(slice(qh, 0, ti, 1), {hw, dh}));
                kf.push_back(reshape(slice(kh, 0, ti, 1), {hw, dh}));
                vf.push_back(reshape(slice(vh, 0, ti, 1), {hw, dh}));
            }
            std::vector<TensorT<S>> frame_outs;
            for (int64_t t0 = 0; t0 < t; ++t0) {
                // one trajectory token per (query token, frame)
                std::vector<TensorT<S>> traj;
                for (int64_t t1 = 0; t1 < t; ++t1)
                    traj.push_back(reshape(
                        prototype_attention(qf[size_t(t0)], kf[size_t(t1)], vf[size_t(t1)], r),
                        {1, hw, dh}));
                auto tokens = permute(concat(traj, 0), {1, 0, 2});  // [hw, t, Dh]
                auto anchor = reshape(traj[size_t(t0)], {hw, 1, dh});
                auto probs = softmax(scale(matmul_nt(anchor, tokens), inv_sqrt_dh), -1);
                frame_outs.push_back(reshape(matmul(probs, tokens), {1, hw, dh}));
            }
            head_outs.push_back(concat(frame_outs, 0));  // [t, hw, Dh]
        }
        batch_outs.push_back(reshape(concat(head_outs, 2), {1, t, hw, d}));
    }
    auto y = matmul(concat(batch_outs, 0), p.attn.wo);
    auto x1 = add(x, y);
    return add(x1, ff_forward(norm_tokens(x1, p.norm2), p.ff));
}

// ---- axial attention block -----------------------------------------------------

template <class S>
struct AxialBlockParamsT {
    NormParamsT<S> norm_w, norm_h, norm_t, norm_ff;
    MhaParamsT<S> attn_w, attn_h, attn_t;
    FeedForwardParamsT<S> ff;
    int64_t heads = 4;

    void init(int64_t d, int64_t heads_, int64_t ff_mult, Rng &rng) {
        heads = heads_;
        norm_w.init(d);
        norm_h.init(d);
        norm_t.init(d);
        norm_ff.init(d);
        attn_w.init(d, rng);
        attn_h.init(d, rng);
        attn_t.init(d, rng);
        ff.init(d, d * ff_mult, rng);
    }
    template <class F>
    void visit(const std::string &prefix, F &&f) {
        norm_w.visit(prefix + ".norm_w", f);
        norm_h.visit(prefix + ".norm_h", f);
        norm_t.visit(prefix + ".norm_t", f);
        norm_ff.visit(prefix + ".norm_ff", f);
        attn_w.visit(prefix + ".attn_w", f);
        attn_h.visit(prefix + ".attn_h", f);
        attn_t.visit(prefix + ".attn_t", f);
        ff.visit(prefix + ".ff", f);
    }
};

// sequential dense self-attention along w, then h, then t, each pre-norm with a
// residual, then a feed-forward sublayer
template <class S>
TensorT<S> axial_attention_block(const TensorT<S> &x, AxialBlockParamsT<S> &p) {
    if (x.rank() != 5) throw ShapeError("axial_attention_block: expected [B,t,h,w,D]");
    const int64_t b = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), d = x.dim(4);

    auto pass = [&](const TensorT<S> &in, const std::vector<int> &perm,
                    const std::vector<int> &inv, int64_t rows, int64_t axis_len,
                    NormParamsT<S> &norm, MhaParamsT<S> &attn) {
        auto xp = perm.empty() ? in : permute(in, perm);
        const Shape pshape = xp.shape();
        auto tokens = reshape(xp, {rows, axis_len, d});
        auto out = dense_mha(norm_tokens(tokens, norm), attn, p.heads);
        auto res = add(tokens, out);
        auto back = reshape(res, pshape);
        return inv.empty() ? back : permute(back, inv);
    };

    auto x1 = pass(x, {}, {}, b * t * h, w, p.norm_w, p.attn_w);
    auto x2 = pass(x1, {0, 1, 3, 2, 4}, {0, 1, 3, 2, 4}, b * t * w, h, p.norm_h, p.attn_h);
    auto x3 = pass(x2, {0, 2, 3, 1, 4}, {0, 3, 1, 2, 4}, b * h * w, t, p.norm_t, p.attn_t);
    return add(x3, ff_forward(norm_tokens(x3, p.norm_ff), p.ff));
}

}  // namespace lmt
