#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lmt/ops.hpp"
#include "lmt/rng.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

// Parameter structs expose visit(prefix, f) with f(name, TensorT&) so the
// optimizer, checkpoints and freezing all walk the same tree.

template <class S>
struct NormParamsT {
    TensorT<S> gamma, beta;

    void init(int64_t channels) {
        gamma = TensorT<S>::full({channels}, S(1), true);
        beta = TensorT<S>::zeros({channels}, true);
    }
    template <class F>
    void visit(const std::string &prefix, F &&f) {
        f(prefix + ".gamma", gamma);
        f(prefix + ".beta", beta);
    }
};

template <class S>
struct MhaParamsT {
    TensorT<S> wq, wk, wv, wo;  // [D, D]

    void init(int64_t d, Rng &rng) {
        const S std = S(1.0 / std::sqrt(double(d)));
        wq = TensorT<S>::randn({d, d}, rng, std, true);
        wk = TensorT<S>::randn({d, d}, rng, std, true);
        wv = TensorT<S>::randn({d, d}, rng, std, true);
        wo = TensorT<S>::randn({d, d}, rng, std, true);
    }
    template <class F>
    void visit(const std::string &prefix, F &&f) {
        f(prefix + ".wq", wq);
        f(prefix + ".wk", wk);
        f(prefix + ".wv", wv);
        f(prefix + ".wo", wo);
    }
};

template <class S>
struct FeedForwardParamsT {
    TensorT<S> w1, b1, w2, b2;

    void init(int64_t d, int64_t hidden, Rng &rng) {
        w1 = TensorT<S>::randn({d, hidden}, rng, S(1.0 / std::sqrt(double(d))), true);
        b1 = TensorT<S>::zeros({hidden}, true);
        w2 = TensorT<S>::randn({hidden, d}, rng, S(1.0 / std::sqrt(double(hidden))), true);
        b2 = TensorT<S>::zeros({d}, true);
    }
    template <class F>
    void visit(const std::string &prefix, F &&f) {
        f(prefix + ".w1", w1);
        f(prefix + ".b1", b1);
        f(prefix + ".w2", w2);
        f(prefix + ".b2", b2);
    }
};

// normalization over the feature axis of token tensors [..., D]
template <class S>
TensorT<S> norm_tokens(const TensorT<S> &x, NormParamsT<S> &p, int64_t groups = 1) {
    const Shape s = x.shape();
    const int64_t d = s.back();
    const int64_t n = x.numel() / d;
    auto y = group_norm(reshape(x, {n, d, 1}), groups, p.gamma, p.beta);
    return reshape(y, s);
}

template <class S>
TensorT<S> ff_forward(const TensorT<S> &x, FeedForwardParamsT<S> &p) {
    auto h = gelu(add_rowwise(matmul(x, p.w1), p.b1));
    return add_rowwise(matmul(h, p.w2), p.b2);
}

namespace detail {
// [N, L, D] -> [N, H, L, Dh]
template <class S>
TensorT<S> split_heads(const TensorT<S> &x, int64_t heads) {
    const int64_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
    return permute(reshape(x, {n, l, heads, d / heads}), {0, 2, 1, 3});
}
template <class S>
TensorT<S> merge_heads(const TensorT<S> &x) {
    const int64_t n = x.dim(0), h = x.dim(1), l = x.dim(2), dh = x.dim(3);
    return reshape(permute(x, {0, 2, 1, 3}), {n, l, h * dh});
}
}  // namespace detail

// dense multi-head self-attention over token sequences [N, L, D]
template <class S>
TensorT<S> dense_mha(const TensorT<S> &x, MhaParamsT<S> &p, int64_t heads) {
    if (x.rank() != 3) throw ShapeError("dense_mha: expected [N,L,D]");
    const int64_t d = x.dim(2);
    if (d % heads != 0) throw ShapeError("dense_mha: D not divisible by heads");
    auto q = detail::split_heads(matmul(x, p.wq), heads);
    auto k = detail::split_heads(matmul(x, p.wk), heads);
    auto v = detail::split_heads(matmul(x, p.wv), heads);
    auto scores = scale(matmul_nt(q, k), S(1.0 / std::sqrt(double(d / heads))));
    auto out = matmul(softmax(scores, -1), v);
    return matmul(detail::merge_heads(out), p.wo);
}

}  // namespace lmt
