#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "lmt/gemm.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

inline std::vector<int64_t> strides_of(const Shape &s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

namespace detail {

template <class S>
void check_same_shape(const char *op, const TensorT<S> &a, const TensorT<S> &b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class S, class F, class DfA, class DfB>
TensorT<S> binary_ew(const char *op, const TensorT<S> &a, const TensorT<S> &b, F f, DfA dfa,
                     DfB dfb) {
    check_same_shape(op, a, b);
    const auto &ad = a.data();
    const auto &bd = b.data();
    std::vector<S> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i], bd[i]);
    return make_op_result<S>(op, a.shape(), std::move(out), {a, b},
                             [dfa, dfb](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps, dfa, dfb]() {
                                     ps[0]->ensure_grad();
                                     ps[1]->ensure_grad();
                                     const auto &ad = ps[0]->data;
                                     const auto &bd = ps[1]->data;
                                     for (size_t i = 0; i < self->grad.size(); ++i) {
                                         S g = self->grad[i];
                                         ps[0]->grad[i] += g * dfa(ad[i], bd[i]);
                                         ps[1]->grad[i] += g * dfb(ad[i], bd[i]);
                                     }
                                 });
                             });
}

template <class S, class F, class Df>
TensorT<S> unary_ew(const char *op, const TensorT<S> &a, F f, Df df) {
    const auto &ad = a.data();
    std::vector<S> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
    return make_op_result<S>(op, a.shape(), std::move(out), {a},
                             [df](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps, df]() {
                                     ps[0]->ensure_grad();
                                     const auto &ad = ps[0]->data;
                                     const auto &od = self->data;
                                     for (size_t i = 0; i < self->grad.size(); ++i)
                                         ps[0]->grad[i] += self->grad[i] * df(ad[i], od[i]);
                                 });
                             });
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S> &a, const TensorT<S> &b) {
    return detail::binary_ew(
        "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
        [](S, S) { return S(1); });
}

template <class S>
TensorT<S> sub(const TensorT<S> &a, const TensorT<S> &b) {
    return detail::binary_ew(
        "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
        [](S, S) { return S(-1); });
}

template <class S>
TensorT<S> mul(const TensorT<S> &a, const TensorT<S> &b) {
    return detail::binary_ew(
        "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
        [](S x, S) { return x; });
}

template <class S>
TensorT<S> divide(const TensorT<S> &a, const TensorT<S> &b) {
    return detail::binary_ew(
        "divide", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
        [](S x, S y) { return -x / (y * y); });
}

template <class S>
TensorT<S> scale(const TensorT<S> &a, S c) {
    return detail::unary_ew(
        "scale", a, [c](S x) { return c * x; }, [c](S, S) { return c; });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S> &a, S c) {
    return detail::unary_ew(
        "add_scalar", a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <class S>
TensorT<S> relu(const TensorT<S> &a) {
    return detail::unary_ew(
        "relu", a, [](S x) { return x > S(0) ? x : S(0); },
        [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
TensorT<S> leaky_relu(const TensorT<S> &a, S slope = S(0.2)) {
    return detail::unary_ew(
        "leaky_relu", a, [slope](S x) { return x > S(0) ? x : slope * x; },
        [slope](S x, S) { return x > S(0) ? S(1) : slope; });
}

// tanh approximation, same form as GPT-2 style blocks
template <class S>
TensorT<S> gelu(const TensorT<S> &a) {
    const S s = S(std::sqrt(2.0 / M_PI));
    const S c = S(0.044715);
    return detail::unary_ew(
        "gelu", a,
        [s, c](S x) { return S(0.5) * x * (S(1) + std::tanh(s * (x + c * x * x * x))); },
        [s, c](S x, S) {
            S u = s * (x + c * x * x * x);
            S th = std::tanh(u);
            S sech2 = S(1) - th * th;
            return S(0.5) * (S(1) + th) + S(0.5) * x * sech2 * s * (S(1) + S(3) * c * x * x);
        });
}

template <class S>
TensorT<S> tanh_op(const TensorT<S> &a) {
    return detail::unary_ew(
        "tanh", a, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

// softplus(x) = log(1 + e^x), evaluated without overflow; -log sigmoid(x) == softplus(-x)
template <class S>
TensorT<S> softplus(const TensorT<S> &a) {
    return detail::unary_ew(
        "softplus", a,
        [](S x) { return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x))); },
        [](S x, S) { return S(1) / (S(1) + std::exp(-x)); });
}

template <class S>
TensorT<S> exp_op(const TensorT<S> &a) {
    return detail::unary_ew(
        "exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
TensorT<S> log_op(const TensorT<S> &a) {
    return detail::unary_ew(
        "log", a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <class S>
TensorT<S> sin_op(const TensorT<S> &a) {
    return detail::unary_ew(
        "sin", a, [](S x) { return std::sin(x); }, [](S x, S) { return std::cos(x); });
}

// x[..., D] + b[D]
template <class S>
TensorT<S> add_rowwise(const TensorT<S> &x, const TensorT<S> &b) {
    if (b.rank() != 1 || x.shape().back() != b.dim(0))
        throw ShapeError("add_rowwise: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const int64_t d = b.dim(0);
    const auto &xd = x.data();
    const auto &bd = b.data();
    std::vector<S> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] + bd[i % size_t(d)];
    return make_op_result<S>("add_rowwise", x.shape(), std::move(out), {x, b},
                             [d](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps, d]() {
                                     ps[0]->ensure_grad();
                                     ps[1]->ensure_grad();
                                     for (size_t i = 0; i < self->grad.size(); ++i) {
                                         ps[0]->grad[i] += self->grad[i];
                                         ps[1]->grad[i % size_t(d)] += self->grad[i];
                                     }
                                 });
                             });
}

// x[B, C, M...] + b[C] broadcast along channel axis 1
template <class S>
TensorT<S> add_channel_bias(const TensorT<S> &x, const TensorT<S> &b) {
    if (x.rank() < 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw ShapeError("add_channel_bias: " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
    const int64_t c = x.dim(1);
    int64_t inner = 1;
    for (size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
    const auto &xd = x.data();
    const auto &bd = b.data();
    std::vector<S> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] + bd[(i / size_t(inner)) % size_t(c)];
    return make_op_result<S>(
        "add_channel_bias", x.shape(), std::move(out), {x, b},
        [c, inner](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([self, ps, c, inner]() {
                ps[0]->ensure_grad();
                ps[1]->ensure_grad();
                for (size_t i = 0; i < self->grad.size(); ++i) {
                    ps[0]->grad[i] += self->grad[i];
                    ps[1]->grad[(i / size_t(inner)) % size_t(c)] += self->grad[i];
                }
            });
        });
}

// ---- shape ops --------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S> &a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<S> out = a.data();
    return make_op_result<S>("reshape", std::move(shape), std::move(out), {a},
                             [](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps]() {
                                     ps[0]->ensure_grad();
                                     for (size_t i = 0; i < self->grad.size(); ++i)
                                         ps[0]->grad[i] += self->grad[i];
                                 });
                             });
}

template <class S>
TensorT<S> permute(const TensorT<S> &a, const std::vector<int> &perm) {
    if (perm.size() != a.rank()) throw ShapeError("permute: rank mismatch");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(size_t(perm[i]));
    auto in_strides = strides_of(a.shape());
    auto out_strides = strides_of(out_shape);
    const auto &ad = a.data();
    std::vector<S> out(ad.size());
    const size_t r = perm.size();
    std::vector<int64_t> idx(r, 0);
    for (size_t o = 0; o < out.size(); ++o) {
        int64_t src = 0;
        for (size_t i = 0; i < r; ++i) src += idx[i] * in_strides[size_t(perm[i])];
        out[o] = ad[size_t(src)];
        for (int i = int(r) - 1; i >= 0; --i) {
            if (++idx[size_t(i)] < out_shape[size_t(i)]) break;
            idx[size_t(i)] = 0;
        }
    }
    return make_op_result<S>(
        "permute", std::move(out_shape), std::move(out), {a},
        [perm, in_strides](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([self, ps, perm, in_strides]() {
                ps[0]->ensure_grad();
                const size_t r = perm.size();
                std::vector<int64_t> idx(r, 0);
                for (size_t o = 0; o < self->grad.size(); ++o) {
                    int64_t src = 0;
                    for (size_t i = 0; i < r; ++i) src += idx[i] * in_strides[size_t(perm[i])];
                    ps[0]->grad[size_t(src)] += self->grad[o];
                    for (int i = int(r) - 1; i >= 0; --i) {
                        if (++idx[size_t(i)] < self->shape[size_t(i)]) break;
                        idx[size_t(i)] = 0;
                    }
                }
            });
        });
}

template <class S>
TensorT<S> slice(const TensorT<S> &a, size_t axis, int64_t start, int64_t len) {
    if (axis >= a.rank() || start < 0 || start + len > a.dim(axis))
        throw ShapeError("slice: axis " + std::to_string(axis) + " range [" +
                         std::to_string(start) + "," + std::to_string(start + len) + ") of " +
                         shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const int64_t n_axis = a.dim(axis);
    const auto &ad = a.data();
    std::vector<S> out(size_t(outer * len * inner));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len; ++j)
            std::copy_n(ad.begin() + (o * n_axis + start + j) * inner, inner,
                        out.begin() + (o * len + j) * inner);
    return make_op_result<S>(
        "slice", std::move(out_shape), std::move(out), {a},
        [axis, start, len, outer, inner, n_axis](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([=]() {
                ps[0]->ensure_grad();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t j = 0; j < len; ++j) {
                        const S *g = self->grad.data() + (o * len + j) * inner;
                        S *dst = ps[0]->grad.data() + (o * n_axis + start + j) * inner;
                        for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
                    }
            });
        });
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>> &parts, size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (auto &p : parts) {
        if (p.rank() != out_shape.size()) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < out_shape.size(); ++i)
            if (i != axis && p.dim(i) != out_shape[i])
                throw ShapeError("concat: axis " + std::to_string(i) + " mismatch");
        total += p.dim(axis);
    }
    out_shape[axis] = total;
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= out_shape[i];
    for (size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
    std::vector<S> out(size_t(shape_numel(out_shape)));
    std::vector<int64_t> lens;
    int64_t off = 0;
    for (auto &p : parts) {
        const int64_t len = p.dim(axis);
        lens.push_back(len);
        const auto &pd = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(pd.begin() + o * len * inner, len * inner,
                        out.begin() + (o * total + off) * inner);
        off += len;
    }
    return make_op_result<S>(
        "concat", std::move(out_shape), std::move(out), parts,
        [axis, outer, inner, total, lens](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([=]() {
                int64_t off = 0;
                for (size_t pi = 0; pi < ps.size(); ++pi) {
                    ps[pi]->ensure_grad();
                    const int64_t len = lens[pi];
                    for (int64_t o = 0; o < outer; ++o) {
                        const S *g = self->grad.data() + (o * total + off) * inner;
                        S *dst = ps[pi]->grad.data() + o * len * inner;
                        for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                    }
                    off += len;
                }
            });
        });
}

// ---- matmul -----------------------------------------------------------------

namespace detail {
template <class S>
void matmul_shapes(const char *op, const TensorT<S> &a, const TensorT<S> &b, bool b_transposed,
                   int64_t &batch, int64_t &m, int64_t &k, bool &shared_b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError(std::string(op) + ": rank < 2");
    m = a.dim(a.rank() - 2);
    k = a.dim(a.rank() - 1);
    shared_b = (b.rank() == 2 && a.rank() > 2);
    if (!shared_b && a.rank() != b.rank())
        throw ShapeError(std::string(op) + ": batch rank mismatch");
    if (!shared_b)
        for (size_t i = 0; i + 2 < a.rank(); ++i)
            if (a.dim(i) != b.dim(i)) throw ShapeError(std::string(op) + ": batch dims differ");
    const int64_t b_contract = b_transposed ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
    if (b_contract != k)
        throw ShapeError(std::string(op) + ": inner dims " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    batch = 1;
    for (size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);
}
}  // namespace detail

// a[..., m, k] x b[..., k, n] -> [..., m, n]; b may be rank-2 and shared over the batch
template <class S>
TensorT<S> matmul(const TensorT<S> &a, const TensorT<S> &b) {
    int64_t batch, m, k;
    bool shared_b;
    detail::matmul_shapes("matmul", a, b, false, batch, m, k, shared_b);
    const int64_t n = b.dim(b.rank() - 1);
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    std::vector<S> out(size_t(batch * m * n), S(0));
    const S *ad = a.data().data();
    const S *bd = b.data().data();
    for (int64_t bi = 0; bi < batch; ++bi)
        gemm_nn(m, n, k, ad + bi * m * k, shared_b ? bd : bd + bi * k * n, out.data() + bi * m * n);
    return make_op_result<S>(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [batch, m, n, k, shared_b](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([=]() {
                ps[0]->ensure_grad();
                ps[1]->ensure_grad();
                const S *go = self->grad.data();
                const S *ad = ps[0]->data.data();
                const S *bd = ps[1]->data.data();
                S *ga = ps[0]->grad.data();
                S *gb = ps[1]->grad.data();
                for (int64_t bi = 0; bi < batch; ++bi) {
                    const S *g = go + bi * m * n;
                    gemm_nt(m, k, n, g, shared_b ? bd : bd + bi * k * n, ga + bi * m * k);
                    gemm_tn(k, n, m, ad + bi * m * k, g, shared_b ? gb : gb + bi * k * n);
                }
            });
        });
}

// a[..., m, k] x b[..., n, k]^T -> [..., m, n]
template <class S>
TensorT<S> matmul_nt(const TensorT<S> &a, const TensorT<S> &b) {
    int64_t batch, m, k;
    bool shared_b;
    detail::matmul_shapes("matmul_nt", a, b, true, batch, m, k, shared_b);
    const int64_t n = b.dim(b.rank() - 2);
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.back() = m;
    out_shape.push_back(n);
    std::vector<S> out(size_t(batch * m * n), S(0));
    const S *ad = a.data().data();
    const S *bd = b.data().data();
    for (int64_t bi = 0; bi < batch; ++bi)
        gemm_nt(m, n, k, ad + bi * m * k, shared_b ? bd : bd + bi * n * k, out.data() + bi * m * n);
    return make_op_result<S>(
        "matmul_nt", std::move(out_shape), std::move(out), {a, b},
        [batch, m, n, k, shared_b](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([=]() {
                ps[0]->ensure_grad();
                ps[1]->ensure_grad();
                const S *go = self->grad.data();
                const S *ad = ps[0]->data.data();
                const S *bd = ps[1]->data.data();
                S *ga = ps[0]->grad.data();
                S *gb = ps[1]->grad.data();
                for (int64_t bi = 0; bi < batch; ++bi) {
                    const S *g = go + bi * m * n;
                    // gA += gY * B ; gB += gY^T * A
                    gemm_nn(m, k, n, g, shared_b ? bd : bd + bi * n * k, ga + bi * m * k);
                    gemm_tn(n, k, m, g, ad + bi * m * k, shared_b ? gb : gb + bi * n * k);
                }
            });
        });
}

// ---- softmax family ---------------------------------------------------------

namespace detail {
template <class S>
void softmax_rows(const S *x, S *y, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        const S *in = x + r * cols;
        S *out = y + r * cols;
        S maxv = in[0];
        for (int64_t j = 1; j < cols; ++j) maxv = std::max(maxv, in[j]);
        S sum = 0;
        for (int64_t j = 0; j < cols; ++j) {
            out[j] = std::exp(in[j] - maxv);
            sum += out[j];
        }
        const S inv = S(1) / sum;
        for (int64_t j = 0; j < cols; ++j) out[j] *= inv;
    }
}

template <class S>
void softmax_rows_backward(const S *y, const S *gy, S *gx, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        const S *out = y + r * cols;
        const S *g = gy + r * cols;
        S *d = gx + r * cols;
        S dot = 0;
        for (int64_t j = 0; j < cols; ++j) dot += g[j] * out[j];
        for (int64_t j = 0; j < cols; ++j) d[j] += out[j] * (g[j] - dot);
    }
}
}  // namespace detail

template <class S>
TensorT<S> softmax(const TensorT<S> &a, int axis = -1) {
    const int r = int(a.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("softmax: bad axis");
    if (axis != r - 1) {
        std::vector<int> perm(a.rank());
        for (int i = 0; i < r; ++i) perm[size_t(i)] = i;
        std::swap(perm[size_t(axis)], perm[size_t(r - 1)]);
        return permute(softmax(permute(a, perm), -1), perm);
    }
    const int64_t cols = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / cols;
    std::vector<S> out(a.data().size());
    detail::softmax_rows(a.data().data(), out.data(), rows, cols);
    return make_op_result<S>("softmax", a.shape(), std::move(out), {a},
                             [rows, cols](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([=]() {
                                     ps[0]->ensure_grad();
                                     detail::softmax_rows_backward(self->data.data(),
                                                                   self->grad.data(),
                                                                   ps[0]->grad.data(), rows, cols);
                                 });
                             });
}

// Softmax over the last axis restricted to allowed positions. `allowed` has
// Lq*Lk entries; scores are [..., Lq, Lk]. Disallowed entries get probability 0,
// which matches -inf logits without materializing them.
template <class S>
TensorT<S> masked_softmax(const TensorT<S> &scores, const std::vector<uint8_t> &allowed,
                          int64_t lq, int64_t lk) {
    if (scores.rank() < 2 || scores.dim(scores.rank() - 2) != lq ||
        scores.dim(scores.rank() - 1) != lk)
        throw ShapeError("masked_softmax: scores " + shape_str(scores.shape()));
    if (int64_t(allowed.size()) != lq * lk) throw ShapeError("masked_softmax: mask size");
    for (int64_t i = 0; i < lq; ++i) {
        bool any = false;
        for (int64_t j = 0; j < lk; ++j) any = any || allowed[size_t(i * lk + j)];
        if (!any) throw ContractError("masked_softmax: fully masked row " + std::to_string(i));
    }
    const int64_t rows = scores.numel() / lk;
    const auto &xd = scores.data();
    std::vector<S> out(xd.size(), S(0));
    for (int64_t r = 0; r < rows; ++r) {
        const uint8_t *mrow = allowed.data() + (r % lq) * lk;
        const S *in = xd.data() + r * lk;
        S *o = out.data() + r * lk;
        S maxv = -std::numeric_limits<S>::infinity();
        for (int64_t j = 0; j < lk; ++j)
            if (mrow[j]) maxv = std::max(maxv, in[j]);
        S sum = 0;
        for (int64_t j = 0; j < lk; ++j)
            if (mrow[j]) {
                o[j] = std::exp(in[j] - maxv);
                sum += o[j];
            }
        const S inv = S(1) / sum;
        for (int64_t j = 0; j < lk; ++j) o[j] *= inv;
    }
    auto mask = std::make_shared<std::vector<uint8_t>>(allowed);
    return make_op_result<S>(
        "masked_softmax", scores.shape(), std::move(out), {scores},
        [rows, lq, lk, mask](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([=]() {
                ps[0]->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const uint8_t *mrow = mask->data() + (r % lq) * lk;
                    const S *out = self->data.data() + r * lk;
                    const S *g = self->grad.data() + r * lk;
                    S *d = ps[0]->grad.data() + r * lk;
                    S dot = 0;
                    for (int64_t j = 0; j < lk; ++j) dot += g[j] * out[j];
                    for (int64_t j = 0; j < lk; ++j)
                        if (mrow[j]) d[j] += out[j] * (g[j] - dot);
                }
            });
        });
}

// mean over rows of -log softmax(logits)[i, target_i]
template <class S>
TensorT<S> cross_entropy(const TensorT<S> &logits, const std::vector<int64_t> &targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N,K]");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    if (int64_t(targets.size()) != n) throw ShapeError("cross_entropy: target count");
    for (int64_t i = 0; i < n; ++i)
        if (targets[size_t(i)] < 0 || targets[size_t(i)] >= k)
            throw IndexError("cross_entropy: target " + std::to_string(targets[size_t(i)]) +
                             " out of range [0," + std::to_string(k) + ")");
    const auto &xd = logits.data();
    auto probs = std::make_shared<std::vector<S>>(xd.size());
    detail::softmax_rows(xd.data(), probs->data(), n, k);
    S loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        const S *row = xd.data() + i * k;
        S maxv = row[0];
        for (int64_t j = 1; j < k; ++j) maxv = std::max(maxv, row[j]);
        S sum = 0;
        for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - maxv);
        loss += (maxv + std::log(sum)) - row[targets[size_t(i)]];
    }
    loss /= S(n);
    auto tgt = std::make_shared<std::vector<int64_t>>(targets);
    return make_op_result<S>("cross_entropy", Shape{}, std::vector<S>{loss}, {logits},
                             [n, k, probs, tgt](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([=]() {
                                     ps[0]->ensure_grad();
                                     const S g = self->grad[0] / S(n);
                                     for (int64_t i = 0; i < n; ++i) {
                                         S *d = ps[0]->grad.data() + i * k;
                                         const S *p = probs->data() + i * k;
                                         for (int64_t j = 0; j < k; ++j) d[j] += g * p[j];
                                         d[(*tgt)[size_t(i)]] -= g;
                                     }
                                 });
                             });
}

// ---- reductions -------------------------------------------------------------

template <class S>
TensorT<S> sum(const TensorT<S> &a) {
    S acc = 0;
    for (S v : a.data()) acc += v;
    return make_op_result<S>("sum", Shape{}, std::vector<S>{acc}, {a},
                             [](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps]() {
                                     ps[0]->ensure_grad();
                                     const S g = self->grad[0];
                                     for (auto &v : ps[0]->grad) v += g;
                                 });
                             });
}

template <class S>
TensorT<S> mean(const TensorT<S> &a) {
    const int64_t n = a.numel();
    S acc = 0;
    for (S v : a.data()) acc += v;
    acc /= S(n);
    return make_op_result<S>("mean", Shape{}, std::vector<S>{acc}, {a},
                             [n](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps, n]() {
                                     ps[0]->ensure_grad();
                                     const S g = self->grad[0] / S(n);
                                     for (auto &v : ps[0]->grad) v += g;
                                 });
                             });
}

// mean over the last axis: [..., M] -> [...]
template <class S>
TensorT<S> mean_last(const TensorT<S> &a) {
    if (a.rank() < 1) throw ShapeError("mean_last: rank 0");
    const int64_t m = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / m;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    std::vector<S> out(size_t(rows), S(0));
    const auto &ad = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        S acc = 0;
        for (int64_t j = 0; j < m; ++j) acc += ad[size_t(r * m + j)];
        out[size_t(r)] = acc / S(m);
    }
    return make_op_result<S>("mean_last", std::move(out_shape), std::move(out), {a},
                             [rows, m](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps, rows, m]() {
                                     ps[0]->ensure_grad();
                                     for (int64_t r = 0; r < rows; ++r) {
                                         const S g = self->grad[size_t(r)] / S(m);
                                         S *d = ps[0]->grad.data() + r * m;
                                         for (int64_t j = 0; j < m; ++j) d[j] += g;
                                     }
                                 });
                             });
}

// x viewed as [N, C, M]: each (n, :, m) channel vector scaled to unit L2 norm
template <class S>
TensorT<S> unit_normalize_channels(const TensorT<S> &x, S eps = S(1e-8)) {
    if (x.rank() != 3) throw ShapeError("unit_normalize_channels: expected [N,C,M]");
    const int64_t n = x.dim(0), c = x.dim(1), m = x.dim(2);
    const auto &xd = x.data();
    std::vector<S> out(xd.size());
    auto norms = std::make_shared<std::vector<S>>(size_t(n * m));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) {
            S acc = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
                const S v = xd[size_t((i * c + ch) * m + j)];
                acc += v * v;
            }
            const S nrm = std::sqrt(acc + eps);
            (*norms)[size_t(i * m + j)] = nrm;
            for (int64_t ch = 0; ch < c; ++ch)
                out[size_t((i * c + ch) * m + j)] = xd[size_t((i * c + ch) * m + j)] / nrm;
        }
    return make_op_result<S>(
        "unit_normalize_channels", x.shape(), std::move(out), {x},
        [n, c, m, norms](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([=]() {
                ps[0]->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < m; ++j) {
                        const S nrm = (*norms)[size_t(i * m + j)];
                        S dot = 0;
                        for (int64_t ch = 0; ch < c; ++ch)
                            dot += self->grad[size_t((i * c + ch) * m + j)] *
                                   self->data[size_t((i * c + ch) * m + j)];
                        for (int64_t ch = 0; ch < c; ++ch) {
                            const size_t ix = size_t((i * c + ch) * m + j);
                            ps[0]->grad[ix] += (self->grad[ix] - self->data[ix] * dot) / nrm;
                        }
                    }
            });
        });
}

// ---- gather / normalization / misc -------------------------------------------

// rows of `table`[K, D] gathered by integer indices
template <class S>
TensorT<S> gather_rows(const TensorT<S> &table, const std::vector<int64_t> &indices) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be [K,D]");
    const int64_t k = table.dim(0), d = table.dim(1);
    for (int64_t ix : indices)
        if (ix < 0 || ix >= k)
            throw IndexError("gather_rows: index " + std::to_string(ix) + " out of [0," +
                             std::to_string(k) + ")");
    std::vector<S> out(indices.size() * size_t(d));
    const auto &td = table.data();
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy_n(td.begin() + indices[i] * d, d, out.begin() + int64_t(i) * d);
    auto idx = std::make_shared<std::vector<int64_t>>(indices);
    return make_op_result<S>("gather_rows", Shape{int64_t(indices.size()), d}, std::move(out),
                             {table}, [d, idx](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([=]() {
                                     ps[0]->ensure_grad();
                                     for (size_t i = 0; i < idx->size(); ++i) {
                                         const S *g = self->grad.data() + int64_t(i) * d;
                                         S *dst = ps[0]->grad.data() + (*idx)[i] * d;
                                         for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
                                     }
                                 });
                             });
}

// group normalization over x viewed as [N, C, M]; statistics per (sample, group)
// over (C/groups)*M values; gamma/beta have C entries
template <class S>
TensorT<S> group_norm(const TensorT<S> &x, int64_t groups, const TensorT<S> &gamma,
                      const TensorT<S> &beta, S eps = S(1e-6)) {
    if (x.rank() != 3) throw ShapeError("group_norm: expected [N,C,M], got " +
                                        shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), m = x.dim(2);
    if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if (gamma.numel() != c || beta.numel() != c) throw ShapeError("group_norm: affine size");
    const int64_t cg = c / groups;
    const int64_t gsz = cg * m;
    const auto &xd = x.data();
    const auto &gd = gamma.data();
    const auto &bd = beta.data();
    std::vector<S> out(xd.size());
    auto stats = std::make_shared<std::vector<S>>(size_t(n * groups * 2));  // mean, inv pairs
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t g = 0; g < groups; ++g) {
            const S *base = xd.data() + (i * c + g * cg) * m;
            S mu = 0;
            for (int64_t t = 0; t < gsz; ++t) mu += base[t];
            mu /= S(gsz);
            S var = 0;
            for (int64_t t = 0; t < gsz; ++t) {
                S dlt = base[t] - mu;
                var += dlt * dlt;
            }
            var /= S(gsz);
            const S inv = S(1) / std::sqrt(var + eps);
            (*stats)[size_t((i * groups + g) * 2)] = mu;
            (*stats)[size_t((i * groups + g) * 2 + 1)] = inv;
            S *o = out.data() + (i * c + g * cg) * m;
            for (int64_t cc = 0; cc < cg; ++cc) {
                const S ga = gd[size_t(g * cg + cc)];
                const S be = bd[size_t(g * cg + cc)];
                for (int64_t t = 0; t < m; ++t)
                    o[cc * m + t] = ga * (base[cc * m + t] - mu) * inv + be;
            }
        }
    }
    return make_op_result<S>(
        "group_norm", x.shape(), std::move(out), {x, gamma, beta},
        [n, c, m, groups, cg, gsz, stats](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([=]() {
                ps[0]->ensure_grad();
                ps[1]->ensure_grad();
                ps[2]->ensure_grad();
                const auto &xd = ps[0]->data;
                const auto &gd = ps[1]->data;
                for (int64_t i = 0; i < n; ++i) {
                    for (int64_t g = 0; g < groups; ++g) {
                        const S mu = (*stats)[size_t((i * groups + g) * 2)];
                        const S inv = (*stats)[size_t((i * groups + g) * 2 + 1)];
                        const S *base = xd.data() + (i * c + g * cg) * m;
                        const S *gy = self->grad.data() + (i * c + g * cg) * m;
                        // grads wrt affine params and the normalized value
                        S mean_t = 0, mean_tx = 0;
                        for (int64_t cc = 0; cc < cg; ++cc) {
                            const S ga = gd[size_t(g * cg + cc)];
                            for (int64_t t = 0; t < m; ++t) {
                                const S xh = (base[cc * m + t] - mu) * inv;
                                const S gyv = gy[cc * m + t];
                                ps[1]->grad[size_t(g * cg + cc)] += gyv * xh;
                                ps[2]->grad[size_t(g * cg + cc)] += gyv;
                                const S tv = gyv * ga;
                                mean_t += tv;
                                mean_tx += tv * xh;
                            }
                        }
                        mean_t /= S(gsz);
                        mean_tx /= S(gsz);
                        S *gx = ps[0]->grad.data() + (i * c + g * cg) * m;
                        for (int64_t cc = 0; cc < cg; ++cc) {
                            const S ga = gd[size_t(g * cg + cc)];
                            for (int64_t t = 0; t < m; ++t) {
                                const S xh = (base[cc * m + t] - mu) * inv;
                                const S tv = gy[cc * m + t] * ga;
                                gx[cc * m + t] += inv * (tv - mean_t - xh * mean_tx);
                            }
                        }
                    }
                }
            });
        });
}

// inverted dropout; identity when p == 0
template <class S>
TensorT<S> dropout(const TensorT<S> &x, S p, Rng &rng) {
    if (p <= S(0)) return x;
    if (p >= S(1)) throw ContractError("dropout: p must be < 1");
    const S keep = S(1) - p;
    auto mask = std::make_shared<std::vector<S>>(x.data().size());
    std::vector<S> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        (*mask)[i] = (S(rng.uniform()) < keep) ? S(1) / keep : S(0);
        out[i] = x.data()[i] * (*mask)[i];
    }
    return make_op_result<S>("dropout", x.shape(), std::move(out), {x},
                             [mask](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps, mask]() {
                                     ps[0]->ensure_grad();
                                     for (size_t i = 0; i < self->grad.size(); ++i)
                                         ps[0]->grad[i] += self->grad[i] * (*mask)[i];
                                 });
                             });
}

// forward takes the quantized values, backward routes the gradient to z_e unchanged
template <class S>
TensorT<S> straight_through(const TensorT<S> &z_e, const TensorT<S> &z_q) {
    detail::check_same_shape("straight_through", z_e, z_q);
    std::vector<S> out = z_q.data();
    return make_op_result<S>("straight_through", z_e.shape(), std::move(out), {z_e},
                             [](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
                                 return std::function<void()>([self, ps]() {
                                     ps[0]->ensure_grad();
                                     for (size_t i = 0; i < self->grad.size(); ++i)
                                         ps[0]->grad[i] += self->grad[i];
                                 });
                             });
}

// ---- composites --------------------------------------------------------------

template <class S>
TensorT<S> mse(const TensorT<S> &a, const TensorT<S> &b) {
    auto d = sub(a, b);
    return mean(mul(d, d));
}

}  // namespace lmt
