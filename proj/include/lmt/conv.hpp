#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lmt/gemm.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

using Dim3 = std::array<int64_t, 3>;

namespace detail {

struct Conv3dGeom {
    int64_t b, cin, cout;
    Dim3 in, out, k, stride, pad;
    int64_t patch;  // cin * kt * kh * kw
    int64_t npos;   // out t*h*w
};

inline int64_t conv_out_extent(const char *op, int axis, int64_t x, int64_t k, int64_t s,
                               int64_t p) {
    if (s < 1) throw ShapeError(std::string(op) + ": stride must be >= 1 on axis " +
                                std::to_string(axis));
    const int64_t num = x + 2 * p - k;
    if (num < 0)
        throw ShapeError(std::string(op) + ": kernel larger than padded input on axis " +
                         std::to_string(axis));
    return num / s + 1;
}

inline Conv3dGeom conv3d_geometry(const Shape &x, const Shape &w, Dim3 stride, Dim3 pad) {
    if (x.size() != 5) throw ShapeError("conv3d: input must be [B,C,T,H,W], got " + shape_str(x));
    if (w.size() != 5)
        throw ShapeError("conv3d: kernel must be [C',C,kt,kh,kw], got " + shape_str(w));
    if (x[1] != w[1])
        throw ShapeError("conv3d: channel mismatch on axis 1: input " + std::to_string(x[1]) +
                         " vs kernel " + std::to_string(w[1]));
    Conv3dGeom g;
    g.b = x[0];
    g.cin = x[1];
    g.cout = w[0];
    g.in = {x[2], x[3], x[4]};
    g.k = {w[2], w[3], w[4]};
    g.stride = stride;
    g.pad = pad;
    for (int a = 0; a < 3; ++a)
        g.out[a] = conv_out_extent("conv3d", a + 2, g.in[a], g.k[a], stride[a], pad[a]);
    g.patch = g.cin * g.k[0] * g.k[1] * g.k[2];
    g.npos = g.out[0] * g.out[1] * g.out[2];
    return g;
}

// patches[p, (c,kt,kh,kw)] for one batch item; zero outside the padded input
template <class S>
void im2col3d(const Conv3dGeom &g, const S *x, S *patches) {
    const int64_t hw = g.in[1] * g.in[2];
    int64_t p = 0;
    for (int64_t ot = 0; ot < g.out[0]; ++ot)
        for (int64_t oh = 0; oh < g.out[1]; ++oh)
            for (int64_t ow = 0; ow < g.out[2]; ++ow, ++p) {
                S *row = patches + p * g.patch;
                const int64_t t0 = ot * g.stride[0] - g.pad[0];
                const int64_t h0 = oh * g.stride[1] - g.pad[1];
                const int64_t w0 = ow * g.stride[2] - g.pad[2];
                int64_t q = 0;
                for (int64_t c = 0; c < g.cin; ++c) {
                    const S *xc = x + c * g.in[0] * hw;
                    for (int64_t kt = 0; kt < g.k[0]; ++kt) {
                        const int64_t ti = t0 + kt;
                        for (int64_t kh = 0; kh < g.k[1]; ++kh) {
                            const int64_t hi = h0 + kh;
                            const bool live = ti >= 0 && ti < g.in[0] && hi >= 0 && hi < g.in[1];
                            for (int64_t kw = 0; kw < g.k[2]; ++kw, ++q) {
                                const int64_t wi = w0 + kw;
                                row[q] = (live && wi >= 0 && wi < g.in[2])
                                             ? xc[ti * hw + hi * g.in[2] + wi]
                                             : S(0);
                            }
                        }
                    }
                }
            }
}

// adjoint of im2col3d: scatter-add patch gradients back into the input gradient
template <class S>
void col2im3d(const Conv3dGeom &g, const S *patches, S *gx) {
    const int64_t hw = g.in[1] * g.in[2];
    int64_t p = 0;
    for (int64_t ot = 0; ot < g.out[0]; ++ot)
        for (int64_t oh = 0; oh < g.out[1]; ++oh)
            for (int64_t ow = 0; ow < g.out[2]; ++ow, ++p) {
                const S *row = patches + p * g.patch;
                const int64_t t0 = ot * g.stride[0] - g.pad[0];
                const int64_t h0 = oh * g.stride[1] - g.pad[1];
                const int64_t w0 = ow * g.stride[2] - g.pad[2];
                int64_t q = 0;
                for (int64_t c = 0; c < g.cin; ++c) {
                    S *xc = gx + c * g.in[0] * hw;
                    for (int64_t kt = 0; kt < g.k[0]; ++kt) {
                        const int64_t ti = t0 + kt;
                        for (int64_t kh = 0; kh < g.k[1]; ++kh) {
                            const int64_t hi = h0 + kh;
                            const bool live = ti >= 0 && ti < g.in[0] && hi >= 0 && hi < g.in[1];
                            for (int64_t kw = 0; kw < g.k[2]; ++kw, ++q) {
                                const int64_t wi = w0 + kw;
                                if (live && wi >= 0 && wi < g.in[2])
                                    xc[ti * hw + hi * g.in[2] + wi] += row[q];
                            }
                        }
                    }
                }
            }
}

}  // namespace detail

// input [B,C,T,H,W] * kernel [C',C,kt,kh,kw] with zero padding
template <class S>
TensorT<S> conv3d(const TensorT<S> &x, const TensorT<S> &w, Dim3 stride, Dim3 pad) {
    const auto g = detail::conv3d_geometry(x.shape(), w.shape(), stride, pad);
    Shape out_shape{g.b, g.cout, g.out[0], g.out[1], g.out[2]};
    std::vector<S> out(size_t(shape_numel(out_shape)), S(0));
    std::vector<S> patches(size_t(g.npos * g.patch));
    const S *xd = x.data().data();
    const S *wd = w.data().data();
    for (int64_t bi = 0; bi < g.b; ++bi) {
        detail::im2col3d(g, xd + bi * g.cin * g.in[0] * g.in[1] * g.in[2], patches.data());
        // out[c',p] = W2[c',:] . patches[p,:]
        gemm_nt(g.cout, g.npos, g.patch, wd, patches.data(), out.data() + bi * g.cout * g.npos);
    }
    return make_op_result<S>(
        "conv3d", std::move(out_shape), std::move(out), {x, w},
        [g](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([self, ps, g]() {
                ps[0]->ensure_grad();
                ps[1]->ensure_grad();
                const int64_t in_sz = g.cin * g.in[0] * g.in[1] * g.in[2];
                std::vector<S> patches(size_t(g.npos * g.patch));
                std::vector<S> gpatches(size_t(g.npos * g.patch));
                for (int64_t bi = 0; bi < g.b; ++bi) {
                    const S *go = self->grad.data() + bi * g.cout * g.npos;
                    detail::im2col3d(g, ps[0]->data.data() + bi * in_sz, patches.data());
                    // gW += gO * patches ; gpatches = gO^T * W2
                    gemm_nn(g.cout, g.patch, g.npos, go, patches.data(), ps[1]->grad.data());
                    std::fill(gpatches.begin(), gpatches.end(), S(0));
                    gemm_tn(g.npos, g.patch, g.cout, go, ps[1]->data.data(), gpatches.data());
                    detail::col2im3d(g, gpatches.data(), ps[0]->grad.data() + bi * in_sz);
                }
            });
        });
}

// input [B,C,T,H,W] * kernel [C,C',kt,kh,kw]; out extent = (in-1)*stride - 2*pad + k
template <class S>
TensorT<S> conv_transpose3d(const TensorT<S> &x, const TensorT<S> &w, Dim3 stride, Dim3 pad) {
    if (x.rank() != 5)
        throw ShapeError("conv_transpose3d: input must be [B,C,T,H,W], got " +
                         shape_str(x.shape()));
    if (w.rank() != 5)
        throw ShapeError("conv_transpose3d: kernel must be [C,C',kt,kh,kw], got " +
                         shape_str(w.shape()));
    if (x.dim(1) != w.dim(0))
        throw ShapeError("conv_transpose3d: channel mismatch on axis 1: input " +
                         std::to_string(x.dim(1)) + " vs kernel " + std::to_string(w.dim(0)));
    // the adjoint of a conv3d whose input has the transpose-conv output extents
    detail::Conv3dGeom g;
    g.b = x.dim(0);
    g.cin = w.dim(1);  // channels of the virtual conv input == our output
    g.cout = x.dim(1);
    g.k = {w.dim(2), w.dim(3), w.dim(4)};
    g.stride = stride;
    g.pad = pad;
    g.out = {x.dim(2), x.dim(3), x.dim(4)};
    for (int a = 0; a < 3; ++a) {
        if (stride[size_t(a)] < 1)
            throw ShapeError("conv_transpose3d: stride must be >= 1 on axis " +
                             std::to_string(a + 2));
        g.in[size_t(a)] =
            (g.out[size_t(a)] - 1) * stride[size_t(a)] - 2 * pad[size_t(a)] + g.k[size_t(a)];
        if (g.in[size_t(a)] < 1)
            throw ShapeError("conv_transpose3d: empty output on axis " + std::to_string(a + 2));
    }
    g.patch = g.cin * g.k[0] * g.k[1] * g.k[2];
    g.npos = g.out[0] * g.out[1] * g.out[2];

    Shape out_shape{g.b, g.cin, g.in[0], g.in[1], g.in[2]};
    const int64_t out_sz = g.cin * g.in[0] * g.in[1] * g.in[2];
    std::vector<S> out(size_t(g.b * out_sz), S(0));
    std::vector<S> cols(size_t(g.npos * g.patch));
    const S *xd = x.data().data();
    const S *wd = w.data().data();
    for (int64_t bi = 0; bi < g.b; ++bi) {
        // cols[p,:] = x[b,:,p]^T * W2[cout(g) rows...]; here x plays the conv grad-output role
        std::fill(cols.begin(), cols.end(), S(0));
        gemm_tn(g.npos, g.patch, g.cout, xd + bi * g.cout * g.npos, wd, cols.data());
        detail::col2im3d(g, cols.data(), out.data() + bi * out_sz);
    }
    return make_op_result<S>(
        "conv_transpose3d", std::move(out_shape), std::move(out), {x, w},
        [g, out_sz](NodeT<S> *self, std::vector<NodeT<S> *> ps) {
            return std::function<void()>([self, ps, g, out_sz]() {
                ps[0]->ensure_grad();
                ps[1]->ensure_grad();
                std::vector<S> gcols(size_t(g.npos * g.patch));
                for (int64_t bi = 0; bi < g.b; ++bi) {
                    // gathered patches of the output gradient
                    detail::im2col3d(g, self->grad.data() + bi * out_sz, gcols.data());
                    // gx[c,p] = W2[c,:] . gcols[p,:] ; gW += x * gcols
                    gemm_nt(g.cout, g.npos, g.patch, ps[1]->data.data(), gcols.data(),
                            ps[0]->grad.data() + bi * g.cout * g.npos);
                    gemm_nn(g.cout, g.patch, g.npos, ps[0]->data.data() + bi * g.cout * g.npos,
                            gcols.data(), ps[1]->grad.data());
                }
            });
        });
}

}  // namespace lmt
