#pragma once

#include <cstdint>
#include <vector>

#include "lmt/ops.hpp"
#include "lmt/rng.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

// Embedding table with usage diagnostics. Entries are a trainable leaf; the
// counters have a single writer (the training loop).
template <class S>
struct CodebookT {
    TensorT<S> entries;  // [K, n_z]
    std::vector<int64_t> usage_counts;
    std::vector<int64_t> steps_since_used;

    CodebookT() = default;
    CodebookT(int64_t k, int64_t n_z, Rng &rng, double init_scale = 0.1) {
        if (k < 2) throw ContractError("codebook: K must be >= 2");
        entries = TensorT<S>::randn({k, n_z}, rng, S(init_scale), true);
        usage_counts.assign(size_t(k), 0);
        steps_since_used.assign(size_t(k), 0);
    }

    int64_t size() const { return entries.defined() ? entries.dim(0) : 0; }
    int64_t code_dim() const { return entries.defined() ? entries.dim(1) : 0; }

    void reset_usage() { std::fill(usage_counts.begin(), usage_counts.end(), 0); }
};

template <class S>
struct QuantizeResultT {
    std::vector<int64_t> indices;  // one per position, < K
    Shape grid_shape;              // leading dims of z_e (codes per position)
    TensorT<S> z_q;                // gathered entries, same shape as z_e, on tape to entries
    TensorT<S> z_e;                // encoder output, retained for the loss terms
};

template <class S>
struct VqLossTermsT {
    TensorT<S> recon;
    TensorT<S> codebook;
    TensorT<S> commit;
    S beta;

    TensorT<S> total() const { return add(add(recon, codebook), commit); }
};

// Nearest-neighbor assignment per position; ties break to the lowest index.
// In float mode distances use the |a|^2 - 2ab + |b|^2 expansion; in double mode
// the direct squared-distance scan (the exactness properties run there).
template <class S>
QuantizeResultT<S> quantize(const TensorT<S> &z_e, CodebookT<S> &codebook,
                            bool count_usage = true) {
    if (codebook.size() == 0) throw ContractError("quantize: empty codebook");
    const int64_t n_z = codebook.code_dim();
    if (z_e.rank() < 1 || z_e.shape().back() != n_z)
        throw ShapeError("quantize: last dim " + shape_str(z_e.shape()) + " vs n_z " +
                         std::to_string(n_z));
    const int64_t k = codebook.size();
    const int64_t positions = z_e.numel() / n_z;
    const S *zd = z_e.data().data();
    const S *ed = codebook.entries.data().data();

    std::vector<int64_t> indices(static_cast<size_t>(positions));
    if constexpr (std::is_same_v<S, double>) {
        for (int64_t p = 0; p < positions; ++p) {
            const S *z = zd + p * n_z;
            S best = std::numeric_limits<S>::infinity();
            int64_t arg = 0;
            for (int64_t c = 0; c < k; ++c) {
                const S *e = ed + c * n_z;
                S d = 0;
                for (int64_t j = 0; j < n_z; ++j) {
                    const S dj = z[j] - e[j];
                    d += dj * dj;
                }
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            indices[size_t(p)] = arg;
        }
    } else {
        std::vector<S> e_norm(size_t(k), S(0));
        for (int64_t c = 0; c < k; ++c) {
            const S *e = ed + c * n_z;
            S n = 0;
            for (int64_t j = 0; j < n_z; ++j) n += e[j] * e[j];
            e_norm[size_t(c)] = n;
        }
        for (int64_t p = 0; p < positions; ++p) {
            const S *z = zd + p * n_z;
            S best = std::numeric_limits<S>::infinity();
            int64_t arg = 0;
            for (int64_t c = 0; c < k; ++c) {
                const S *e = ed + c * n_z;
                S dot = 0;
                for (int64_t j = 0; j < n_z; ++j) dot += z[j] * e[j];
                const S d = e_norm[size_t(c)] - S(2) * dot;  // |z|^2 dropped: constant in c
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            indices[size_t(p)] = arg;
        }
    }

    if (count_usage) {
        for (auto &s : codebook.steps_since_used) ++s;
        for (int64_t ix : indices) {
            ++codebook.usage_counts[size_t(ix)];
            codebook.steps_since_used[size_t(ix)] = 0;
        }
    }

    QuantizeResultT<S> result;
    result.indices = indices;
    result.grid_shape.assign(z_e.shape().begin(), z_e.shape().end() - 1);
    result.z_q = reshape(gather_rows(codebook.entries, indices), z_e.shape());
    result.z_e = z_e;
    return result;
}

// Eq.-style loss split: recon on pixels, codebook pulls entries toward sg[z_e],
// commit (beta-weighted) pulls the encoder toward sg[z_q].
template <class S>
VqLossTermsT<S> vq_losses(const TensorT<S> &x, const TensorT<S> &x_hat,
                          const QuantizeResultT<S> &result, S beta) {
    if (x.shape() != x_hat.shape())
        throw ShapeError("vq_losses: " + shape_str(x.shape()) + " vs " +
                         shape_str(x_hat.shape()));
    VqLossTermsT<S> terms;
    terms.recon = mse(x, x_hat);
    terms.codebook = mse(result.z_e.detach(), result.z_q);
    terms.commit = scale(mse(result.z_q.detach(), result.z_e), beta);
    terms.beta = beta;
    return terms;
}

// exp(entropy) of the empirical usage distribution plus the never-used fraction
template <class S>
std::pair<double, double> codebook_stats(const CodebookT<S> &codebook) {
    int64_t total = 0;
    for (int64_t c : codebook.usage_counts) total += c;
    if (total == 0) throw ContractError("codebook_stats: no quantization recorded");
    double entropy = 0.0;
    int64_t dead = 0;
    for (int64_t c : codebook.usage_counts) {
        if (c == 0) {
            ++dead;
            continue;
        }
        const double p = double(c) / double(total);
        entropy -= p * std::log(p);
    }
    return {std::exp(entropy), double(dead) / double(codebook.size())};
}

// Resets entries not used for threshold_steps quantize calls to random encoder
// outputs plus small noise. Off by default in training; opt-in remedy.
template <class S>
int64_t revive_dead_codes(CodebookT<S> &codebook, const TensorT<S> &z_e_batch,
                          int64_t threshold_steps, Rng &rng, double noise = 1e-3) {
    const int64_t n_z = codebook.code_dim();
    if (z_e_batch.numel() < n_z) throw ContractError("revive_dead_codes: empty batch");
    const int64_t positions = z_e_batch.numel() / n_z;
    auto &entries = codebook.entries.mutable_data();
    int64_t revived = 0;
    for (int64_t c = 0; c < codebook.size(); ++c) {
        if (codebook.steps_since_used[size_t(c)] < threshold_steps) continue;
        const int64_t p = rng.uniform_int(positions);
        const S *src = z_e_batch.data().data() + p * n_z;
        for (int64_t j = 0; j < n_z; ++j)
            entries[size_t(c * n_z + j)] = src[j] + S(rng.normal() * noise);
        codebook.steps_since_used[size_t(c)] = 0;
        codebook.usage_counts[size_t(c)] = 0;
        ++revived;
    }
    return revived;
}

using Codebook = CodebookT<float>;
using QuantizeResult = QuantizeResultT<float>;
using VqLossTerms = VqLossTermsT<float>;

}  // namespace lmt
