#pragma once

#include <cstring>
#include <functional>

#include "lmt/ops.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

// Central-difference check of the tape gradient of a scalar-valued function.
// Returns max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Double evaluation at the base point guards against non-deterministic f.
template <class S>
double finite_diff_check(const std::function<TensorT<S>(const TensorT<S> &)> &f,
                         const TensorT<S> &x0, double eps = 1e-5) {
    TensorT<S> x = TensorT<S>::from_data(x0.shape(), x0.data(), true);

    TensorT<S> y = f(x);
    if (y.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    {
        TensorT<S> y2 = f(x);
        if (std::memcmp(y.data().data(), y2.data().data(), sizeof(S)) != 0)
            throw ContractError("finite_diff_check: f is not deterministic");
    }
    y.backward();
    std::vector<S> analytic = x.grad();

    double worst = 0.0;
    std::vector<S> base = x.data();
    NoGradGuard ng;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<S> dplus = base, dminus = base;
        dplus[i] += S(eps);
        dminus[i] -= S(eps);
        const double fp = double(f(TensorT<S>::from_data(x.shape(), dplus)).item());
        const double fm = double(f(TensorT<S>::from_data(x.shape(), dminus)).item());
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = double(analytic[i]);
        const double err =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace lmt
