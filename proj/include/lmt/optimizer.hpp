#pragma once

#include <cmath>
#include <vector>

#include "lmt/tensor.hpp"

namespace lmt {

// AdamW with decoupled weight decay and optional cosine annealing of the
// learning rate. Parameters are leaf tensors; one writer per parameter.
template <class S>
class AdamW {
  public:
    struct Options {
        double lr = 3e-4;
        double beta1 = 0.9;
        double beta2 = 0.99;
        double eps = 1e-8;
        double weight_decay = 1e-4;
        bool cosine = false;
        int64_t cosine_steps = 0;  // anneal horizon; required when cosine is on
        double lr_min = 1e-5;
    };

    AdamW(std::vector<TensorT<S>> params, Options opt) : params_(std::move(params)), opt_(opt) {
        for (auto &p : params_) {
            if (!p.is_leaf() || !p.requires_grad())
                throw ContractError("AdamW: parameters must be requires_grad leaves");
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    double current_lr() const {
        if (!opt_.cosine || opt_.cosine_steps <= 0) return opt_.lr;
        const double frac = std::min(1.0, double(step_) / double(opt_.cosine_steps));
        return opt_.lr_min + 0.5 * (opt_.lr - opt_.lr_min) * (1.0 + std::cos(M_PI * frac));
    }

    void step() {
        const double lr = current_lr();
        ++step_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, double(step_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto &p = params_[pi];
            const auto &g = p.grad();
            auto &data = p.mutable_data();
            auto &m = m_[pi];
            auto &v = v_[pi];
            for (size_t i = 0; i < data.size(); ++i) {
                const double gi = double(g[i]);
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                double x = double(data[i]);
                x -= lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * x);
                data[i] = S(x);
            }
        }
    }

    void zero_grad() {
        for (auto &p : params_) p.zero_grad();
    }

    int64_t steps_taken() const { return step_; }
    const std::vector<TensorT<S>> &params() const { return params_; }

  private:
    std::vector<TensorT<S>> params_;
    Options opt_;
    std::vector<std::vector<double>> m_, v_;
    int64_t step_ = 0;
};

}  // namespace lmt
