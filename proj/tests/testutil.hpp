#pragma once

#include <functional>
#include <vector>

#include "semdn/autograd.hpp"
#include "semdn/rng.hpp"

namespace semdn::test {

// Central finite-difference oracle for gradients. `forward` must rebuild the
// graph from current parameter values and return the scalar loss. Returns the
// max relative error over sampled parameter entries.
inline double grad_check_max_rel(const std::function<ag::Value()>& forward,
                                 const std::vector<std::shared_ptr<Param>>& params,
                                 double h = 1e-4, size_t max_entries_per_param = 64,
                                 uint64_t sample_seed = 1234) {
    for (auto& p : params) p->zero_grad();
    ag::Value loss = forward();
    ag::backward(loss);

    Rng pick(sample_seed);
    double worst = 0.0;
    for (auto& p : params) {
        const int64_t n = p->value.numel();
        std::vector<int64_t> idx;
        if (static_cast<size_t>(n) <= max_entries_per_param) {
            for (int64_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (size_t i = 0; i < max_entries_per_param; ++i)
                idx.push_back(static_cast<int64_t>(pick.uniform_int(static_cast<uint64_t>(n))));
        }
        for (int64_t i : idx) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double fp = forward().scalar();
            p->value[i] = saved - h;
            const double fm = forward().scalar();
            p->value[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = p->grad[i];
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
            worst = std::max(worst, std::fabs(fd - an) / denom);
        }
    }
    return worst;
}

// Wrap a raw tensor as a parameter so grad_check can probe inputs too.
struct ProbeBox {
    ParamCollection col{"probe"};
    std::shared_ptr<Param> wrap(const std::string& name, Tensor t) {
        return col.add(name, std::move(t));
    }
};

// Move parameters off their init point before a finite-difference check.
// Zero-initialized biases otherwise leave ReLU inputs exactly at the kink,
// where central differences disagree with any valid subgradient.
inline void perturb_params(ParamCollection& col, uint64_t seed, double eps = 0.05) {
    Rng rng(seed);
    for (auto& p : col.params)
        for (auto& v : p->value.data) v += rng.uniform(-eps, eps);
}

}  // namespace semdn::test
