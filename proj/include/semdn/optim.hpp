#pragma once

#include <unordered_map>
#include <vector>

#include "semdn/autograd.hpp"

namespace semdn {

// lr(i) = lr0 * (1 - i/I)^exponent
inline double poly_lr(double lr0, int64_t iteration, int64_t total_iterations, double exponent) {
    if (total_iterations <= 0) throw ConfigError("poly_lr: total iterations must be positive");
    const double frac = 1.0 - static_cast<double>(iteration) / static_cast<double>(total_iterations);
    return lr0 * std::pow(std::max(frac, 0.0), exponent);
}

class Adam {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(const std::vector<ParamCollection*>& collections, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (ParamCollection* col : collections) {
            if (col->frozen)
                throw RuntimeError("Adam: refusing to update frozen collection '" + col->name + "'");
            for (auto& p : col->params) {
                auto& st = state_[p.get()];
                if (st.m.data.empty()) {
                    st.m = Tensor::zeros(p->value.shape);
                    st.v = Tensor::zeros(p->value.shape);
                }
                for (int64_t i = 0; i < p->value.numel(); ++i) {
                    const double g = p->grad[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    const double mhat = st.m[i] / bc1;
                    const double vhat = st.v[i] / bc2;
                    p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                }
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    struct State {
        Tensor m, v;
    };
    int64_t t_ = 0;
    std::unordered_map<Param*, State> state_;
};

}  // namespace semdn
