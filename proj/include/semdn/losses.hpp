#pragma once

#include "semdn/denoiser.hpp"
#include "semdn/jscc.hpp"

namespace semdn {

// (1/2n) * ||y - z||^2
inline double loss_latent_mse(const Latent& y, const Latent& z) {
    if (y.length() != z.length()) throw ShapeError("loss_latent_mse: length mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < y.length(); ++i) {
        const double d = y.t[i] - z.t[i];
        acc += d * d;
    }
    return acc / static_cast<double>(y.length());
}

// 1 - cos(y, z), in [0,2]
inline double loss_ss(const Latent& y, const Latent& z) {
    return 1.0 - cosine_similarity(y, z);
}

// mean over unrolled steps of [latent MSE + alpha * SS loss]
inline double loss_residual_predictor(const Latent& y, const std::vector<Latent>& z_list,
                                      double alpha) {
    if (z_list.empty()) throw ValueError("loss_residual_predictor: empty latent list");
    double acc = 0.0;
    for (const auto& z : z_list) acc += loss_latent_mse(y, z) + alpha * loss_ss(y, z);
    return acc / static_cast<double>(z_list.size());
}

// (s_pred - cos(y, z))^2
inline double loss_similarity_predictor(SimilarityScore s_pred, const Latent& y, const Latent& z) {
    const double c = cosine_similarity(y, z);
    const double d = s_pred - c;
    return d * d;
}

// (1/k) * ||x - xhat||^2
inline double loss_end_to_end(const ImageTensor& x, const ImageTensor& xhat) {
    check_same_shape(x.t, xhat.t, "loss_end_to_end");
    double acc = 0.0;
    for (int64_t i = 0; i < x.k(); ++i) {
        const double d = x.t[i] - xhat.t[i];
        acc += d * d;
    }
    return acc / static_cast<double>(x.k());
}

namespace ag {

inline Value cosine_similarity_v(Value a, Value b) {
    check_same_shape(a.val(), b.val(), "cosine_similarity_v");
    Value na2 = dot(a, a);
    Value nb2 = dot(b, b);
    if (na2.scalar() <= 0.0 || nb2.scalar() <= 0.0)
        throw ValueError("cosine_similarity_v: zero-norm input");
    return mul(dot(a, b), mul(pow_const(na2, -0.5), pow_const(nb2, -0.5)));
}

inline Value loss_latent_mse_v(Value y, Value z) {
    check_same_shape(y.val(), z.val(), "loss_latent_mse_v");
    Value d = sub(y, z);
    return scale(dot(d, d), 1.0 / static_cast<double>(y.numel()));
}

inline Value loss_ss_v(Value y, Value z) {
    return add_const(scale(cosine_similarity_v(y, z), -1.0), 1.0);
}

inline Value loss_residual_predictor_v(Value y, const std::vector<Value>& z_list, double alpha) {
    if (z_list.empty()) throw ValueError("loss_residual_predictor_v: empty latent list");
    Value acc = constant_scalar(0.0);
    for (const auto& z : z_list)
        acc = add(acc, add(loss_latent_mse_v(y, z), scale(loss_ss_v(y, z), alpha)));
    return scale(acc, 1.0 / static_cast<double>(z_list.size()));
}

inline Value loss_similarity_predictor_v(Value s_pred, Value y, Value z) {
    Value d = sub(s_pred, cosine_similarity_v(y, z));
    return mul(d, d);
}

inline Value loss_end_to_end_v(Value x, Value xhat) {
    check_same_shape(x.val(), xhat.val(), "loss_end_to_end_v");
    Value d = sub(x, xhat);
    return scale(dot(d, d), 1.0 / static_cast<double>(x.numel()));
}

}  // namespace ag
}  // namespace semdn
