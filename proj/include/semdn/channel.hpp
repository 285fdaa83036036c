#pragma once

#include <complex>
#include <vector>

#include "semdn/autograd.hpp"
#include "semdn/rng.hpp"
#include "semdn/tensor.hpp"

namespace semdn {

// Real latent vector plus the spatial layout it came from. Length is always
// 2n so it pairs into n complex channel symbols.
struct Latent {
    Tensor t;  // {C,h,w}

    Latent() = default;
    explicit Latent(Tensor tt) : t(std::move(tt)) {
        if (t.rank() != 3) throw ShapeError("Latent: expected {C,h,w} tensor");
        if (t.numel() % 2 != 0) throw ShapeError("Latent: length must be even");
    }

    int64_t length() const { return t.numel(); }                 // 2n
    int64_t symbols() const { return t.numel() / 2; }            // n
    std::vector<int> spatial_shape() const { return t.shape; }   // (C,h,w)
};

struct ComplexSymbols {
    std::vector<std::complex<double>> values;

    int64_t size() const { return static_cast<int64_t>(values.size()); }

    double average_power() const {
        double p = 0.0;
        for (const auto& v : values) p += std::norm(v);
        return p / static_cast<double>(values.size());
    }
};

inline double snr_db_to_linear(double snr_db) {
    if (!std::isfinite(snr_db)) throw ValueError("snr_db_to_linear: non-finite input");
    return std::pow(10.0, snr_db / 10.0);
}

inline double snr_linear_to_db(double eta) { return 10.0 * std::log10(eta); }

struct ChannelConfig {
    double snr_db = 10.0;
    double signal_power = 1.0;  // P
    uint64_t seed = 0;

    double snr_linear() const {
        const double eta = snr_db_to_linear(snr_db);
        if (eta <= 0.0) throw ConfigError("ChannelConfig: snr must be positive in linear scale");
        return eta;
    }

    // per-symbol complex noise power sigma_n^2 = P / eta
    double noise_power() const {
        if (signal_power <= 0.0) throw ConfigError("ChannelConfig: signal power must be positive");
        return signal_power / snr_linear();
    }
};

// symbol i = latent[2i] + j*latent[2i+1]
inline ComplexSymbols pack_complex(const Latent& latent) {
    const Tensor& v = latent.t;
    if (v.numel() % 2 != 0) throw ShapeError("pack_complex: odd-length latent");
    ComplexSymbols out;
    out.values.resize(static_cast<size_t>(v.numel() / 2));
    for (int64_t i = 0; i < v.numel() / 2; ++i)
        out.values[static_cast<size_t>(i)] = {v[2 * i], v[2 * i + 1]};
    return out;
}

inline Latent unpack_real(const ComplexSymbols& sym, const std::vector<int>& spatial_shape) {
    Tensor t(spatial_shape);
    if (t.numel() != sym.size() * 2)
        throw ShapeError("unpack_real: spatial shape inconsistent with symbol count");
    for (int64_t i = 0; i < sym.size(); ++i) {
        t[2 * i] = sym.values[static_cast<size_t>(i)].real();
        t[2 * i + 1] = sym.values[static_cast<size_t>(i)].imag();
    }
    return Latent(std::move(t));
}

// out = sym * sqrt(nP) / ||sym||, so the empirical average power is exactly P
inline ComplexSymbols power_normalize(const ComplexSymbols& sym, double P = 1.0) {
    if (P <= 0.0) throw ValueError("power_normalize: P must be positive");
    double e = 0.0;
    for (const auto& v : sym.values) e += std::norm(v);
    if (e <= 0.0) throw ValueError("power_normalize: all-zero input has no direction");
    const double scale = std::sqrt(static_cast<double>(sym.size()) * P / e);
    ComplexSymbols out;
    out.values.reserve(sym.values.size());
    for (const auto& v : sym.values) out.values.push_back(v * scale);
    return out;
}

// i.i.d. circular complex Gaussian noise, per-symbol variance sigma2
// (sigma2/2 on each real component)
inline std::vector<std::complex<double>> draw_awgn_noise(int64_t n, double sigma2, Rng& rng) {
    std::vector<std::complex<double>> noise;
    noise.reserve(static_cast<size_t>(n));
    const double comp_std = std::sqrt(sigma2 / 2.0);
    for (int64_t i = 0; i < n; ++i) {
        const double re = rng.normal(0.0, comp_std);
        const double im = rng.normal(0.0, comp_std);
        noise.emplace_back(re, im);
    }
    return noise;
}

// z_c = y_c + n_c
inline ComplexSymbols awgn_transmit(const ComplexSymbols& sym, const ChannelConfig& ch, Rng& rng) {
    const double sigma2 = ch.noise_power();
    auto noise = draw_awgn_noise(sym.size(), sigma2, rng);
    ComplexSymbols out;
    out.values.resize(sym.values.size());
    for (size_t i = 0; i < sym.values.size(); ++i) out.values[i] = sym.values[i] + noise[i];
    return out;
}

// Convenience: the whole latent-level channel (pack -> normalize -> AWGN ->
// unpack), returning both the received latent z1 and the normalized
// transmitted latent y_ref the receiver is trying to recover.
struct ChannelRealization {
    Latent transmitted;  // power-normalized y
    Latent received;     // z1 = transmitted + noise
};

inline ChannelRealization transmit_latent(const Latent& y, const ChannelConfig& ch, Rng& rng) {
    ComplexSymbols yc = power_normalize(pack_complex(y), ch.signal_power);
    ComplexSymbols zc = awgn_transmit(yc, ch, rng);
    ChannelRealization r;
    r.transmitted = unpack_real(yc, y.spatial_shape());
    r.received = unpack_real(zc, y.spatial_shape());
    return r;
}

namespace ag {

// In-graph power normalization over the flat real view. Average complex
// power of pairs equals ||v||^2/n, so the scaling matches the symbol-domain
// operation exactly: out = v * sqrt(nP)/||v||.
inline Value power_normalize_v(Value v, double P = 1.0) {
    const int64_t n = v.numel() / 2;
    if (v.numel() % 2 != 0) throw ShapeError("power_normalize_v: odd length");
    Value energy = dot(v, v);
    if (energy.scalar() <= 0.0) throw ValueError("power_normalize_v: all-zero input");
    Value scale_s = pow_const(scale(energy, 1.0 / (static_cast<double>(n) * P)), -0.5);
    return scale_by(v, scale_s);
}

}  // namespace ag
}  // namespace semdn
