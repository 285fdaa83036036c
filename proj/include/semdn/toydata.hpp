#pragma once

#include "semdn/jscc.hpp"
#include "semdn/rng.hpp"

namespace semdn {

// Synthetic smooth test images: low-frequency sinusoid mixtures plus a soft
// ellipse, rescaled into [0.05, 0.95]. Deliberately compressible so a small
// codec can learn them quickly.
inline ImageTensor make_toy_image(int size, Rng& rng) {
    Tensor t({3, size, size});
    const double inv = 1.0 / static_cast<double>(size);

    // shared geometry across channels, channel-specific amplitude/phase
    const double fx1 = rng.uniform(0.5, 2.0), fy1 = rng.uniform(0.5, 2.0);
    const double fx2 = rng.uniform(0.5, 3.0), fy2 = rng.uniform(0.5, 3.0);
    const double ph1 = rng.uniform(0.0, 2.0 * M_PI), ph2 = rng.uniform(0.0, 2.0 * M_PI);
    const double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8);
    const double rad = rng.uniform(0.12, 0.3);
    double base[3], gx[3], gy[3], a1[3], a2[3], blob[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(-0.5, 0.5);
        gx[c] = rng.uniform(-1.0, 1.0);
        gy[c] = rng.uniform(-1.0, 1.0);
        a1[c] = rng.uniform(-0.6, 0.6);
        a2[c] = rng.uniform(-0.4, 0.4);
        blob[c] = rng.uniform(-1.0, 1.0);
    }

    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double u = x * inv, v = y * inv;
                double val = base[c] + gx[c] * u + gy[c] * v;
                val += a1[c] * std::sin(2.0 * M_PI * (fx1 * u + fy1 * v) + ph1);
                val += a2[c] * std::cos(2.0 * M_PI * (fx2 * u - fy2 * v) + ph2);
                const double d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                val += blob[c] * std::exp(-d2 / (2.0 * rad * rad));
                t[(static_cast<int64_t>(c) * size + y) * size + x] = val;
            }

    const double lo = t.min(), hi = t.max();
    const double span = std::max(hi - lo, 1e-9);
    for (auto& v : t.data) v = 0.05 + 0.9 * (v - lo) / span;
    return ImageTensor(std::move(t));
}

inline std::vector<ImageTensor> make_toy_images(int count, int size, uint64_t seed) {
    Rng rng(derive_seed(seed, "toy_corpus"));
    std::vector<ImageTensor> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(make_toy_image(size, rng));
    return out;
}

}  // namespace semdn
