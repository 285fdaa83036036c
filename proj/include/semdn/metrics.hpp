#pragma once

#include <iostream>

#include "semdn/jscc.hpp"
#include "semdn/losses.hpp"

namespace semdn {

// 10*log10(MAX^2/MSE) with MAX=1, capped (default 100 dB) for MSE -> 0
inline double psnr(const ImageTensor& x, const ImageTensor& xhat, double cap_db = 100.0) {
    const double mse = loss_end_to_end(x, xhat);
    if (mse <= 0.0) return cap_db;
    return std::min(10.0 * std::log10(1.0 / mse), cap_db);
}

namespace detail {

// valid-region convolution with an 11x11 gaussian (sigma 1.5), per plane
struct GaussianWindow {
    static constexpr int size = 11;
    std::array<double, size> w{};

    GaussianWindow() {
        const double sigma = 1.5;
        double sum = 0.0;
        for (int i = 0; i < size; ++i) {
            const double d = i - (size - 1) / 2.0;
            w[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
            sum += w[static_cast<size_t>(i)];
        }
        for (auto& v : w) v /= sum;
    }
};

// separable valid gaussian filter: out is (h-10) x (w-10)
inline std::vector<double> gauss_valid(const std::vector<double>& img, int h, int w, int& ho,
                                       int& wo) {
    static const GaussianWindow win;
    const int k = GaussianWindow::size;
    ho = h - k + 1;
    wo = w - k + 1;
    std::vector<double> tmp(static_cast<size_t>(h) * wo);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < wo; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win.w[static_cast<size_t>(i)] * img[static_cast<size_t>(y) * w + x + i];
            tmp[static_cast<size_t>(y) * wo + x] = acc;
        }
    std::vector<double> out(static_cast<size_t>(ho) * wo);
    for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win.w[static_cast<size_t>(i)] * tmp[static_cast<size_t>(y + i) * wo + x];
            out[static_cast<size_t>(y) * wo + x] = acc;
        }
    return out;
}

// per-scale luminance and contrast-structure terms of SSIM
inline std::pair<double, double> ssim_l_cs(const std::vector<double>& a,
                                           const std::vector<double>& b, int h, int w) {
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    int ho = 0, wo = 0;
    std::vector<double> mua = gauss_valid(a, h, w, ho, wo);
    std::vector<double> mub = gauss_valid(b, h, w, ho, wo);
    std::vector<double> aa(a.size()), bb(b.size()), ab(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    std::vector<double> saa = gauss_valid(aa, h, w, ho, wo);
    std::vector<double> sbb = gauss_valid(bb, h, w, ho, wo);
    std::vector<double> sab = gauss_valid(ab, h, w, ho, wo);
    double lsum = 0.0, cssum = 0.0;
    const size_t n = mua.size();
    for (size_t i = 0; i < n; ++i) {
        const double ma = mua[i], mb = mub[i];
        const double va = saa[i] - ma * ma;
        const double vb = sbb[i] - mb * mb;
        const double cov = sab[i] - ma * mb;
        lsum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cssum += (2.0 * cov + c2) / (va + vb + c2);
    }
    return {lsum / static_cast<double>(n), cssum / static_cast<double>(n)};
}

inline std::vector<double> downsample2(const std::vector<double>& img, int h, int w, int& ho,
                                       int& wo) {
    ho = h / 2;
    wo = w / 2;
    std::vector<double> out(static_cast<size_t>(ho) * wo);
    for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x)
            out[static_cast<size_t>(y) * wo + x] =
                0.25 * (img[static_cast<size_t>(2 * y) * w + 2 * x] +
                        img[static_cast<size_t>(2 * y) * w + 2 * x + 1] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x + 1]);
    return out;
}

}  // namespace detail

// Multi-scale SSIM with the conventional scale weights; averaged over the
// three channels. Scales are reduced (with a warning) when the image is too
// small for the full pyramid.
inline double ms_ssim(const ImageTensor& x, const ImageTensor& xhat, int scales = 5) {
    check_same_shape(x.t, xhat.t, "ms_ssim");
    const int h = x.height(), w = x.width();
    if (std::min(h, w) < detail::GaussianWindow::size)
        throw ShapeError("ms_ssim: image smaller than the 11x11 window");

    int feasible = 1;
    for (int side = std::min(h, w) / 2; side >= detail::GaussianWindow::size; side /= 2)
        ++feasible;
    int used = std::min(scales, feasible);
    if (used < scales)
        std::cerr << "ms_ssim: reducing scales from " << scales << " to " << used
                  << " for a " << h << "x" << w << " image\n";

    static const std::array<double, 5> full_weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    std::vector<double> weights(full_weights.begin(), full_weights.begin() + used);
    double wsum = 0.0;
    for (double v : weights) wsum += v;
    for (auto& v : weights) v /= wsum;

    double score = 0.0;
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> a(x.t.data.begin() + c * plane, x.t.data.begin() + (c + 1) * plane);
        std::vector<double> b(xhat.t.data.begin() + c * plane,
                              xhat.t.data.begin() + (c + 1) * plane);
        int ch = h, cw = w;
        double acc = 1.0;
        for (int s = 0; s < used; ++s) {
            auto [l, cs] = detail::ssim_l_cs(a, b, ch, cw);
            const double term = s + 1 == used ? std::max(l, 0.0) * std::max(cs, 0.0)
                                              : std::max(cs, 0.0);
            acc *= std::pow(term, weights[static_cast<size_t>(s)]);
            if (s + 1 < used) {
                int nh = 0, nw = 0;
                a = detail::downsample2(a, ch, cw, nh, nw);
                b = detail::downsample2(b, ch, cw, nh, nw);
                ch = nh;
                cw = nw;
            }
        }
        score += acc;
    }
    return score / 3.0;
}

}  // namespace semdn
