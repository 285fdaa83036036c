#pragma once

#include <Eigen/Core>

#include "semdn/autograd.hpp"
#include "semdn/rng.hpp"

namespace semdn {
namespace ag {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

namespace detail {

// cols layout: [Cin*kh*kw] x [Hout*Wout], row-major
inline void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
                   int hout, int wout, double* cols) {
    const int64_t npos = static_cast<int64_t>(hout) * wout;
    for (int ci = 0; ci < cin; ++ci)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                double* row = cols + ((static_cast<int64_t>(ci) * kh + i) * kw + j) * npos;
                for (int y = 0; y < hout; ++y) {
                    const int sy = y * stride + i - pad;
                    for (int xx = 0; xx < wout; ++xx) {
                        const int sx = xx * stride + j - pad;
                        row[static_cast<int64_t>(y) * wout + xx] =
                            (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                ? x[(static_cast<int64_t>(ci) * h + sy) * w + sx]
                                : 0.0;
                    }
                }
            }
}

inline void col2im_acc(const double* cols, int cin, int h, int w, int kh, int kw, int stride,
                       int pad, int hout, int wout, double* x) {
    const int64_t npos = static_cast<int64_t>(hout) * wout;
    for (int ci = 0; ci < cin; ++ci)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                const double* row = cols + ((static_cast<int64_t>(ci) * kh + i) * kw + j) * npos;
                for (int y = 0; y < hout; ++y) {
                    const int sy = y * stride + i - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int xx = 0; xx < wout; ++xx) {
                        const int sx = xx * stride + j - pad;
                        if (sx < 0 || sx >= w) continue;
                        x[(static_cast<int64_t>(ci) * h + sy) * w + sx] +=
                            row[static_cast<int64_t>(y) * wout + xx];
                    }
                }
            }
}

}  // namespace detail

// conv2d: x {Cin,H,W}, w {Cout,Cin,kh,kw}, b {Cout}
inline Value conv2d(Value x, Value w, Value b, int stride, int pad) {
    const Tensor& xt = x.val();
    const Tensor& wt = w.val();
    if (xt.rank() != 3 || wt.rank() != 4) throw ShapeError("conv2d: bad ranks");
    const int cin = xt.dim(0), h = xt.dim(1), ww = xt.dim(2);
    const int cout = wt.dim(0), kh = wt.dim(2), kw = wt.dim(3);
    if (wt.dim(1) != cin) throw ShapeError("conv2d: channel mismatch");
    const int hout = (h + 2 * pad - kh) / stride + 1;
    const int wout = (ww + 2 * pad - kw) / stride + 1;
    if (hout <= 0 || wout <= 0) throw ShapeError("conv2d: output would be empty");
    const int k = cin * kh * kw;
    const int64_t npos = static_cast<int64_t>(hout) * wout;

    auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(k) * npos);
    detail::im2col(xt.data.data(), cin, h, ww, kh, kw, stride, pad, hout, wout, cols->data());

    Tensor out({cout, hout, wout});
    {
        ConstRowMap wm(wt.data.data(), cout, k);
        ConstRowMap cm(cols->data(), k, npos);
        RowMap om(out.data.data(), cout, npos);
        om.noalias() = wm * cm;
        for (int co = 0; co < cout; ++co) om.row(co).array() += b.val().data[co];
    }

    auto back = [cols, cin, h, ww, kh, kw, stride, pad, hout, wout, cout, k, npos](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        Node& pb = *n.parents[2];
        ConstRowMap gy(n.grad.data.data(), cout, npos);
        if (pw.requires_grad) {
            Tensor& gw = ensure_grad(pw);
            RowMap gwm(gw.data.data(), cout, k);
            ConstRowMap cm(cols->data(), k, npos);
            gwm.noalias() += gy * cm.transpose();
        }
        if (pb.requires_grad) {
            Tensor& gb = ensure_grad(pb);
            for (int co = 0; co < cout; ++co) gb.data[co] += gy.row(co).sum();
        }
        if (px.requires_grad) {
            Tensor& gx = ensure_grad(px);
            ConstRowMap wm(pw.val.data.data(), cout, k);
            RowMat dcols = wm.transpose() * gy;  // k x npos
            detail::col2im_acc(dcols.data(), cin, h, ww, kh, kw, stride, pad, hout, wout,
                               gx.data.data());
        }
    };
    return make_node(std::move(out), {x, w, b}, back);
}

// conv_transpose2d: x {Cin,h,w}, w {Cin,Cout,kh,kw}, b {Cout}
inline Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad, int outpad = 0) {
    const Tensor& xt = x.val();
    const Tensor& wt = w.val();
    if (xt.rank() != 3 || wt.rank() != 4) throw ShapeError("conv_transpose2d: bad ranks");
    const int cin = xt.dim(0), h = xt.dim(1), ww = xt.dim(2);
    const int cout = wt.dim(1), kh = wt.dim(2), kw = wt.dim(3);
    if (wt.dim(0) != cin) throw ShapeError("conv_transpose2d: channel mismatch");
    const int hout = (h - 1) * stride - 2 * pad + kh + outpad;
    const int wout = (ww - 1) * stride - 2 * pad + kw + outpad;
    if (hout <= 0 || wout <= 0) throw ShapeError("conv_transpose2d: output would be empty");
    const int kp = cout * kh * kw;
    const int64_t nin = static_cast<int64_t>(h) * ww;

    Tensor out({cout, hout, wout});
    {
        ConstRowMap wm(wt.data.data(), cin, kp);
        ConstRowMap xm(xt.data.data(), cin, nin);
        RowMat cols = wm.transpose() * xm;  // kp x nin
        // scatter cols into the output map (transposed im2col)
        detail::col2im_acc(cols.data(), cout, hout, wout, kh, kw, stride, pad, h, ww,
                           out.data.data());
        RowMap om(out.data.data(), cout, static_cast<int64_t>(hout) * wout);
        for (int co = 0; co < cout; ++co) om.row(co).array() += b.val().data[co];
    }

    auto back = [cin, h, ww, kh, kw, stride, pad, hout, wout, cout, kp, nin](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        Node& pb = *n.parents[2];
        // dcols[k', pos_in] gathered from dOut
        std::vector<double> dcols(static_cast<size_t>(kp) * nin);
        detail::im2col(n.grad.data.data(), cout, hout, wout, kh, kw, stride, pad, h, ww,
                       dcols.data());
        ConstRowMap dcm(dcols.data(), kp, nin);
        if (px.requires_grad) {
            Tensor& gx = ensure_grad(px);
            ConstRowMap wm(pw.val.data.data(), cin, kp);
            RowMap gxm(gx.data.data(), cin, nin);
            gxm.noalias() += wm * dcm;
        }
        if (pw.requires_grad) {
            Tensor& gw = ensure_grad(pw);
            ConstRowMap xm(px.val.data.data(), cin, nin);
            RowMap gwm(gw.data.data(), cin, kp);
            gwm.noalias() += xm * dcm.transpose();
        }
        if (pb.requires_grad) {
            Tensor& gb = ensure_grad(pb);
            ConstRowMap gy(n.grad.data.data(), cout, static_cast<int64_t>(hout) * wout);
            for (int co = 0; co < cout; ++co) gb.data[co] += gy.row(co).sum();
        }
    };
    return make_node(std::move(out), {x, w, b}, back);
}

// group normalization over {C,H,W} with per-channel affine
inline Value group_norm(Value x, Value gamma, Value beta, int groups, double eps = 1e-5) {
    const Tensor& xt = x.val();
    if (xt.rank() != 3) throw ShapeError("group_norm: rank-3 input required");
    const int c = xt.dim(0), h = xt.dim(1), w = xt.dim(2);
    if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const int cg = c / groups;
    const int64_t hw = static_cast<int64_t>(h) * w;
    const int64_t m = cg * hw;

    auto mu = std::make_shared<std::vector<double>>(groups);
    auto ivar = std::make_shared<std::vector<double>>(groups);  // 1/sqrt(var+eps)
    Tensor out({c, h, w});
    for (int g = 0; g < groups; ++g) {
        const double* xs = xt.data.data() + static_cast<int64_t>(g) * m;
        double s = 0.0;
        for (int64_t i = 0; i < m; ++i) s += xs[i];
        const double mean = s / static_cast<double>(m);
        double v = 0.0;
        for (int64_t i = 0; i < m; ++i) {
            const double d = xs[i] - mean;
            v += d * d;
        }
        const double inv = 1.0 / std::sqrt(v / static_cast<double>(m) + eps);
        (*mu)[g] = mean;
        (*ivar)[g] = inv;
        double* os = out.data.data() + static_cast<int64_t>(g) * m;
        for (int64_t i = 0; i < m; ++i) os[i] = (xs[i] - mean) * inv;
    }
    // affine
    for (int ci = 0; ci < c; ++ci) {
        const double ga = gamma.val().data[ci], be = beta.val().data[ci];
        double* os = out.data.data() + static_cast<int64_t>(ci) * hw;
        for (int64_t i = 0; i < hw; ++i) os[i] = os[i] * ga + be;
    }

    auto back = [mu, ivar, c, cg, groups, hw, m](Node& n) {
        Node& px = *n.parents[0];
        Node& pg = *n.parents[1];
        Node& pb = *n.parents[2];
        // reconstruct normalized values xhat from stored stats
        if (pg.requires_grad || pb.requires_grad) {
            for (int ci = 0; ci < c; ++ci) {
                const int g = ci / cg;
                double dg = 0.0, db = 0.0;
                const double* xs = px.val.data.data() + static_cast<int64_t>(ci) * hw;
                const double* gy = n.grad.data.data() + static_cast<int64_t>(ci) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const double xhat = (xs[i] - (*mu)[g]) * (*ivar)[g];
                    dg += gy[i] * xhat;
                    db += gy[i];
                }
                if (pg.requires_grad) ensure_grad(pg).data[ci] += dg;
                if (pb.requires_grad) ensure_grad(pb).data[ci] += db;
            }
        }
        if (px.requires_grad) {
            Tensor& gx = ensure_grad(px);
            for (int g = 0; g < groups; ++g) {
                const double mean = (*mu)[g], inv = (*ivar)[g];
                // per-group sums of dxhat and dxhat*xhat
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int cc = 0; cc < cg; ++cc) {
                    const int ci = g * cg + cc;
                    const double ga = pg.val.data[ci];
                    const double* xs = px.val.data.data() + static_cast<int64_t>(ci) * hw;
                    const double* gy = n.grad.data.data() + static_cast<int64_t>(ci) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const double xhat = (xs[i] - mean) * inv;
                        const double dxh = gy[i] * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat;
                    }
                }
                const double invm = 1.0 / static_cast<double>(m);
                for (int cc = 0; cc < cg; ++cc) {
                    const int ci = g * cg + cc;
                    const double ga = pg.val.data[ci];
                    const double* xs = px.val.data.data() + static_cast<int64_t>(ci) * hw;
                    const double* gy = n.grad.data.data() + static_cast<int64_t>(ci) * hw;
                    double* go = gx.data.data() + static_cast<int64_t>(ci) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const double xhat = (xs[i] - mean) * inv;
                        const double dxh = gy[i] * ga;
                        go[i] += inv * (dxh - invm * sum_dxh - xhat * invm * sum_dxh_xh);
                    }
                }
            }
        }
    };
    return make_node(std::move(out), {x, gamma, beta}, back);
}

// per-row layer norm on a {m,n} token matrix
inline Value layer_norm_rows(Value x, Value gamma, Value beta, double eps = 1e-5) {
    const Tensor& xt = x.val();
    if (xt.rank() != 2) throw ShapeError("layer_norm_rows: rank-2 input required");
    const int mrows = xt.dim(0), nc = xt.dim(1);
    auto mu = std::make_shared<std::vector<double>>(mrows);
    auto ivar = std::make_shared<std::vector<double>>(mrows);
    Tensor out({mrows, nc});
    for (int r = 0; r < mrows; ++r) {
        const double* xs = xt.data.data() + static_cast<int64_t>(r) * nc;
        double s = 0.0;
        for (int i = 0; i < nc; ++i) s += xs[i];
        const double mean = s / nc;
        double v = 0.0;
        for (int i = 0; i < nc; ++i) {
            const double d = xs[i] - mean;
            v += d * d;
        }
        const double inv = 1.0 / std::sqrt(v / nc + eps);
        (*mu)[r] = mean;
        (*ivar)[r] = inv;
        double* os = out.data.data() + static_cast<int64_t>(r) * nc;
        for (int i = 0; i < nc; ++i)
            os[i] = (xs[i] - mean) * inv * gamma.val().data[i] + beta.val().data[i];
    }
    auto back = [mu, ivar, mrows, nc](Node& n) {
        Node& px = *n.parents[0];
        Node& pg = *n.parents[1];
        Node& pb = *n.parents[2];
        for (int r = 0; r < mrows; ++r) {
            const double mean = (*mu)[r], inv = (*ivar)[r];
            const double* xs = px.val.data.data() + static_cast<int64_t>(r) * nc;
            const double* gy = n.grad.data.data() + static_cast<int64_t>(r) * nc;
            if (pg.requires_grad || pb.requires_grad) {
                for (int i = 0; i < nc; ++i) {
                    const double xhat = (xs[i] - mean) * inv;
                    if (pg.requires_grad) ensure_grad(pg).data[i] += gy[i] * xhat;
                    if (pb.requires_grad) ensure_grad(pb).data[i] += gy[i];
                }
            }
            if (px.requires_grad) {
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int i = 0; i < nc; ++i) {
                    const double xhat = (xs[i] - mean) * inv;
                    const double dxh = gy[i] * pg.val.data[i];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat;
                }
                Tensor& gx = ensure_grad(px);
                double* go = gx.data.data() + static_cast<int64_t>(r) * nc;
                for (int i = 0; i < nc; ++i) {
                    const double xhat = (xs[i] - mean) * inv;
                    const double dxh = gy[i] * pg.val.data[i];
                    go[i] += inv * (dxh - sum_dxh / nc - xhat * sum_dxh_xh / nc);
                }
            }
        }
    };
    return make_node(std::move(out), {x, gamma, beta}, back);
}

inline Value matmul(Value a, Value b) {
    const Tensor& at = a.val();
    const Tensor& bt = b.val();
    if (at.rank() != 2 || bt.rank() != 2 || at.dim(1) != bt.dim(0))
        throw ShapeError("matmul: incompatible shapes");
    const int m = at.dim(0), k = at.dim(1), n2 = bt.dim(1);
    Tensor out({m, n2});
    {
        ConstRowMap am(at.data.data(), m, k);
        ConstRowMap bm(bt.data.data(), k, n2);
        RowMap om(out.data.data(), m, n2);
        om.noalias() = am * bm;
    }
    return make_node(std::move(out), {a, b}, [m, k, n2](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        ConstRowMap gy(n.grad.data.data(), m, n2);
        if (pa.requires_grad) {
            ConstRowMap bm(pb.val.data.data(), k, n2);
            RowMap ga(ensure_grad(pa).data.data(), m, k);
            ga.noalias() += gy * bm.transpose();
        }
        if (pb.requires_grad) {
            ConstRowMap am(pa.val.data.data(), m, k);
            RowMap gb(ensure_grad(pb).data.data(), k, n2);
            gb.noalias() += am.transpose() * gy;
        }
    });
}

// {m,n} + {n} broadcast over rows
inline Value add_rowvec(Value a, Value v) {
    const Tensor& at = a.val();
    if (at.rank() != 2 || v.val().rank() != 1 || v.val().dim(0) != at.dim(1))
        throw ShapeError("add_rowvec: shape mismatch");
    const int m = at.dim(0), n2 = at.dim(1);
    Tensor out = at;
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n2; ++c) out.data[static_cast<int64_t>(r) * n2 + c] += v.val().data[c];
    return make_node(std::move(out), {a, v}, [m, n2](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& g = ensure_grad(*n.parents[0]);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = ensure_grad(*n.parents[1]);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n2; ++c) g.data[c] += n.grad.data[static_cast<int64_t>(r) * n2 + c];
        }
    });
}

// y[c,:,:] = x[c,:,:] * (1 + scale[c]) + shift[c]   (FiLM-style conditioning)
inline Value channel_affine(Value x, Value scale, Value shift) {
    const Tensor& xt = x.val();
    if (xt.rank() != 3) throw ShapeError("channel_affine: rank-3 input required");
    const int c = xt.dim(0);
    const int64_t hw = static_cast<int64_t>(xt.dim(1)) * xt.dim(2);
    if (scale.val().numel() != c || shift.val().numel() != c)
        throw ShapeError("channel_affine: scale/shift must have C entries");
    Tensor out = xt;
    for (int ci = 0; ci < c; ++ci) {
        const double a = 1.0 + scale.val().data[ci], b = shift.val().data[ci];
        double* os = out.data.data() + ci * hw;
        for (int64_t i = 0; i < hw; ++i) os[i] = os[i] * a + b;
    }
    return make_node(std::move(out), {x, scale, shift}, [c, hw](Node& n) {
        Node& px = *n.parents[0];
        Node& ps = *n.parents[1];
        Node& pf = *n.parents[2];
        for (int ci = 0; ci < c; ++ci) {
            const double* gy = n.grad.data.data() + ci * hw;
            const double* xs = px.val.data.data() + ci * hw;
            if (px.requires_grad) {
                double* gx = ensure_grad(px).data.data() + ci * hw;
                const double a = 1.0 + ps.val.data[ci];
                for (int64_t i = 0; i < hw; ++i) gx[i] += gy[i] * a;
            }
            if (ps.requires_grad) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += gy[i] * xs[i];
                ensure_grad(ps).data[ci] += acc;
            }
            if (pf.requires_grad) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += gy[i];
                ensure_grad(pf).data[ci] += acc;
            }
        }
    });
}

}  // namespace ag

// ---------------------------------------------------------------------------
// layers: thin structs owning parameters, building graph nodes on call
// ---------------------------------------------------------------------------

inline int pick_groups(int channels, int preferred = 8) {
    for (int g = std::min(preferred, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

struct Conv2d {
    std::shared_ptr<Param> w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamCollection& pc, const std::string& name, int cin, int cout, int k, int stride_,
           int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
        w = pc.add(name + ".w", randn(rng, {cout, cin, k, k}, std));
        b = pc.add(name + ".b", Tensor::zeros({cout}));
    }

    ag::Value operator()(ag::Value x) const {
        return ag::conv2d(x, ag::leaf(*w), ag::leaf(*b), stride, pad);
    }
};

struct ConvTranspose2d {
    std::shared_ptr<Param> w, b;
    int stride = 1, pad = 0, outpad = 0;

    ConvTranspose2d() = default;
    ConvTranspose2d(ParamCollection& pc, const std::string& name, int cin, int cout, int k,
                    int stride_, int pad_, Rng& rng, int outpad_ = 0)
        : stride(stride_), pad(pad_), outpad(outpad_) {
        const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
        w = pc.add(name + ".w", randn(rng, {cin, cout, k, k}, std));
        b = pc.add(name + ".b", Tensor::zeros({cout}));
    }

    ag::Value operator()(ag::Value x) const {
        return ag::conv_transpose2d(x, ag::leaf(*w), ag::leaf(*b), stride, pad, outpad);
    }
};

struct GroupNorm {
    std::shared_ptr<Param> gamma, beta;
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(ParamCollection& pc, const std::string& name, int channels)
        : groups(pick_groups(channels)) {
        gamma = pc.add(name + ".gamma", Tensor::full({channels}, 1.0));
        beta = pc.add(name + ".beta", Tensor::zeros({channels}));
    }

    ag::Value operator()(ag::Value x) const {
        return ag::group_norm(x, ag::leaf(*gamma), ag::leaf(*beta), groups);
    }
};

struct LayerNorm {
    std::shared_ptr<Param> gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamCollection& pc, const std::string& name, int dim) {
        gamma = pc.add(name + ".gamma", Tensor::full({dim}, 1.0));
        beta = pc.add(name + ".beta", Tensor::zeros({dim}));
    }

    ag::Value operator()(ag::Value x) const {
        return ag::layer_norm_rows(x, ag::leaf(*gamma), ag::leaf(*beta));
    }
};

// y = x * W^T + b on token matrices {m,in} -> {m,out}
struct Linear {
    std::shared_ptr<Param> w, b;

    Linear() = default;
    Linear(ParamCollection& pc, const std::string& name, int in, int out, Rng& rng) {
        const double std = std::sqrt(2.0 / static_cast<double>(in));
        w = pc.add(name + ".w", randn(rng, {out, in}, std));
        b = pc.add(name + ".b", Tensor::zeros({out}));
    }

    ag::Value operator()(ag::Value x) const {
        return ag::add_rowvec(ag::matmul(x, ag::transpose(ag::leaf(*w))), ag::leaf(*b));
    }
};

}  // namespace semdn
