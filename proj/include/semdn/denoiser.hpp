#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "semdn/channel.hpp"
#include "semdn/nn.hpp"

namespace semdn {

// similarity score s_t: scalar estimate of cos(y, z_t), kept in [0,1]
using SimilarityScore = double;

// s_1 = 1/sqrt(1 + eta^-1); strictly increasing in eta, range (0,1)
inline SimilarityScore init_ss(double eta) {
    if (!(eta > 0.0)) throw ValueError("init_ss: SNR must be positive in linear scale");
    return 1.0 / std::sqrt(1.0 + 1.0 / eta);
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw ShapeError("cosine_similarity: length mismatch");
    const double na = a.norm(), nb = b.norm();
    if (na <= 0.0 || nb <= 0.0) throw ValueError("cosine_similarity: zero-norm input");
    double d = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) d += a[i] * b[i];
    return d / (na * nb);
}

inline double cosine_similarity(const Latent& a, const Latent& b) {
    return cosine_similarity(a.t, b.t);
}

enum class SsConditioning { BroadcastConcat, ScaleShift };

inline std::string to_string(SsConditioning c) {
    return c == SsConditioning::BroadcastConcat ? "broadcast-concat" : "scale-shift";
}

inline SsConditioning ss_conditioning_from_string(const std::string& s) {
    if (s == "broadcast-concat") return SsConditioning::BroadcastConcat;
    if (s == "scale-shift") return SsConditioning::ScaleShift;
    throw ConfigError("unknown ss_conditioning: " + s);
}

struct DenoiserConfig {
    int t_max = 3;
    int unet_depth = 2;
    int base_channels = 32;
    SsConditioning ss_conditioning = SsConditioning::BroadcastConcat;

    void validate() const {
        if (t_max < 1) throw ConfigError("DenoiserConfig: T_max must be >= 1");
        if (unet_depth < 1) throw ConfigError("DenoiserConfig: unet_depth must be >= 1");
        if (base_channels < 1) throw ConfigError("DenoiserConfig: base_channels must be >= 1");
    }
};

// Residual predictor g_r: U-Net over the latent map, conditioned on the
// similarity score at every upsampling level. CGR = conv + group norm + ReLU.
struct ResidualPredictor {
    DenoiserConfig cfg;
    int latent_channels = 0;
    ParamCollection params{"residual_predictor"};

    Conv2d stem;
    GroupNorm stem_gn;
    struct Down {
        Conv2d down, conv;
        GroupNorm gn1, gn2;
    };
    std::vector<Down> downs;
    Conv2d mid;
    GroupNorm mid_gn;
    struct Up {
        ConvTranspose2d up;
        Conv2d conv;
        GroupNorm gn;
        // scale-shift conditioning parameters (unused for broadcast-concat)
        std::shared_ptr<Param> film_sw, film_sb, film_hw, film_hb;
    };
    std::vector<Up> ups;
    Conv2d head;

    ResidualPredictor() = default;
    ResidualPredictor(const ResidualPredictor&) = delete;
    ResidualPredictor& operator=(const ResidualPredictor&) = delete;

    int level_channels(int level) const { return cfg.base_channels << level; }

    void check_geometry(const Tensor& z) const {
        if (z.rank() != 3 || z.dim(0) != latent_channels)
            throw ShapeError("residual predictor: latent channels mismatch");
        const int div = 1 << cfg.unet_depth;
        if (z.dim(1) % div != 0 || z.dim(2) % div != 0)
            throw ShapeError("residual predictor: spatial dims must be divisible by 2^depth");
    }

    ag::Value forward(ag::Value z, ag::Value s) const {
        using namespace ag;
        check_geometry(z.val());
        Value h = relu(stem_gn(stem(z)));
        std::vector<Value> skips{h};
        for (const auto& d : downs) {
            h = relu(d.gn1(d.down(h)));
            h = relu(d.gn2(d.conv(h)));
            skips.push_back(h);
        }
        h = relu(mid_gn(mid(h)));
        for (size_t i = 0; i < ups.size(); ++i) {
            const auto& u = ups[i];
            const Value& skip = skips[ups.size() - 1 - i];
            Value up = relu(u.up(h));
            if (cfg.ss_conditioning == SsConditioning::BroadcastConcat) {
                Value plane = broadcast_plane(s, up.val().dim(1), up.val().dim(2));
                h = relu(u.gn(u.conv(concat_channels({up, skip, plane}))));
            } else {
                h = relu(u.gn(u.conv(concat_channels({up, skip}))));
                Value sc = add(scale_by(leaf(*u.film_sw), s), leaf(*u.film_sb));
                Value sh = add(scale_by(leaf(*u.film_hw), s), leaf(*u.film_hb));
                h = channel_affine(h, sc, sh);
            }
        }
        return head(h);
    }

    Tensor predict(const Tensor& z, SimilarityScore s) const {
        ag::NoGradGuard ng;
        ag::Value r = forward(ag::constant(z), ag::constant_scalar(s));
        if (!r.val().all_finite()) throw RuntimeError("residual predictor: non-finite output");
        return r.val();
    }
};

// Similarity predictor g_s: 1x1-conv network over (s_t, z_t, z_{t+1}),
// global-pooled and squashed to [0,1].
struct SimilarityPredictor {
    int latent_channels = 0;
    int hidden = 32;
    ParamCollection params{"similarity_predictor"};
    Conv2d c1, c2, c3;

    SimilarityPredictor() = default;
    SimilarityPredictor(const SimilarityPredictor&) = delete;
    SimilarityPredictor& operator=(const SimilarityPredictor&) = delete;

    ag::Value forward(ag::Value s, ag::Value z_t, ag::Value z_next) const {
        using namespace ag;
        check_same_shape(z_t.val(), z_next.val(), "similarity predictor");
        const int h = z_t.val().dim(1), w = z_t.val().dim(2);
        Value x = concat_channels({z_t, z_next, broadcast_plane(s, h, w)});
        x = relu(c1(x));
        x = relu(c2(x));
        x = c3(x);
        return sigmoid(mean(x));
    }

    SimilarityScore predict(SimilarityScore s, const Tensor& z_t, const Tensor& z_next) const {
        ag::NoGradGuard ng;
        ag::Value out = forward(ag::constant_scalar(s), ag::constant(z_t), ag::constant(z_next));
        return out.scalar();
    }
};

inline std::unique_ptr<ResidualPredictor> build_residual_predictor(const DenoiserConfig& cfg,
                                                                   int latent_channels,
                                                                   uint64_t seed) {
    cfg.validate();
    auto gr = std::make_unique<ResidualPredictor>();
    gr->cfg = cfg;
    gr->latent_channels = latent_channels;
    Rng rng(derive_seed(seed, "residual_predictor_init"));
    auto& pc = gr->params;
    const int b0 = cfg.base_channels;

    gr->stem = Conv2d(pc, "gr.stem", latent_channels, b0, 3, 1, 1, rng);
    gr->stem_gn = GroupNorm(pc, "gr.stem_gn", b0);
    for (int i = 1; i <= cfg.unet_depth; ++i) {
        ResidualPredictor::Down d;
        const int cin = gr->level_channels(i - 1), cout = gr->level_channels(i);
        d.down = Conv2d(pc, "gr.d" + std::to_string(i) + ".down", cin, cout, 3, 2, 1, rng);
        d.gn1 = GroupNorm(pc, "gr.d" + std::to_string(i) + ".gn1", cout);
        d.conv = Conv2d(pc, "gr.d" + std::to_string(i) + ".conv", cout, cout, 3, 1, 1, rng);
        d.gn2 = GroupNorm(pc, "gr.d" + std::to_string(i) + ".gn2", cout);
        gr->downs.push_back(std::move(d));
    }
    const int cmid = gr->level_channels(cfg.unet_depth);
    gr->mid = Conv2d(pc, "gr.mid", cmid, cmid, 3, 1, 1, rng);
    gr->mid_gn = GroupNorm(pc, "gr.mid_gn", cmid);
    for (int i = cfg.unet_depth; i >= 1; --i) {
        ResidualPredictor::Up u;
        const int cin = gr->level_channels(i), cout = gr->level_channels(i - 1);
        u.up = ConvTranspose2d(pc, "gr.u" + std::to_string(i) + ".up", cin, cout, 4, 2, 1, rng);
        const int cat_in =
            2 * cout + (cfg.ss_conditioning == SsConditioning::BroadcastConcat ? 1 : 0);
        u.conv = Conv2d(pc, "gr.u" + std::to_string(i) + ".conv", cat_in, cout, 3, 1, 1, rng);
        u.gn = GroupNorm(pc, "gr.u" + std::to_string(i) + ".gn", cout);
        if (cfg.ss_conditioning == SsConditioning::ScaleShift) {
            u.film_sw = pc.add("gr.u" + std::to_string(i) + ".film_sw", Tensor::zeros({cout}));
            u.film_sb = pc.add("gr.u" + std::to_string(i) + ".film_sb", Tensor::zeros({cout}));
            u.film_hw = pc.add("gr.u" + std::to_string(i) + ".film_hw", Tensor::zeros({cout}));
            u.film_hb = pc.add("gr.u" + std::to_string(i) + ".film_hb", Tensor::zeros({cout}));
        }
        gr->ups.push_back(std::move(u));
    }
    gr->head = Conv2d(pc, "gr.head", b0, latent_channels, 3, 1, 1, rng);
    return gr;
}

inline std::unique_ptr<SimilarityPredictor> build_similarity_predictor(int latent_channels,
                                                                       uint64_t seed,
                                                                       int hidden = 32) {
    auto gs = std::make_unique<SimilarityPredictor>();
    gs->latent_channels = latent_channels;
    gs->hidden = hidden;
    Rng rng(derive_seed(seed, "similarity_predictor_init"));
    auto& pc = gs->params;
    gs->c1 = Conv2d(pc, "gs.c1", 2 * latent_channels + 1, hidden, 1, 1, 0, rng);
    gs->c2 = Conv2d(pc, "gs.c2", hidden, hidden, 1, 1, 0, rng);
    gs->c3 = Conv2d(pc, "gs.c3", hidden, 1, 1, 1, 0, rng);
    return gs;
}

// ---------------------------------------------------------------------------
// adaptive inference
// ---------------------------------------------------------------------------

enum class StopReason { SsDecreased, TMaxReached };

inline std::string to_string(StopReason r) {
    return r == StopReason::SsDecreased ? "ss_decreased" : "t_max_reached";
}

struct DenoiseTrace {
    std::vector<SimilarityScore> ss_sequence;  // s_1 .. s_{steps_executed+1}
    int steps_executed = 0;
    int steps_kept = 0;
    StopReason stop_reason = StopReason::TMaxReached;
    std::vector<Tensor> latents;  // optional: z_1 .. z_{steps_executed+1}

    bool kept_prefix_non_decreasing() const {
        for (int i = 0; i < steps_kept; ++i)
            if (ss_sequence[static_cast<size_t>(i) + 1] < ss_sequence[static_cast<size_t>(i)])
                return false;
        return true;
    }
};

struct DenoiseResult {
    Latent output;  // last kept latent (z_1 if every step was discarded)
    DenoiseTrace trace;
};

using ResidualFn = std::function<Tensor(const Tensor& z, SimilarityScore s)>;
using SimilarityFn =
    std::function<SimilarityScore(SimilarityScore s, const Tensor& z, const Tensor& z_next)>;

// z_{t+1} = g_r(z_t, s_t) + z_t ; s_{t+1} = g_s(s_t, z_t, z_{t+1})
inline std::pair<Latent, SimilarityScore> denoise_step(const Latent& z, SimilarityScore s,
                                                       const ResidualPredictor& gr,
                                                       const SimilarityPredictor& gs) {
    Tensor r = gr.predict(z.t, s);
    Tensor z_next = z.t;
    for (int64_t i = 0; i < z_next.numel(); ++i) z_next[i] += r[i];
    const SimilarityScore s_next = gs.predict(s, z.t, z_next);
    return {Latent(std::move(z_next)), s_next};
}

// Iterates denoise steps while the predicted SS is non-decreasing (ties
// keep), up to T_max. A step whose SS drops is discarded and iteration stops.
// This variant takes the initial SS explicitly (the initial-SS ablation feeds
// constant or random policies through here).
inline DenoiseResult denoise_adaptive_from(const Latent& z1, SimilarityScore s1,
                                           const ResidualFn& residual,
                                           const SimilarityFn& similarity,
                                           const DenoiserConfig& cfg,
                                           bool record_latents = true) {
    cfg.validate();
    DenoiseResult res;
    DenoiseTrace& tr = res.trace;
    SimilarityScore s = s1;
    tr.ss_sequence.push_back(s);
    if (record_latents) tr.latents.push_back(z1.t);

    Tensor z = z1.t;
    tr.stop_reason = StopReason::TMaxReached;
    for (int t = 1; t <= cfg.t_max; ++t) {
        Tensor r = residual(z, s);
        check_same_shape(r, z, "denoise_adaptive residual");
        Tensor z_next = z;
        for (int64_t i = 0; i < z_next.numel(); ++i) z_next[i] += r[i];
        const SimilarityScore s_next = similarity(s, z, z_next);
        ++tr.steps_executed;
        tr.ss_sequence.push_back(s_next);
        if (record_latents) tr.latents.push_back(z_next);
        if (s_next >= s) {
            z = std::move(z_next);
            s = s_next;
            ++tr.steps_kept;
        } else {
            tr.stop_reason = StopReason::SsDecreased;
            break;
        }
    }
    res.output = Latent(std::move(z));
    return res;
}

// s_1 from Eq.-style SNR initialization
inline DenoiseResult denoise_adaptive(const Latent& z1, double snr_db, const ResidualFn& residual,
                                      const SimilarityFn& similarity, const DenoiserConfig& cfg,
                                      bool record_latents = true) {
    return denoise_adaptive_from(z1, init_ss(snr_db_to_linear(snr_db)), residual, similarity, cfg,
                                 record_latents);
}

inline ResidualFn residual_fn(const ResidualPredictor& gr) {
    return [&gr](const Tensor& z, SimilarityScore s) { return gr.predict(z, s); };
}

inline SimilarityFn similarity_fn(const SimilarityPredictor& gs) {
    return [&gs](SimilarityScore s, const Tensor& z, const Tensor& z_next) {
        return gs.predict(s, z, z_next);
    };
}

inline DenoiseResult denoise_adaptive(const Latent& z1, double snr_db,
                                      const ResidualPredictor& gr, const SimilarityPredictor& gs,
                                      const DenoiserConfig& cfg, bool record_latents = true) {
    return denoise_adaptive(z1, snr_db, residual_fn(gr), similarity_fn(gs), cfg, record_latents);
}

// Fixed number of steps, no stop rule (used by the step-count ablation).
// steps == 0 returns z1 unchanged.
inline Latent denoise_fixed(const Latent& z1, double snr_db, int steps,
                            const ResidualPredictor& gr, const SimilarityPredictor& gs) {
    Tensor z = z1.t;
    SimilarityScore s = init_ss(snr_db_to_linear(snr_db));
    for (int t = 0; t < steps; ++t) {
        Tensor r = gr.predict(z, s);
        Tensor z_next = z;
        for (int64_t i = 0; i < z_next.numel(); ++i) z_next[i] += r[i];
        s = gs.predict(s, z, z_next);
        z = std::move(z_next);
    }
    return Latent(std::move(z));
}

}  // namespace semdn
