#include <gtest/gtest.h>

#include "semdn/denoiser.hpp"
#include "semdn/losses.hpp"
#include "testutil.hpp"

using namespace semdn;

namespace {

Latent random_latent(Rng& rng, std::vector<int> shape = {4, 8, 8}) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal(0.0, 1.0);
    return Latent(std::move(t));
}

// scripted similarity predictor emitting a fixed SS tail sequence
SimilarityFn scripted_ss(std::vector<double> seq) {
    auto idx = std::make_shared<size_t>(0);
    auto vals = std::make_shared<std::vector<double>>(std::move(seq));
    return [idx, vals](SimilarityScore, const Tensor&, const Tensor&) {
        return (*vals)[(*idx)++];
    };
}

ResidualFn constant_residual(double v) {
    return [v](const Tensor& z, SimilarityScore) { return Tensor::full(z.shape, v); };
}

}  // namespace

TEST(Denoiser, InitSsValues) {
    EXPECT_NEAR(init_ss(1.0), 0.707107, 1e-6);
    EXPECT_NEAR(init_ss(10.0), 0.953463, 1e-6);
    EXPECT_NEAR(init_ss(snr_db_to_linear(-3.0)), 0.577, 1e-3);
}

TEST(Denoiser, InitSsLimitsAndErrors) {
    EXPECT_GT(init_ss(1e12), 0.999999);
    EXPECT_LT(init_ss(1e-12), 1e-5);
    EXPECT_THROW(init_ss(0.0), ValueError);
    EXPECT_THROW(init_ss(-1.0), ValueError);
}

TEST(Denoiser, InitSsStrictlyIncreasing) {
    // 1000-point grid over a wide linear-SNR range
    double prev = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double eta = std::pow(10.0, -4.0 + 8.0 * i / 999.0);
        const double s = init_ss(eta);
        EXPECT_GT(s, prev);
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
        prev = s;
    }
}

TEST(Denoiser, CosineSimilarityExamples) {
    Tensor a({2}, {1.0, 0.0});
    Tensor b({2}, {1.0, 1.0});
    Tensor c({2}, {0.0, 1.0});
    EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-12);
    EXPECT_NEAR(cosine_similarity(a, b), 0.707107, 1e-6);
    EXPECT_NEAR(cosine_similarity(a, c), 0.0, 1e-12);
    EXPECT_THROW(cosine_similarity(a, Tensor({2}, {0.0, 0.0})), ValueError);
    EXPECT_THROW(cosine_similarity(a, Tensor({3}, {1.0, 1.0, 1.0})), ShapeError);
}

TEST(Denoiser, ResidualPredictorShapeAndDeterminism) {
    DenoiserConfig cfg;
    cfg.unet_depth = 2;
    cfg.base_channels = 8;
    auto gr = build_residual_predictor(cfg, 4, 3);
    Rng rng(1);
    Latent z = random_latent(rng);
    Tensor r1 = gr->predict(z.t, 0.7);
    Tensor r2 = gr->predict(z.t, 0.7);
    EXPECT_EQ(r1.shape, z.t.shape);
    EXPECT_TRUE(r1.all_finite());
    for (int64_t i = 0; i < r1.numel(); ++i) EXPECT_EQ(r1[i], r2[i]);

    // conditioning value matters
    Tensor r3 = gr->predict(z.t, 0.1);
    double diff = 0.0;
    for (int64_t i = 0; i < r1.numel(); ++i) diff += std::fabs(r1[i] - r3[i]);
    EXPECT_GT(diff, 0.0);
}

TEST(Denoiser, ResidualPredictorGeometryMismatch) {
    DenoiserConfig cfg;
    cfg.unet_depth = 2;
    cfg.base_channels = 8;
    auto gr = build_residual_predictor(cfg, 4, 3);
    Tensor bad({4, 6, 6});  // 6 not divisible by 4
    EXPECT_THROW(gr->predict(bad, 0.5), ShapeError);
    Tensor wrong_c({3, 8, 8});
    EXPECT_THROW(gr->predict(wrong_c, 0.5), ShapeError);
}

TEST(Denoiser, ScaleShiftConditioningVariant) {
    DenoiserConfig cfg;
    cfg.unet_depth = 1;
    cfg.base_channels = 8;
    cfg.ss_conditioning = SsConditioning::ScaleShift;
    auto gr = build_residual_predictor(cfg, 4, 3);
    Rng rng(2);
    Latent z = random_latent(rng, {4, 4, 4});
    Tensor r = gr->predict(z.t, 0.6);
    EXPECT_EQ(r.shape, z.t.shape);
    EXPECT_TRUE(r.all_finite());
}

TEST(Denoiser, SimilarityPredictorRangeAndDeterminism) {
    auto gs = build_similarity_predictor(4, 5);
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        Latent z = random_latent(rng);
        Latent zn = random_latent(rng);
        const double s = gs->predict(rng.uniform(), z.t, zn.t);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
    }
    Latent z = random_latent(rng);
    Latent zn = random_latent(rng);
    EXPECT_EQ(gs->predict(0.4, z.t, zn.t), gs->predict(0.4, z.t, zn.t));
    Tensor odd({4, 8, 4});
    EXPECT_THROW(gs->predict(0.4, z.t, odd), ShapeError);
}

TEST(Denoiser, DenoiseStepZeroResidualIsIdentity) {
    DenoiserConfig cfg;
    cfg.unet_depth = 1;
    cfg.base_channels = 8;
    auto gr = build_residual_predictor(cfg, 4, 3);
    auto gs = build_similarity_predictor(4, 5);
    // zero the head so g_r emits an exactly zero residual
    std::fill(gr->head.w->value.data.begin(), gr->head.w->value.data.end(), 0.0);
    std::fill(gr->head.b->value.data.begin(), gr->head.b->value.data.end(), 0.0);
    Rng rng(5);
    Latent z = random_latent(rng, {4, 4, 4});
    auto [z_next, s_next] = denoise_step(z, 0.7, *gr, *gs);
    for (int64_t i = 0; i < z.length(); ++i) EXPECT_EQ(z_next.t[i], z.t[i]);
    EXPECT_GE(s_next, 0.0);
    EXPECT_LE(s_next, 1.0);
    EXPECT_EQ(z_next.spatial_shape(), z.spatial_shape());
}

// the three stop-rule examples, driven by scripted similarity stubs
TEST(Denoiser, AdaptiveRuleAllStepsKept) {
    Rng rng(7);
    Latent z1 = random_latent(rng, {2, 2, 2});
    DenoiserConfig cfg;
    cfg.t_max = 3;
    auto res = denoise_adaptive_from(z1, 0.71, constant_residual(0.5),
                                     scripted_ss({0.80, 0.83, 0.85}), cfg);
    EXPECT_EQ(res.trace.steps_kept, 3);
    EXPECT_EQ(res.trace.steps_executed, 3);
    EXPECT_EQ(res.trace.stop_reason, StopReason::TMaxReached);
    ASSERT_EQ(res.trace.latents.size(), 4u);
    // returned latent is z_4 = z_1 + 3 * 0.5
    for (int64_t i = 0; i < z1.length(); ++i) EXPECT_NEAR(res.output.t[i], z1.t[i] + 1.5, 1e-12);
    const std::vector<double> expect_ss{0.71, 0.80, 0.83, 0.85};
    EXPECT_EQ(res.trace.ss_sequence, expect_ss);
}

TEST(Denoiser, AdaptiveRuleDiscardsOffendingStep) {
    Rng rng(7);
    Latent z1 = random_latent(rng, {2, 2, 2});
    DenoiserConfig cfg;
    cfg.t_max = 3;
    auto res = denoise_adaptive_from(z1, 0.71, constant_residual(0.5),
                                     scripted_ss({0.80, 0.78}), cfg);
    EXPECT_EQ(res.trace.steps_kept, 1);
    EXPECT_EQ(res.trace.steps_executed, 2);
    EXPECT_EQ(res.trace.stop_reason, StopReason::SsDecreased);
    // returned latent is z_2 (the 0.78 step is discarded)
    for (int64_t i = 0; i < z1.length(); ++i) EXPECT_NEAR(res.output.t[i], z1.t[i] + 0.5, 1e-12);
    ASSERT_EQ(res.trace.latents.size(), 3u);  // rejected snapshot still recorded
}

TEST(Denoiser, AdaptiveRuleFirstStepDiscarded) {
    Rng rng(7);
    Latent z1 = random_latent(rng, {2, 2, 2});
    DenoiserConfig cfg;
    cfg.t_max = 3;
    auto res =
        denoise_adaptive_from(z1, 0.71, constant_residual(0.5), scripted_ss({0.65}), cfg);
    EXPECT_EQ(res.trace.steps_kept, 0);
    EXPECT_EQ(res.trace.steps_executed, 1);
    EXPECT_EQ(res.trace.stop_reason, StopReason::SsDecreased);
    for (int64_t i = 0; i < z1.length(); ++i) EXPECT_EQ(res.output.t[i], z1.t[i]);
}

TEST(Denoiser, TiesCountAsNonDecreasing) {
    Rng rng(7);
    Latent z1 = random_latent(rng, {2, 2, 2});
    DenoiserConfig cfg;
    cfg.t_max = 2;
    auto res = denoise_adaptive_from(z1, 0.5, constant_residual(0.1),
                                     scripted_ss({0.5, 0.5}), cfg);
    EXPECT_EQ(res.trace.steps_kept, 2);
    EXPECT_EQ(res.trace.stop_reason, StopReason::TMaxReached);
}

TEST(Denoiser, TraceInvariantsWithRealNetworks) {
    DenoiserConfig cfg;
    cfg.t_max = 3;
    cfg.unet_depth = 2;
    cfg.base_channels = 8;
    auto gr = build_residual_predictor(cfg, 4, 11);
    auto gs = build_similarity_predictor(4, 13);
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        Latent z1 = random_latent(rng);
        const double snr_db = rng.uniform(-3.0, 12.0);
        auto res = denoise_adaptive(z1, snr_db, *gr, *gs, cfg);
        const auto& tr = res.trace;
        EXPECT_LE(tr.steps_kept, tr.steps_executed);
        EXPECT_LE(tr.steps_executed, cfg.t_max);
        EXPECT_TRUE(tr.kept_prefix_non_decreasing());
        EXPECT_EQ(tr.ss_sequence.size(), static_cast<size_t>(tr.steps_executed) + 1);
        // output provenance: returned latent equals the snapshot at steps_kept
        const Tensor& snap = tr.latents[static_cast<size_t>(tr.steps_kept)];
        for (int64_t i = 0; i < res.output.length(); ++i) EXPECT_EQ(res.output.t[i], snap[i]);
    }
}

TEST(Denoiser, StepBoundHonorsTmaxOne) {
    DenoiserConfig cfg;
    cfg.t_max = 1;
    Rng rng(19);
    Latent z1 = random_latent(rng, {2, 2, 2});
    auto res = denoise_adaptive_from(z1, 0.3, constant_residual(0.2), scripted_ss({0.9}), cfg);
    EXPECT_EQ(res.trace.steps_executed, 1);
    EXPECT_EQ(res.trace.steps_kept, 1);
    EXPECT_EQ(res.trace.stop_reason, StopReason::TMaxReached);
}

// d(L_MSE + alpha L_SS)/d(psi_r) against central finite differences
TEST(Denoiser, ResidualLossGradientOracle) {
    DenoiserConfig cfg;
    cfg.unet_depth = 1;
    cfg.base_channels = 4;
    auto gr = build_residual_predictor(cfg, 2, 21);
    test::perturb_params(gr->params, 97);
    Rng rng(23);
    Latent y = random_latent(rng, {2, 4, 4});
    Latent z1 = random_latent(rng, {2, 4, 4});

    auto fwd = [&] {
        using namespace ag;
        Value z = constant(z1.t);
        Value r = gr->forward(z, constant_scalar(0.7));
        Value z2 = add(z, r);
        Value yv = constant(y.t);
        return add(loss_latent_mse_v(yv, z2), loss_ss_v(yv, z2));
    };
    EXPECT_LT(test::grad_check_max_rel(fwd, gr->params.params, 1e-4, 6), 1e-3);
}

TEST(Denoiser, SimilarityPredictorGradientOracle) {
    auto gs = build_similarity_predictor(2, 29, 4);
    test::perturb_params(gs->params, 99);
    Rng rng(31);
    Latent y = random_latent(rng, {2, 4, 4});
    Latent zt = random_latent(rng, {2, 4, 4});
    Latent zn = random_latent(rng, {2, 4, 4});

    auto fwd = [&] {
        using namespace ag;
        Value s_pred = gs->forward(constant_scalar(0.6), constant(zt.t), constant(zn.t));
        return loss_similarity_predictor_v(s_pred, constant(y.t), constant(zn.t));
    };
    EXPECT_LT(test::grad_check_max_rel(fwd, gs->params.params, 1e-4, 8), 1e-3);
}
