#include <gtest/gtest.h>

#include <filesystem>

#include "semdn/metrics.hpp"
#include "semdn/toydata.hpp"
#include "semdn/training.hpp"
#include "testutil.hpp"

using namespace semdn;

namespace {

CodecConfig tiny_codec_cfg() {
    CodecConfig cc;
    cc.stages_m = 1;
    cc.blocks_per_stage = {1, 1};
    cc.embed_dims = {8, 12};
    cc.head_filters = 4;
    cc.patch_size = 2;
    return cc;
}

DenoiserConfig tiny_denoiser_cfg() {
    DenoiserConfig dc;
    dc.t_max = 2;
    dc.unet_depth = 1;
    dc.base_channels = 8;
    return dc;
}

double mean_loss(const std::vector<TrainLogRecord>& hist, size_t from, size_t to) {
    double acc = 0.0;
    for (size_t i = from; i < to; ++i) acc += hist[i].loss_total;
    return acc / static_cast<double>(to - from);
}

}  // namespace

TEST(Training, SampleSnrFixed) {
    Rng rng(1);
    auto sched = SnrSchedule::fixed(13.0);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_snr(sched, rng), 13.0);
}

TEST(Training, SampleSnrSetFrequencies) {
    // each value frequency 1/6 +/- 1% over 1e6 draws
    Rng rng(7);
    const std::vector<double> set{0, 2, 4, 6, 8, 10};
    auto sched = SnrSchedule::from_set(set);
    std::map<double, int64_t> counts;
    const int64_t n = 1'000'000;
    for (int64_t i = 0; i < n; ++i) counts[sample_snr(sched, rng)]++;
    ASSERT_EQ(counts.size(), set.size());
    for (auto& [v, c] : counts)
        EXPECT_NEAR(static_cast<double>(c) / n, 1.0 / 6.0, 0.01) << "snr " << v;
}

TEST(Training, SampleSnrEmptySetRejected) {
    Rng rng(1);
    auto sched = SnrSchedule::from_set({});
    EXPECT_THROW(sample_snr(sched, rng), ConfigError);
}

TEST(Training, SampleSnrReproducible) {
    auto sched = SnrSchedule::from_set({0, 2, 4, 6, 8, 10});
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_snr(sched, a), sample_snr(sched, b));
}

TEST(Training, PolyDecay) {
    EXPECT_DOUBLE_EQ(poly_lr(1e-4, 0, 100, 0.9), 1e-4);
    EXPECT_NEAR(poly_lr(1e-4, 50, 100, 0.9), 1e-4 * std::pow(0.5, 0.9), 1e-15);
    EXPECT_NEAR(poly_lr(1e-4, 99, 100, 0.9), 1e-4 * std::pow(0.01, 0.9), 1e-15);
}

TEST(Training, AdamRefusesFrozenCollection) {
    ParamCollection col("net");
    col.add("p", Tensor({2}, {1.0, 2.0}));
    col.frozen = true;
    Adam opt;
    EXPECT_THROW(opt.step({&col}, 1e-3), RuntimeError);
}

TEST(Training, AdamDescendsQuadratic) {
    ParamCollection col("net");
    auto p = col.add("p", Tensor({2}, {3.0, -2.0}));
    Adam opt;
    for (int i = 0; i < 400; ++i) {
        col.zero_grad();
        ag::Value v = ag::leaf(*p);
        ag::Value loss = ag::dot(v, v);
        ag::backward(loss);
        opt.step({&col}, 0.05);
    }
    EXPECT_NEAR(p->value[0], 0.0, 1e-2);
    EXPECT_NEAR(p->value[1], 0.0, 1e-2);
}

TEST(Training, Phase1LossDecreasesAndIsDeterministic) {
    auto data = make_toy_images(24, 16, 5);
    ChannelConfig ch{.snr_db = 13.0, .signal_power = 1.0, .seed = 0};
    TrainConfig tc;
    tc.iterations = 120;
    tc.batch_size = 4;
    tc.learning_rate = 1e-3;
    tc.phase = 1;
    tc.snr_schedule = SnrSchedule::fixed(13.0);
    tc.seed = 11;

    auto codec1 = build_backbone(tiny_codec_cfg(), 3);
    auto hist1 = train_phase1(data, *codec1, ch, tc);
    ASSERT_EQ(hist1.size(), 120u);
    EXPECT_LT(mean_loss(hist1, 100, 120), mean_loss(hist1, 0, 20));
    for (auto& r : hist1) {
        EXPECT_EQ(r.snr_db, 13.0);
        EXPECT_EQ(r.phase, 1);
    }

    // bit-identical loss log for identical config + seed
    auto codec2 = build_backbone(tiny_codec_cfg(), 3);
    auto hist2 = train_phase1(data, *codec2, ch, tc);
    for (size_t i = 0; i < hist1.size(); ++i) {
        EXPECT_EQ(hist1[i].loss_total, hist2[i].loss_total);
        EXPECT_EQ(hist1[i].snr_db, hist2[i].snr_db);
    }
    EXPECT_EQ(codec1->encoder.params.hash(), codec2->encoder.params.hash());
}

TEST(Training, Phase2FreezesEncoderAndReducesLatentMse) {
    auto data = make_toy_images(24, 16, 6);
    auto held_out = make_toy_images(12, 16, 7);
    ChannelConfig ch{.snr_db = 13.0, .signal_power = 1.0, .seed = 0};
    auto codec = build_backbone(tiny_codec_cfg(), 3);

    TrainConfig tc1;
    tc1.iterations = 150;
    tc1.batch_size = 4;
    tc1.learning_rate = 1e-3;
    tc1.phase = 1;
    tc1.snr_schedule = SnrSchedule::fixed(13.0);
    tc1.seed = 11;
    train_phase1(data, *codec, ch, tc1);

    auto gr = build_residual_predictor(tiny_denoiser_cfg(), 4, 21);
    auto gs = build_similarity_predictor(4, 23, 8);

    TrainConfig tc2 = tc1;
    tc2.phase = 2;
    tc2.iterations = 800;
    tc2.snr_schedule = SnrSchedule::from_set({0, 2, 4, 6, 8, 10});

    const uint64_t enc_hash_before = codec->encoder.params.hash();
    auto hist = train_phase2(data, *codec, *gr, *gs, ch, tc2);
    EXPECT_EQ(codec->encoder.params.hash(), enc_hash_before);
    EXPECT_LT(hist.back().loss_total, hist.front().loss_total);

    // mean latent MSE after denoising < before, held-out data at 0 dB
    ChannelConfig ch0{.snr_db = 0.0, .signal_power = 1.0, .seed = 99};
    Rng noise_rng(ch0.seed);
    double before = 0.0, after = 0.0;
    for (const auto& img : held_out) {
        Latent y = codec->encode(img);
        ChannelRealization r = transmit_latent(y, ch0, noise_rng);
        before += loss_latent_mse(r.transmitted, r.received);
        auto den = denoise_adaptive(r.received, 0.0, *gr, *gs, gr->cfg, false);
        after += loss_latent_mse(r.transmitted, den.output);
    }
    EXPECT_LT(after, before);
}

TEST(Training, Phase3FreezesEncoderAndDenoiser) {
    auto data = make_toy_images(16, 16, 8);
    ChannelConfig ch{.snr_db = 13.0, .signal_power = 1.0, .seed = 0};
    auto codec = build_backbone(tiny_codec_cfg(), 3);

    TrainConfig tc1;
    tc1.iterations = 100;
    tc1.batch_size = 4;
    tc1.learning_rate = 1e-3;
    tc1.phase = 1;
    tc1.snr_schedule = SnrSchedule::fixed(13.0);
    tc1.seed = 11;
    train_phase1(data, *codec, ch, tc1);

    auto gr = build_residual_predictor(tiny_denoiser_cfg(), 4, 21);
    auto gs = build_similarity_predictor(4, 23, 8);
    TrainConfig tc2 = tc1;
    tc2.phase = 2;
    tc2.iterations = 120;
    tc2.snr_schedule = SnrSchedule::from_set({0, 2, 4, 6, 8, 10});
    train_phase2(data, *codec, *gr, *gs, ch, tc2);

    const uint64_t enc_h = codec->encoder.params.hash();
    const uint64_t gr_h = gr->params.hash();
    const uint64_t gs_h = gs->params.hash();
    const uint64_t dec_h = codec->decoder.params.hash();

    TrainConfig tc3 = tc2;
    tc3.phase = 3;
    tc3.iterations = 80;
    auto hist = train_phase3(data, *codec, *gr, *gs, ch, tc3);
    ASSERT_EQ(hist.size(), 80u);
    EXPECT_EQ(codec->encoder.params.hash(), enc_h);
    EXPECT_EQ(gr->params.hash(), gr_h);
    EXPECT_EQ(gs->params.hash(), gs_h);
    EXPECT_NE(codec->decoder.params.hash(), dec_h);  // decoder did move
}

TEST(Training, DivergenceAbortsWithStateDump) {
    auto data = make_toy_images(8, 16, 9);
    ChannelConfig ch{.snr_db = 13.0, .signal_power = 1.0, .seed = 0};
    auto codec = build_backbone(tiny_codec_cfg(), 3);
    // poison the decoder's output bias: NaN reaches the loss through the
    // sigmoid (an encoder-side NaN would be masked by downstream ReLUs)
    codec->decoder.conv_final.b->value[0] = std::numeric_limits<double>::quiet_NaN();

    TrainConfig tc;
    tc.iterations = 5;
    tc.batch_size = 2;
    tc.phase = 1;
    tc.snr_schedule = SnrSchedule::fixed(13.0);
    tc.seed = 1;
    TrainHooks hooks;
    const auto dump = std::filesystem::temp_directory_path() / "semdn_divergence_dump.json";
    std::filesystem::remove(dump);
    hooks.divergence_dump_path = dump.string();
    EXPECT_THROW(train_phase1(data, *codec, ch, tc, hooks), TrainingDiverged);
    EXPECT_TRUE(std::filesystem::exists(dump));
    EXPECT_GT(std::filesystem::file_size(dump), 0u);
    std::filesystem::remove(dump);
}

// gradients of the phase-2 objective flow through all earlier denoise steps
TEST(Training, UnrolledObjectiveGradientOracle) {
    DenoiserConfig dc;
    dc.t_max = 2;
    dc.unet_depth = 1;
    dc.base_channels = 4;
    auto gr = build_residual_predictor(dc, 2, 31);
    test::perturb_params(gr->params, 77);
    Rng rng(33);
    Tensor y({2, 4, 4}), z1({2, 4, 4});
    for (auto& v : y.data) v = rng.normal(0.0, 1.0);
    for (auto& v : z1.data) v = rng.normal(0.0, 1.0);

    auto fwd = [&] {
        using namespace ag;
        Value yv = constant(y);
        Value z = constant(z1);
        std::vector<Value> unrolled;
        double s = init_ss(1.0);
        for (int t = 0; t < dc.t_max; ++t) {
            Value r = gr->forward(z, constant_scalar(s));
            z = add(z, r);
            unrolled.push_back(z);
        }
        return loss_residual_predictor_v(yv, unrolled, 1.0);
    };
    EXPECT_LT(test::grad_check_max_rel(fwd, gr->params.params, 1e-4, 6), 1e-3);
}

TEST(Training, LogRecordsCarrySampledSnr) {
    auto data = make_toy_images(8, 16, 10);
    ChannelConfig ch{.snr_db = 0.0, .signal_power = 1.0, .seed = 0};
    auto codec = build_backbone(tiny_codec_cfg(), 3);
    auto gr = build_residual_predictor(tiny_denoiser_cfg(), 4, 21);
    auto gs = build_similarity_predictor(4, 23, 8);
    TrainConfig tc;
    tc.iterations = 40;
    tc.batch_size = 2;
    tc.phase = 2;
    tc.learning_rate = 1e-3;
    tc.snr_schedule = SnrSchedule::from_set({0, 2, 4, 6, 8, 10});
    tc.seed = 3;
    int callback_count = 0;
    TrainHooks hooks;
    hooks.on_log = [&](const TrainLogRecord& r) {
        ++callback_count;
        EXPECT_EQ(r.phase, 2);
        EXPECT_TRUE(r.snr_db == 0 || r.snr_db == 2 || r.snr_db == 4 || r.snr_db == 6 ||
                    r.snr_db == 8 || r.snr_db == 10);
    };
    auto hist = train_phase2(data, *codec, *gr, *gs, ch, tc, hooks);
    EXPECT_EQ(callback_count, 40);
    // sampled SNRs vary across the run
    bool varied = false;
    for (auto& r : hist) varied = varied || r.snr_db != hist.front().snr_db;
    EXPECT_TRUE(varied);
}
