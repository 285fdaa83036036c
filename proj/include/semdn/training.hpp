#pragma once

#include <fstream>
#include <functional>
#include <optional>

#include "semdn/denoiser.hpp"
#include "semdn/jscc.hpp"
#include "semdn/losses.hpp"
#include "semdn/optim.hpp"

namespace semdn {

class TrainingDiverged : public RuntimeError {
public:
    using RuntimeError::RuntimeError;
};

struct SnrSchedule {
    enum class Kind { Fixed, Set };
    Kind kind = Kind::Fixed;
    double fixed_db = 13.0;
    std::vector<double> set_db;

    static SnrSchedule fixed(double db) {
        SnrSchedule s;
        s.kind = Kind::Fixed;
        s.fixed_db = db;
        return s;
    }
    static SnrSchedule from_set(std::vector<double> dbs) {
        SnrSchedule s;
        s.kind = Kind::Set;
        s.set_db = std::move(dbs);
        return s;
    }
};

// fixed value, or a uniform draw from the discrete set
inline double sample_snr(const SnrSchedule& schedule, Rng& rng) {
    if (schedule.kind == SnrSchedule::Kind::Fixed) return schedule.fixed_db;
    if (schedule.set_db.empty()) throw ConfigError("sample_snr: empty SNR set");
    return schedule.set_db[rng.uniform_int(schedule.set_db.size())];
}

struct TrainConfig {
    double alpha = 1.0;  // SS-loss weight in the residual-predictor objective
    double learning_rate = 1e-4;
    double poly_exponent = 0.9;
    int iterations = 1000;
    int batch_size = 8;
    int phase = 1;
    SnrSchedule snr_schedule;
    uint64_t seed = 0;

    void validate() const {
        if (alpha < 0.0) throw ConfigError("TrainConfig: alpha must be >= 0");
        if (iterations <= 0) throw ConfigError("TrainConfig: iterations must be positive");
        if (batch_size <= 0) throw ConfigError("TrainConfig: batch size must be positive");
        if (phase < 1 || phase > 3) throw ConfigError("TrainConfig: phase must be 1, 2 or 3");
        if (learning_rate <= 0.0) throw ConfigError("TrainConfig: learning rate must be positive");
    }
};

struct TrainLogRecord {
    int64_t iteration = 0;
    int phase = 0;
    double loss_total = 0.0;
    double loss_latent_mse = 0.0;
    double loss_ss = 0.0;
    double loss_sim = 0.0;
    double lr = 0.0;
    double snr_db = 0.0;
};

struct TrainHooks {
    std::function<void(const TrainLogRecord&)> on_log;
    std::string divergence_dump_path;  // where to write a state dump on NaN loss
};

namespace detail {

inline void dump_divergence_state(const std::string& path, int phase, int64_t iteration,
                                  double loss,
                                  const std::vector<const ParamCollection*>& collections) {
    if (path.empty()) return;
    std::ofstream os(path);
    os << "{\"phase\":" << phase << ",\"iteration\":" << iteration << ",\"loss\":\"" << loss
       << "\",\"collections\":[";
    for (size_t i = 0; i < collections.size(); ++i) {
        const auto* c = collections[i];
        double norm2 = 0.0;
        bool finite = true;
        for (const auto& p : c->params) {
            for (double v : p->value.data) {
                norm2 += v * v;
                finite = finite && std::isfinite(v);
            }
        }
        os << (i ? "," : "") << "{\"name\":\"" << c->name << "\",\"l2\":\"" << std::sqrt(norm2)
           << "\",\"finite\":" << (finite ? "true" : "false") << ",\"hash\":" << c->hash() << "}";
    }
    os << "]}\n";
}

inline void check_divergence(double loss, int phase, int64_t iteration,
                             const std::vector<const ParamCollection*>& collections,
                             const TrainHooks& hooks) {
    if (std::isfinite(loss)) return;
    dump_divergence_state(hooks.divergence_dump_path, phase, iteration, loss, collections);
    throw TrainingDiverged("phase " + std::to_string(phase) + " diverged at iteration " +
                           std::to_string(iteration));
}

// latent noise matching the complex-symbol channel draw exactly
inline Tensor draw_noise_tensor(const std::vector<int>& shape, double sigma2, Rng& rng) {
    Tensor noise(shape);
    auto cplx = draw_awgn_noise(noise.numel() / 2, sigma2, rng);
    for (int64_t i = 0; i < noise.numel() / 2; ++i) {
        noise[2 * i] = cplx[static_cast<size_t>(i)].real();
        noise[2 * i + 1] = cplx[static_cast<size_t>(i)].imag();
    }
    return noise;
}

}  // namespace detail

// Phase 1: joint end-to-end training of encoder and decoder through the
// physical channel at a fixed SNR schedule.
inline std::vector<TrainLogRecord> train_phase1(const std::vector<ImageTensor>& data,
                                                CodecModel& codec, const ChannelConfig& ch,
                                                const TrainConfig& tc,
                                                const TrainHooks& hooks = {}) {
    tc.validate();
    if (data.empty()) throw ValueError("train_phase1: empty dataset");
    codec.encoder.params.frozen = false;
    codec.decoder.params.frozen = false;

    Rng sample_rng(derive_seed(tc.seed, "phase1/sample"));
    Rng chan_rng(derive_seed(tc.seed, "phase1/channel"));
    Rng snr_rng(derive_seed(tc.seed, "phase1/snr"));
    Adam opt;
    std::vector<TrainLogRecord> history;
    history.reserve(static_cast<size_t>(tc.iterations));

    for (int64_t it = 0; it < tc.iterations; ++it) {
        const double lr = poly_lr(tc.learning_rate, it, tc.iterations, tc.poly_exponent);
        const double snr_db = sample_snr(tc.snr_schedule, snr_rng);
        const double sigma2 = ch.signal_power / snr_db_to_linear(snr_db);
        codec.encoder.params.zero_grad();
        codec.decoder.params.zero_grad();

        double loss_acc = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            const auto& img = data[sample_rng.uniform_int(data.size())];
            ag::Value x = ag::constant(img.t);
            ag::Value y = codec.encode_v(x);
            ag::Value y_norm = ag::power_normalize_v(y, ch.signal_power);
            Tensor noise = detail::draw_noise_tensor(y_norm.val().shape, sigma2, chan_rng);
            ag::Value z = ag::add(y_norm, ag::constant(std::move(noise)));
            ag::Value xhat = codec.decode_v(z);
            ag::Value loss = ag::loss_end_to_end_v(x, xhat);
            ag::backward(loss, 1.0 / tc.batch_size);
            loss_acc += loss.scalar();
        }
        const double loss_mean = loss_acc / tc.batch_size;
        detail::check_divergence(loss_mean, 1, it,
                                 {&codec.encoder.params, &codec.decoder.params}, hooks);
        opt.step({&codec.encoder.params, &codec.decoder.params}, lr);

        TrainLogRecord rec{it, 1, loss_mean, 0.0, 0.0, 0.0, lr, snr_db};
        if (hooks.on_log) hooks.on_log(rec);
        history.push_back(rec);
    }
    return history;
}

// Phase 2: freeze the JSCC encoder, insert the latent denoiser, and train
// g_r on the combined latent MSE + SS objective and g_s on the similarity
// prediction loss. The denoiser is always unrolled for the full T_max steps;
// the adaptive stop rule is inference-only. The two objectives are kept
// separate with stop-gradients: the conditioning score fed to g_r is a plain
// number, and g_s sees detached latents.
inline std::vector<TrainLogRecord> train_phase2(const std::vector<ImageTensor>& data,
                                                CodecModel& codec, ResidualPredictor& gr,
                                                SimilarityPredictor& gs, const ChannelConfig& ch,
                                                const TrainConfig& tc,
                                                const TrainHooks& hooks = {}) {
    tc.validate();
    if (data.empty()) throw ValueError("train_phase2: empty dataset");
    codec.encoder.params.frozen = true;
    codec.decoder.params.frozen = true;
    gr.params.frozen = false;
    gs.params.frozen = false;
    const uint64_t enc_hash = codec.encoder.params.hash();

    // frozen encoder: cache the power-normalized transmitted latents once
    std::vector<Tensor> y_refs;
    y_refs.reserve(data.size());
    for (const auto& img : data) {
        Latent y = codec.encode(img);
        y_refs.push_back(
            unpack_real(power_normalize(pack_complex(y), ch.signal_power), y.spatial_shape()).t);
    }

    Rng sample_rng(derive_seed(tc.seed, "phase2/sample"));
    Rng chan_rng(derive_seed(tc.seed, "phase2/channel"));
    Rng snr_rng(derive_seed(tc.seed, "phase2/snr"));
    Adam opt;
    std::vector<TrainLogRecord> history;
    const int t_max = gr.cfg.t_max;

    for (int64_t it = 0; it < tc.iterations; ++it) {
        const double lr = poly_lr(tc.learning_rate, it, tc.iterations, tc.poly_exponent);
        const double snr_db = sample_snr(tc.snr_schedule, snr_rng);  // one draw per batch
        const double eta = snr_db_to_linear(snr_db);
        const double sigma2 = ch.signal_power / eta;
        const double s1 = init_ss(eta);
        gr.params.zero_grad();
        gs.params.zero_grad();

        double lr_acc = 0.0, ls_acc = 0.0, mse_acc = 0.0, ss_acc = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            const Tensor& y_ref = y_refs[sample_rng.uniform_int(y_refs.size())];
            Tensor z1 = y_ref;
            Tensor noise = detail::draw_noise_tensor(y_ref.shape, sigma2, chan_rng);
            for (int64_t i = 0; i < z1.numel(); ++i) z1[i] += noise[i];

            ag::Value yv = ag::constant(y_ref);
            ag::Value z = ag::constant(std::move(z1));
            double s = s1;
            std::vector<ag::Value> unrolled;
            unrolled.reserve(static_cast<size_t>(t_max));
            ag::Value sim_loss = ag::constant_scalar(0.0);
            for (int t = 0; t < t_max; ++t) {
                ag::Value r = gr.forward(z, ag::constant_scalar(s));
                ag::Value z_next = ag::add(z, r);
                unrolled.push_back(z_next);
                // similarity branch on detached copies
                ag::Value s_pred = gs.forward(ag::constant_scalar(s), ag::detach(z),
                                              ag::detach(z_next));
                sim_loss = ag::add(sim_loss,
                                   ag::loss_similarity_predictor_v(s_pred, yv, ag::detach(z_next)));
                s = s_pred.scalar();  // conditioning is a plain number: stop-gradient
                z = z_next;
            }
            ag::Value residual_loss = ag::loss_residual_predictor_v(yv, unrolled, tc.alpha);
            ag::Value sim_loss_mean = ag::scale(sim_loss, 1.0 / t_max);
            ag::backward(residual_loss, 1.0 / tc.batch_size);
            ag::backward(sim_loss_mean, 1.0 / tc.batch_size);

            lr_acc += residual_loss.scalar();
            ls_acc += sim_loss_mean.scalar();
            mse_acc += loss_latent_mse(Latent(y_ref), Latent(unrolled.back().val()));
            ss_acc += loss_ss(Latent(y_ref), Latent(unrolled.back().val()));
        }
        const double loss_mean = (lr_acc + ls_acc) / tc.batch_size;
        detail::check_divergence(loss_mean, 2, it, {&gr.params, &gs.params}, hooks);
        opt.step({&gr.params, &gs.params}, lr);

        TrainLogRecord rec{it,
                           2,
                           loss_mean,
                           mse_acc / tc.batch_size,
                           ss_acc / tc.batch_size,
                           ls_acc / tc.batch_size,
                           lr,
                           snr_db};
        if (hooks.on_log) hooks.on_log(rec);
        history.push_back(rec);
    }

    if (codec.encoder.params.hash() != enc_hash)
        throw RuntimeError("train_phase2: frozen encoder parameters changed");
    return history;
}

// Phase 3: freeze encoder and denoiser, finetune only the decoder through the
// full pipeline (encode -> channel -> adaptive denoise -> decode).
inline std::vector<TrainLogRecord> train_phase3(const std::vector<ImageTensor>& data,
                                                CodecModel& codec, ResidualPredictor& gr,
                                                SimilarityPredictor& gs, const ChannelConfig& ch,
                                                const TrainConfig& tc,
                                                const TrainHooks& hooks = {}) {
    tc.validate();
    if (data.empty()) throw ValueError("train_phase3: empty dataset");
    codec.encoder.params.frozen = true;
    gr.params.frozen = true;
    gs.params.frozen = true;
    codec.decoder.params.frozen = false;
    const uint64_t enc_hash = codec.encoder.params.hash();
    const uint64_t gr_hash = gr.params.hash();
    const uint64_t gs_hash = gs.params.hash();

    std::vector<Tensor> y_refs;
    y_refs.reserve(data.size());
    for (const auto& img : data) {
        Latent y = codec.encode(img);
        y_refs.push_back(
            unpack_real(power_normalize(pack_complex(y), ch.signal_power), y.spatial_shape()).t);
    }

    Rng sample_rng(derive_seed(tc.seed, "phase3/sample"));
    Rng chan_rng(derive_seed(tc.seed, "phase3/channel"));
    Rng snr_rng(derive_seed(tc.seed, "phase3/snr"));
    Adam opt;
    std::vector<TrainLogRecord> history;

    for (int64_t it = 0; it < tc.iterations; ++it) {
        const double lr = poly_lr(tc.learning_rate, it, tc.iterations, tc.poly_exponent);
        const double snr_db = sample_snr(tc.snr_schedule, snr_rng);
        const double sigma2 = ch.signal_power / snr_db_to_linear(snr_db);
        codec.decoder.params.zero_grad();

        double loss_acc = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            const uint64_t idx = sample_rng.uniform_int(data.size());
            const auto& img = data[idx];
            const Tensor& y_ref = y_refs[idx];
            Tensor z1 = y_ref;
            Tensor noise = detail::draw_noise_tensor(y_ref.shape, sigma2, chan_rng);
            for (int64_t i = 0; i < z1.numel(); ++i) z1[i] += noise[i];

            DenoiseResult den =
                denoise_adaptive(Latent(std::move(z1)), snr_db, gr, gs, gr.cfg, false);
            ag::Value xhat = codec.decode_v(ag::constant(den.output.t));
            ag::Value loss = ag::loss_end_to_end_v(ag::constant(img.t), xhat);
            ag::backward(loss, 1.0 / tc.batch_size);
            loss_acc += loss.scalar();
        }
        const double loss_mean = loss_acc / tc.batch_size;
        detail::check_divergence(loss_mean, 3, it, {&codec.decoder.params}, hooks);
        opt.step({&codec.decoder.params}, lr);

        TrainLogRecord rec{it, 3, loss_mean, 0.0, 0.0, 0.0, lr, snr_db};
        if (hooks.on_log) hooks.on_log(rec);
        history.push_back(rec);
    }

    if (codec.encoder.params.hash() != enc_hash)
        throw RuntimeError("train_phase3: frozen encoder parameters changed");
    if (gr.params.hash() != gr_hash || gs.params.hash() != gs_hash)
        throw RuntimeError("train_phase3: frozen denoiser parameters changed");
    return history;
}

}  // namespace semdn
