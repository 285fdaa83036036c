#pragma once

#include <memory>
#include <string>
#include <vector>

#include "semdn/channel.hpp"
#include "semdn/nn.hpp"

namespace semdn {

// RGB image in [0,1], stored {3,H,W}.
struct ImageTensor {
    Tensor t;

    ImageTensor() = default;
    explicit ImageTensor(Tensor tt) : t(std::move(tt)) {
        if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("ImageTensor: expected {3,H,W}");
        if (!t.all_finite()) throw ValueError("ImageTensor: non-finite pixels");
        if (t.min() < 0.0 || t.max() > 1.0) throw ValueError("ImageTensor: pixels outside [0,1]");
    }

    int height() const { return t.dim(1); }
    int width() const { return t.dim(2); }
    int64_t k() const { return t.numel(); }  // H*W*3
};

enum class BackboneKind { Convolutional, WindowedAttention };

inline std::string to_string(BackboneKind k) {
    return k == BackboneKind::Convolutional ? "convolutional" : "windowed-attention";
}

inline BackboneKind backbone_from_string(const std::string& s) {
    if (s == "convolutional") return BackboneKind::Convolutional;
    if (s == "windowed-attention") return BackboneKind::WindowedAttention;
    throw ConfigError("unknown backbone kind: " + s);
}

struct CodecConfig {
    int stages_m = 3;                              // M merging stages
    std::vector<int> blocks_per_stage = {2, 2, 6, 2};  // N_1..N_{M+1}
    std::vector<int> embed_dims = {24, 48, 96, 192};   // per-stage widths
    int window_size = 4;
    int head_filters = 6;  // C_out, sets the bandwidth
    BackboneKind backbone_kind = BackboneKind::Convolutional;
    int patch_size = 2;
    // optional exact bandwidth-ratio target rho = n/k (0/0 = unconstrained)
    int64_t rho_num = 0;
    int64_t rho_den = 0;

    int total_downsample() const { return patch_size << stages_m; }

    void validate() const {
        if (stages_m < 1) throw ConfigError("CodecConfig: at least one merging stage required (M >= 1)");
        if (static_cast<int>(blocks_per_stage.size()) != stages_m + 1)
            throw ConfigError("CodecConfig: blocks_per_stage must have M+1 entries");
        if (static_cast<int>(embed_dims.size()) != stages_m + 1)
            throw ConfigError("CodecConfig: embed_dims must have M+1 entries");
        for (int n : blocks_per_stage)
            if (n < 1) throw ConfigError("CodecConfig: every N_i must be >= 1");
        for (int d : embed_dims)
            if (d < 1) throw ConfigError("CodecConfig: embed dims must be positive");
        if (head_filters < 1) throw ConfigError("CodecConfig: head_filters must be >= 1");
        if (patch_size < 1) throw ConfigError("CodecConfig: patch size must be >= 1");
        if (patch_size != 1 && patch_size % 2 != 0)
            throw ConfigError("CodecConfig: patch size must be 1 or even");
        if (window_size < 1) throw ConfigError("CodecConfig: window size must be >= 1");
        if ((rho_num == 0) != (rho_den == 0))
            throw ConfigError("CodecConfig: rho target needs both numerator and denominator");
    }

    // {C_out, H/D, W/D}; errors if geometry or the rho target are incompatible
    std::vector<int> latent_shape(int h, int w) const {
        const int d = total_downsample();
        if (h % d != 0 || w % d != 0)
            throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                             " not divisible by total downsampling factor " + std::to_string(d));
        const std::vector<int> shape{head_filters, h / d, w / d};
        if (rho_num != 0) {
            const int64_t len2n = static_cast<int64_t>(head_filters) * (h / d) * (w / d);
            if (len2n % 2 != 0) throw ConfigError("CodecConfig: latent length 2n must be even");
            const int64_t n = len2n / 2;
            const int64_t k = static_cast<int64_t>(h) * w * 3;
            // exact rational equality n/k == rho_num/rho_den
            if (n * rho_den != k * rho_num)
                throw ConfigError("CodecConfig: achieved rho " + std::to_string(n) + "/" +
                                  std::to_string(k) + " does not match target " +
                                  std::to_string(rho_num) + "/" + std::to_string(rho_den));
        }
        return shape;
    }
};

namespace backbone {

// conv + group norm + ReLU pair with a residual connection
struct ResBlock {
    Conv2d c1, c2;
    GroupNorm g1, g2;

    ResBlock() = default;
    ResBlock(ParamCollection& pc, const std::string& name, int channels, Rng& rng)
        : c1(pc, name + ".c1", channels, channels, 3, 1, 1, rng),
          c2(pc, name + ".c2", channels, channels, 3, 1, 1, rng),
          g1(pc, name + ".g1", channels),
          g2(pc, name + ".g2", channels) {}

    ag::Value operator()(ag::Value x) const {
        ag::Value h = ag::relu(g1(c1(x)));
        h = g2(c2(h));
        return ag::relu(ag::add(x, h));
    }
};

inline int pick_heads(int channels) {
    for (int h : {4, 2, 1})
        if (channels % h == 0) return h;
    return 1;
}

// plain windowed multi-head self-attention block (no shifted windows)
struct SwinBlock {
    LayerNorm ln1, ln2;
    Linear qkv, proj, fc1, fc2;
    int channels = 0, heads = 1;

    SwinBlock() = default;
    SwinBlock(ParamCollection& pc, const std::string& name, int channels_, Rng& rng)
        : ln1(pc, name + ".ln1", channels_),
          ln2(pc, name + ".ln2", channels_),
          qkv(pc, name + ".qkv", channels_, 3 * channels_, rng),
          proj(pc, name + ".proj", channels_, channels_, rng),
          fc1(pc, name + ".fc1", channels_, 2 * channels_, rng),
          fc2(pc, name + ".fc2", 2 * channels_, channels_, rng),
          channels(channels_),
          heads(pick_heads(channels_)) {}

    // tok: {Ntok, C} with windows as contiguous row blocks of win*win tokens
    ag::Value operator()(ag::Value tok, int tokens_per_window) const {
        using namespace ag;
        const int ntok = tok.val().dim(0);
        const int nwin = ntok / tokens_per_window;
        Value t1 = ln1(tok);
        std::vector<Value> outs;
        outs.reserve(static_cast<size_t>(nwin));
        const int dh = channels / heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int wi = 0; wi < nwin; ++wi) {
            Value win = slice_rows(t1, wi * tokens_per_window, (wi + 1) * tokens_per_window);
            Value qkv_all = qkv(win);  // {T, 3C}
            std::vector<Value> head_outs;
            head_outs.reserve(static_cast<size_t>(heads));
            for (int hd = 0; hd < heads; ++hd) {
                Value q = slice_cols(qkv_all, hd * dh, (hd + 1) * dh);
                Value k = slice_cols(qkv_all, channels + hd * dh, channels + (hd + 1) * dh);
                Value v = slice_cols(qkv_all, 2 * channels + hd * dh, 2 * channels + (hd + 1) * dh);
                Value scores = scale(matmul(q, transpose(k)), inv_sqrt_dh);
                Value attn = softmax_rows(scores);
                head_outs.push_back(matmul(attn, v));
            }
            outs.push_back(proj(concat_cols(head_outs)));
        }
        tok = add(tok, concat_rows(outs));
        Value m = fc2(gelu(fc1(ln2(tok))));
        return add(tok, m);
    }
};

struct ConvStage {
    Conv2d down;  // strided conv entering the stage
    std::vector<ResBlock> blocks;
};

struct AttnStage {
    bool has_merge = false;
    Conv2d merge_reduce;  // 1x1 conv after space_to_depth (patch merging)
    std::vector<SwinBlock> blocks;
    int channels = 0;
};

}  // namespace backbone

// JSCC encoder f_e: image {3,H,W} -> latent {C_out, H/D, W/D}
struct JsccEncoder {
    CodecConfig cfg;
    ParamCollection params{"encoder"};

    // convolutional variant
    std::vector<backbone::ConvStage> conv_stages;
    Conv2d conv_head;

    // windowed-attention variant
    Conv2d patch_embed;
    std::vector<backbone::AttnStage> attn_stages;
    Conv2d attn_head;

    ag::Value forward(ag::Value x) const {
        using namespace ag;
        if (cfg.backbone_kind == BackboneKind::Convolutional) {
            for (const auto& st : conv_stages) {
                x = relu(st.down(x));
                for (const auto& b : st.blocks) x = b(x);
            }
            return conv_head(x);
        }
        x = patch_embed(x);
        for (const auto& st : attn_stages) {
            if (st.has_merge) x = st.merge_reduce(space_to_depth(x, 2));
            const int h = x.val().dim(1), w = x.val().dim(2);
            const int win = std::min({cfg.window_size, h, w});
            if (h % win != 0 || w % win != 0)
                throw ShapeError("attention stage: spatial " + std::to_string(h) + "x" +
                                 std::to_string(w) + " not divisible by window " + std::to_string(win));
            Value tok = window_partition(x, win);
            for (const auto& b : st.blocks) tok = b(tok, win * win);
            x = window_merge(tok, st.channels, h, w, win);
        }
        return attn_head(x);
    }
};

// JSCC decoder f_d: latent {C_out,h,w} -> image {3, h*D, w*D} via sigmoid
struct JsccDecoder {
    CodecConfig cfg;
    ParamCollection params{"decoder"};

    Conv2d conv_stem;
    std::vector<backbone::ResBlock> conv_stem_blocks;
    struct UpStage {
        ConvTranspose2d up;
        std::vector<backbone::ResBlock> blocks;
    };
    std::vector<UpStage> conv_up_stages;
    ConvTranspose2d conv_final;
    Conv2d conv_final1x1;  // used when patch_size == 1

    Conv2d attn_stem;
    std::vector<backbone::AttnStage> attn_stages;  // reverse merging stages
    struct AttnUp {
        Conv2d expand;  // 1x1 conv to 4*C_prev before depth_to_space
    };
    std::vector<AttnUp> attn_ups;
    ConvTranspose2d attn_final;

    ag::Value forward(ag::Value z) const {
        using namespace ag;
        if (cfg.backbone_kind == BackboneKind::Convolutional) {
            Value x = relu(conv_stem(z));
            for (const auto& b : conv_stem_blocks) x = b(x);
            for (const auto& st : conv_up_stages) {
                x = relu(st.up(x));
                for (const auto& b : st.blocks) x = b(x);
            }
            Value y = cfg.patch_size == 1 ? conv_final1x1(x) : conv_final(x);
            return sigmoid(y);
        }
        Value x = attn_stem(z);
        for (size_t si = 0; si < attn_stages.size(); ++si) {
            const auto& st = attn_stages[si];
            const int h = x.val().dim(1), w = x.val().dim(2);
            const int win = std::min({cfg.window_size, h, w});
            if (h % win != 0 || w % win != 0)
                throw ShapeError("attention stage: spatial not divisible by window");
            Value tok = window_partition(x, win);
            for (const auto& b : st.blocks) tok = b(tok, win * win);
            x = window_merge(tok, st.channels, h, w, win);
            if (si + 1 < attn_stages.size()) x = depth_to_space(attn_ups[si].expand(x), 2);
        }
        return sigmoid(attn_final(x));
    }
};

// Encoder/decoder pair with its configuration. Parameters are owned by the
// two collections; the model is non-copyable so collection pointers inside
// Param stay valid.
struct CodecModel {
    CodecConfig cfg;
    JsccEncoder encoder;
    JsccDecoder decoder;

    CodecModel() = default;
    CodecModel(const CodecModel&) = delete;
    CodecModel& operator=(const CodecModel&) = delete;

    ag::Value encode_v(ag::Value img) const { return encoder.forward(img); }
    ag::Value decode_v(ag::Value latent) const { return decoder.forward(latent); }

    Latent encode(const ImageTensor& img) const {
        const auto expect = cfg.latent_shape(img.height(), img.width());
        ag::NoGradGuard ng;
        ag::Value out = encoder.forward(ag::constant(img.t));
        if (!out.val().all_finite()) throw RuntimeError("encode: non-finite activations");
        if (out.val().shape != expect) throw RuntimeError("encode: unexpected latent shape");
        return Latent(out.val());
    }

    ImageTensor decode(const Latent& z) const {
        if (z.t.dim(0) != cfg.head_filters)
            throw ShapeError("decode: latent channels " + std::to_string(z.t.dim(0)) +
                             " do not match head_filters " + std::to_string(cfg.head_filters));
        ag::NoGradGuard ng;
        ag::Value out = decoder.forward(ag::constant(z.t));
        if (!out.val().all_finite()) throw RuntimeError("decode: non-finite activations");
        return ImageTensor(out.val());
    }

    std::string describe() const {
        std::ostringstream os;
        os << "backbone=" << to_string(cfg.backbone_kind) << " M=" << cfg.stages_m
           << " encoder_params=" << encoder.params.param_count()
           << " decoder_params=" << decoder.params.param_count();
        return os.str();
    }
};

// Builds both parameter collections for the configured backbone. Encoder
// stage i halves the spatial resolution relative to stage i-1 (after the
// patch-embedding stage); the decoder mirrors with upsampling.
inline std::unique_ptr<CodecModel> build_backbone(const CodecConfig& cfg, uint64_t seed) {
    cfg.validate();
    auto model = std::make_unique<CodecModel>();
    model->cfg = cfg;
    model->encoder.cfg = cfg;
    model->decoder.cfg = cfg;
    Rng erng(derive_seed(seed, "encoder_init"));
    Rng drng(derive_seed(seed, "decoder_init"));

    const auto& dims = cfg.embed_dims;
    const int m = cfg.stages_m;

    if (cfg.backbone_kind == BackboneKind::Convolutional) {
        auto& enc = model->encoder;
        for (int i = 0; i <= m; ++i) {
            backbone::ConvStage st;
            const int cin = i == 0 ? 3 : dims[i - 1];
            const int stride = i == 0 ? cfg.patch_size : 2;
            // odd kernel with pad k/2 maps H -> H/stride exactly when stride | H
            const int k = 2 * ((stride + 1) / 2) + 1;
            st.down = Conv2d(enc.params, "enc.s" + std::to_string(i) + ".down", cin, dims[i], k,
                             stride, k / 2, erng);
            for (int bidx = 0; bidx < cfg.blocks_per_stage[i]; ++bidx)
                st.blocks.emplace_back(enc.params,
                                       "enc.s" + std::to_string(i) + ".b" + std::to_string(bidx),
                                       dims[i], erng);
            enc.conv_stages.push_back(std::move(st));
        }
        enc.conv_head = Conv2d(enc.params, "enc.head", dims[m], cfg.head_filters, 1, 1, 0, erng);

        auto& dec = model->decoder;
        dec.conv_stem = Conv2d(dec.params, "dec.stem", cfg.head_filters, dims[m], 1, 1, 0, drng);
        for (int bidx = 0; bidx < cfg.blocks_per_stage[m]; ++bidx)
            dec.conv_stem_blocks.emplace_back(dec.params, "dec.sM.b" + std::to_string(bidx), dims[m],
                                              drng);
        for (int i = m; i >= 1; --i) {
            JsccDecoder::UpStage st;
            st.up = ConvTranspose2d(dec.params, "dec.s" + std::to_string(i) + ".up", dims[i],
                                    dims[i - 1], 4, 2, 1, drng);
            for (int bidx = 0; bidx < cfg.blocks_per_stage[i - 1]; ++bidx)
                st.blocks.emplace_back(dec.params,
                                       "dec.s" + std::to_string(i - 1) + ".b" + std::to_string(bidx),
                                       dims[i - 1], drng);
            dec.conv_up_stages.push_back(std::move(st));
        }
        if (cfg.patch_size == 1) {
            dec.conv_final1x1 = Conv2d(dec.params, "dec.final", dims[0], 3, 3, 1, 1, drng);
        } else {
            dec.conv_final = ConvTranspose2d(dec.params, "dec.final", dims[0], 3,
                                             2 * cfg.patch_size, cfg.patch_size,
                                             cfg.patch_size / 2, drng);
        }
        return model;
    }

    // windowed-attention backbone
    auto& enc = model->encoder;
    enc.patch_embed = Conv2d(enc.params, "enc.patch_embed", 3, dims[0], cfg.patch_size,
                             cfg.patch_size, 0, erng);
    for (int i = 0; i <= m; ++i) {
        backbone::AttnStage st;
        st.channels = dims[i];
        if (i > 0) {
            st.has_merge = true;
            st.merge_reduce = Conv2d(enc.params, "enc.s" + std::to_string(i) + ".merge",
                                     4 * dims[i - 1], dims[i], 1, 1, 0, erng);
        }
        for (int bidx = 0; bidx < cfg.blocks_per_stage[i]; ++bidx)
            st.blocks.emplace_back(enc.params,
                                   "enc.s" + std::to_string(i) + ".b" + std::to_string(bidx),
                                   dims[i], erng);
        enc.attn_stages.push_back(std::move(st));
    }
    enc.attn_head = Conv2d(enc.params, "enc.head", dims[m], cfg.head_filters, 1, 1, 0, erng);

    auto& dec = model->decoder;
    dec.attn_stem = Conv2d(dec.params, "dec.stem", cfg.head_filters, dims[m], 1, 1, 0, drng);
    for (int i = m; i >= 0; --i) {
        backbone::AttnStage st;
        st.channels = dims[i];
        for (int bidx = 0; bidx < cfg.blocks_per_stage[i]; ++bidx)
            st.blocks.emplace_back(dec.params,
                                   "dec.s" + std::to_string(i) + ".b" + std::to_string(bidx),
                                   dims[i], drng);
        dec.attn_stages.push_back(std::move(st));
        if (i >= 1) {
            JsccDecoder::AttnUp up;
            up.expand = Conv2d(dec.params, "dec.s" + std::to_string(i) + ".expand", dims[i],
                               4 * dims[i - 1], 1, 1, 0, drng);
            dec.attn_ups.push_back(std::move(up));
        }
    }
    dec.attn_final = ConvTranspose2d(dec.params, "dec.final", dims[0], 3, cfg.patch_size,
                                     cfg.patch_size, 0, drng);
    return model;
}

}  // namespace semdn
