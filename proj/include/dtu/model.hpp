#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtu/dual_attention.hpp"
#include "dtu/nn.hpp"
#include "dtu/ops.hpp"

namespace dtu {

// Every architecture hyperparameter. Defaults reproduce the full-scale
// network: four stem stages to a 1/16 grid, ViT-Base transformer, dual
// attention before the transformer and in all three skip connections.
struct ModelConfig {
    int64_t in_channels = 3;
    int64_t num_classes = 9;
    int64_t input_size = 224;
    std::array<int64_t, 4> stem_channels{64, 256, 512, 1024};
    int64_t transformer_hidden = 768;
    int64_t transformer_layers = 12;
    int64_t transformer_heads = 12;
    int64_t mlp_dim = 3072;
    int64_t da_reduction = 16;
    int64_t pam_qk_reduction = 8;
    bool enable_encoder_da = true;
    std::array<bool, 3> enable_skip_da{true, true, true};
    std::array<int64_t, 3> decoder_channels{256, 128, 64};
    int64_t neck_channels = 512;
    double dropout = 0.1;
    uint64_t seed = 42;

    int64_t token_grid() const { return input_size / 16; }
    int64_t n_tokens() const { return token_grid() * token_grid(); }

    void validate() const {
        if (input_size < 16 || input_size % 16 != 0) {
            throw ConfigError("input_size must be a positive multiple of 16, got " +
                              std::to_string(input_size));
        }
        if (transformer_heads < 1 || transformer_hidden % transformer_heads != 0) {
            throw ConfigError("transformer_hidden (" + std::to_string(transformer_hidden) +
                              ") must be divisible by transformer_heads (" +
                              std::to_string(transformer_heads) + ")");
        }
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        for (int64_t c : stem_channels)
            if (c < 1) throw ConfigError("stem_channels entries must be >= 1");
        for (int64_t c : decoder_channels)
            if (c < 1) throw ConfigError("decoder_channels entries must be >= 1");
        if (neck_channels < 1) throw ConfigError("neck_channels must be >= 1");
        if (transformer_layers < 0) throw ConfigError("transformer_layers must be >= 0");
        if (da_reduction < 1 || pam_qk_reduction < 1)
            throw ConfigError("reduction ratios must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    }

    // Small configuration for tests and CPU-scale runs.
    static ModelConfig toy(int64_t size = 64, int64_t hidden = 32, int64_t layers = 2,
                           int64_t classes = 1) {
        ModelConfig c;
        c.input_size = size;
        c.num_classes = classes;
        c.stem_channels = {8, 16, 32, 64};
        c.transformer_hidden = hidden;
        c.transformer_layers = layers;
        c.transformer_heads = hidden % 4 == 0 ? 4 : 1;
        c.mlp_dim = hidden * 2;
        c.decoder_channels = {24, 16, 8};
        c.neck_channels = 32;
        c.dropout = 0.0;
        return c;
    }
};

// Records intermediate shapes during a forward pass for pipeline checks.
struct ShapeTrace {
    std::vector<std::pair<std::string, Shape>> stages;
    void record(const std::string& name, const Shape& s) { stages.emplace_back(name, s); }
    const Shape* find(const std::string& name) const {
        for (const auto& [n, s] : stages)
            if (n == name) return &s;
        return nullptr;
    }
};

// Stride-2 residual stage: 3x3/s2 + 3x3 main path, 1x1/s2 projection shortcut.
template <typename T>
struct DownStage {
    ConvBnRelu<T> conv1;
    Conv2d<T> conv2;
    BatchNorm2d<T> bn2;
    Conv2d<T> proj;
    BatchNorm2d<T> bn_proj;

    DownStage() = default;
    DownStage(const std::string& name, int64_t in_ch, int64_t out_ch, InitRng& init)
        : conv1(name + ".conv1", in_ch, out_ch, 3, 2, 1, init),
          conv2(name + ".conv2", out_ch, out_ch, 3, 1, 1, false, init),
          bn2(name + ".bn2", out_ch),
          proj(name + ".proj", in_ch, out_ch, 1, 2, 0, false, init),
          bn_proj(name + ".bn_proj", out_ch) {}

    Var<T> forward(Tape<T>& tape, Var<T> x, const Mode& mode) {
        Var<T> main = bn2.forward(tape, conv2.forward(tape, conv1.forward(tape, x, mode)), mode);
        Var<T> shortcut = bn_proj.forward(tape, proj.forward(tape, x), mode);
        return relu(add(main, shortcut));
    }

    void collect(Registry<T>& reg) {
        conv1.collect(reg);
        conv2.collect(reg);
        bn2.collect(reg);
        proj.collect(reg);
        bn_proj.collect(reg);
    }
};

// Pre-norm transformer block: x + MSA(LN(x)), then + MLP(LN(.)).
template <typename T>
struct TransformerLayer {
    LayerNorm<T> ln1, ln2;
    Linear<T> wq, wk, wv, wo;
    Linear<T> fc1, fc2;
    int64_t heads = 1;
    double attn_dropout = 0.0;

    TransformerLayer() = default;
    TransformerLayer(const std::string& name, int64_t hidden, int64_t n_heads, int64_t mlp_dim,
                     double dropout, InitRng& init)
        : ln1(name + ".ln1", hidden),
          ln2(name + ".ln2", hidden),
          wq(name + ".q", hidden, hidden, init),
          wk(name + ".k", hidden, hidden, init),
          wv(name + ".v", hidden, hidden, init),
          wo(name + ".out", hidden, hidden, init),
          fc1(name + ".fc1", hidden, mlp_dim, init),
          fc2(name + ".fc2", mlp_dim, hidden, init),
          heads(n_heads),
          attn_dropout(dropout) {}

    // Multi-head self-attention on already-normalized tokens; attn_probs,
    // when non-null, receives the (n*heads, t, t) attention map.
    Var<T> attend(Tape<T>& tape, Var<T> y, const Mode& mode, Var<T>* attn_probs = nullptr) {
        const Tensor<T>& yv = y.value();
        detail::require_rank("transformer_attend", yv, 3);
        const int64_t n = yv.dim(0), t = yv.dim(1), hid = yv.dim(2);
        if (hid != ln1.gamma.value.numel()) {
            throw ShapeError("transformer_layer: hidden size " + std::to_string(hid) +
                             " does not match layer built for " +
                             std::to_string(ln1.gamma.value.numel()));
        }
        const int64_t dh = hid / heads;

        auto split_heads = [&](Var<T> v) {
            // (n,t,hid) -> (n*heads, t, dh)
            v = reshape(v, {n, t, heads, dh});
            v = permute(v, {0, 2, 1, 3});
            return reshape(v, {n * heads, t, dh});
        };

        Var<T> q = split_heads(wq.forward(tape, y));
        Var<T> k = split_heads(wk.forward(tape, y));
        Var<T> v = split_heads(wv.forward(tape, y));

        Var<T> energy = scale(bmm(q, transpose2(k)), T(1) / std::sqrt(static_cast<T>(dh)));
        Var<T> probs = softmax(energy, 2);
        if (attn_probs) *attn_probs = probs;
        probs = dropout(probs, attn_dropout, mode.dropout_rng, mode.training);

        Var<T> ctx = bmm(probs, v);  // (n*heads, t, dh)
        ctx = reshape(ctx, {n, heads, t, dh});
        ctx = permute(ctx, {0, 2, 1, 3});
        ctx = reshape(ctx, {n, t, hid});
        return wo.forward(tape, ctx);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, const Mode& mode, Var<T>* attn_probs = nullptr) {
        x = add(x, attend(tape, ln1.forward(tape, x), mode, attn_probs));
        Var<T> z = ln2.forward(tape, x);
        Var<T> m = fc2.forward(tape, gelu(fc1.forward(tape, z)));
        return add(x, m);
    }

    void collect(Registry<T>& reg) {
        ln1.collect(reg);
        ln2.collect(reg);
        wq.collect(reg);
        wk.collect(reg);
        wv.collect(reg);
        wo.collect(reg);
        fc1.collect(reg);
        fc2.collect(reg);
    }
};

template <typename T>
struct EncoderOutput {
    Var<T> tokens;                 // (n, n_tokens, hidden)
    std::array<Var<T>, 3> skips;   // 1/2, 1/4, 1/8 resolution
};

// Convolutional stem to a 1/16 grid, dual-attention (or plain 1x1) channel
// mapping to the transformer width, flatten + position embedding, then the
// transformer stack. Skips are captured before their DA filtering.
template <typename T>
struct Encoder {
    ModelConfig cfg;
    ConvBnRelu<T> stem;
    DownStage<T> stage1, stage2, stage3;
    std::optional<DABlock<T>> bottleneck_da;
    std::optional<Conv2d<T>> bottleneck_proj;
    Parameter<T> pos_embedding;
    std::vector<TransformerLayer<T>> layers;
    LayerNorm<T> final_norm;
    std::array<std::optional<DABlock<T>>, 3> skip_da;

    Encoder() = default;
    Encoder(const ModelConfig& c, InitRng& init)
        : cfg(c),
          stem("encoder.stem", c.in_channels, c.stem_channels[0], 7, 2, 3, init),
          stage1("encoder.stage1", c.stem_channels[0], c.stem_channels[1], init),
          stage2("encoder.stage2", c.stem_channels[1], c.stem_channels[2], init),
          stage3("encoder.stage3", c.stem_channels[2], c.stem_channels[3], init),
          final_norm("encoder.norm", c.transformer_hidden) {
        if (c.enable_encoder_da) {
            bottleneck_da.emplace("encoder.da", c.stem_channels[3], c.transformer_hidden,
                                  c.da_reduction, c.pam_qk_reduction, init);
        } else {
            bottleneck_proj.emplace("encoder.proj", c.stem_channels[3], c.transformer_hidden, 1,
                                    1, 0, true, init);
        }
        pos_embedding =
            Parameter<T>("encoder.pos_embedding", Tensor<T>({c.n_tokens(), c.transformer_hidden}));
        init.trunc_normal(pos_embedding.value);
        layers.reserve(static_cast<size_t>(c.transformer_layers));
        for (int64_t i = 0; i < c.transformer_layers; ++i) {
            layers.emplace_back("encoder.transformer." + std::to_string(i), c.transformer_hidden,
                                c.transformer_heads, c.mlp_dim, c.dropout, init);
        }
        const std::array<int64_t, 3> skip_ch{c.stem_channels[0], c.stem_channels[1],
                                             c.stem_channels[2]};
        for (int i = 0; i < 3; ++i) {
            if (c.enable_skip_da[static_cast<size_t>(i)]) {
                skip_da[static_cast<size_t>(i)].emplace(
                    "encoder.skip_da." + std::to_string(i + 1), skip_ch[static_cast<size_t>(i)],
                    skip_ch[static_cast<size_t>(i)], c.da_reduction, c.pam_qk_reduction, init);
            }
        }
    }

    EncoderOutput<T> forward(Tape<T>& tape, Var<T> image, const Mode& mode,
                             ShapeTrace* trace = nullptr) {
        const Tensor<T>& iv = image.value();
        detail::require_rank("encoder_forward", iv, 4);
        if (iv.dim(2) != cfg.input_size || iv.dim(3) != cfg.input_size) {
            throw ConfigError("encoder_forward: input " + shape_str(iv.shape()) +
                              " does not match configured input_size " +
                              std::to_string(cfg.input_size));
        }
        const int64_t n = iv.dim(0);

        Var<T> s1 = stem.forward(tape, image, mode);       // (s0, size/2)
        Var<T> s2 = stage1.forward(tape, s1, mode);        // (s1, size/4)
        Var<T> s3 = stage2.forward(tape, s2, mode);        // (s2, size/8)
        Var<T> bottom = stage3.forward(tape, s3, mode);    // (s3, size/16)
        if (trace) trace->record("bottleneck", bottom.shape());

        Var<T> mapped = bottleneck_da ? bottleneck_da->forward(tape, bottom, mode)
                                      : bottleneck_proj->forward(tape, bottom);
        if (trace) trace->record("pre_embedding", mapped.shape());

        const int64_t g = cfg.token_grid();
        Var<T> tokens = reshape(mapped, {n, cfg.transformer_hidden, g * g});
        tokens = permute(tokens, {0, 2, 1});  // (n, t, hidden)
        tokens = bias_add(tokens, tape.param(pos_embedding));
        tokens = dropout(tokens, cfg.dropout, mode.dropout_rng, mode.training);
        if (trace) trace->record("tokens", tokens.shape());

        for (auto& layer : layers) tokens = layer.forward(tape, tokens, mode);
        tokens = final_norm.forward(tape, tokens);

        std::array<Var<T>, 3> skips{s1, s2, s3};
        for (int i = 0; i < 3; ++i) {
            if (skip_da[static_cast<size_t>(i)]) {
                skips[static_cast<size_t>(i)] = skip_da[static_cast<size_t>(i)]->forward(
                    tape, skips[static_cast<size_t>(i)], mode);
            }
        }
        return {tokens, skips};
    }

    void collect(Registry<T>& reg) {
        stem.collect(reg);
        stage1.collect(reg);
        stage2.collect(reg);
        stage3.collect(reg);
        if (bottleneck_da) bottleneck_da->collect(reg);
        if (bottleneck_proj) bottleneck_proj->collect(reg);
        reg.add(pos_embedding);
        for (auto& l : layers) l.collect(reg);
        final_norm.collect(reg);
        for (auto& s : skip_da)
            if (s) s->collect(reg);
    }
};

// Token grid back to a map, then three cycles of [x2 upsample, skip concat,
// two 3x3 conv+BN+ReLU], a final x2 upsample and the 1x1 segmentation head.
template <typename T>
struct Decoder {
    ModelConfig cfg;
    ConvBnRelu<T> neck;
    struct UpBlock {
        ConvBnRelu<T> c1, c2;
    };
    std::array<UpBlock, 3> blocks;
    Conv2d<T> head;

    Decoder() = default;
    Decoder(const ModelConfig& c, InitRng& init)
        : cfg(c), neck("decoder.neck", c.transformer_hidden, c.neck_channels, 3, 1, 1, init) {
        const std::array<int64_t, 3> skip_ch{c.stem_channels[2], c.stem_channels[1],
                                             c.stem_channels[0]};
        int64_t in_ch = c.neck_channels;
        for (int i = 0; i < 3; ++i) {
            const std::string base = "decoder.up" + std::to_string(i + 1);
            const int64_t out_ch = c.decoder_channels[static_cast<size_t>(i)];
            blocks[static_cast<size_t>(i)].c1 =
                ConvBnRelu<T>(base + ".c1", in_ch + skip_ch[static_cast<size_t>(i)], out_ch, 3, 1,
                              1, init);
            blocks[static_cast<size_t>(i)].c2 = ConvBnRelu<T>(base + ".c2", out_ch, out_ch, 3, 1, 1, init);
            in_ch = out_ch;
        }
        head = Conv2d<T>("decoder.head", c.decoder_channels[2], c.num_classes, 1, 1, 0, true, init);
    }

    Var<T> forward(Tape<T>& tape, Var<T> tokens, const std::array<Var<T>, 3>& skips,
                   const Mode& mode, ShapeTrace* trace = nullptr) {
        const Tensor<T>& tv = tokens.value();
        detail::require_rank("decoder_forward", tv, 3);
        const int64_t n = tv.dim(0), t = tv.dim(1), hid = tv.dim(2);
        const int64_t g = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(t))));
        if (g * g != t) {
            throw ShapeError("decoder_forward: token count " + std::to_string(t) +
                             " is not a perfect square");
        }
        Var<T> x = permute(tokens, {0, 2, 1});
        x = reshape(x, {n, hid, g, g});
        if (trace) trace->record("regrid", x.shape());
        x = neck.forward(tape, x, mode);

        for (int i = 0; i < 3; ++i) {
            x = upsample_bilinear2x(x);
            const Var<T>& skip = skips[static_cast<size_t>(2 - i)];
            const Tensor<T>& sv = skip.value();
            if (sv.dim(2) != x.value().dim(2) || sv.dim(3) != x.value().dim(3)) {
                throw ShapeError("decoder stage " + std::to_string(i + 1) + ": skip " +
                                 shape_str(sv.shape()) + " does not match upsampled " +
                                 shape_str(x.value().shape()));
            }
            x = concat_channels(x, skip);
            x = blocks[static_cast<size_t>(i)].c1.forward(tape, x, mode);
            x = blocks[static_cast<size_t>(i)].c2.forward(tape, x, mode);
        }
        if (trace) trace->record("pre_head", x.shape());
        x = upsample_bilinear2x(x);
        Var<T> logits = head.forward(tape, x);
        if (trace) trace->record("logits", logits.shape());
        return logits;
    }

    void collect(Registry<T>& reg) {
        neck.collect(reg);
        for (auto& b : blocks) {
            b.c1.collect(reg);
            b.c2.collect(reg);
        }
        head.collect(reg);
    }
};

template <typename T>
struct DATransUNet {
    ModelConfig cfg;
    Encoder<T> encoder;
    Decoder<T> decoder;

    explicit DATransUNet(const ModelConfig& c) : cfg(c) {
        cfg.validate();
        InitRng init(cfg.seed);
        encoder = Encoder<T>(cfg, init);
        decoder = Decoder<T>(cfg, init);
    }

    Var<T> forward(Tape<T>& tape, Var<T> image, const Mode& mode, ShapeTrace* trace = nullptr) {
        EncoderOutput<T> enc = encoder.forward(tape, image, mode, trace);
        return decoder.forward(tape, enc.tokens, enc.skips, mode, trace);
    }

    Registry<T> registry() {
        Registry<T> reg;
        encoder.collect(reg);
        decoder.collect(reg);
        return reg;
    }
};

inline int64_t count_parameters(const ModelConfig& cfg) {
    DATransUNet<float> model(cfg);
    return model.registry().parameter_count();
}

}  // namespace dtu
