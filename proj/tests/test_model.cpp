#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "dtu/model.hpp"
#include "dtu/oracles.hpp"

using namespace dtu;

namespace {

template <typename T>
Tensor<T> rand_tensor(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
    return t;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c = ModelConfig::toy();
    c.input_size = 50;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig::toy();
    c.transformer_hidden = 30;
    c.transformer_heads = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("encoder produces the documented token and skip shapes at 224") {
    ModelConfig cfg;  // full-scale channels
    cfg.transformer_layers = 1;  // depth does not change any shape
    cfg.dropout = 0.0;
    DATransUNet<float> model(cfg);
    Tape<float> tape(false);
    Var<float> image = tape.input(rand_tensor<float>({1, 3, 224, 224}, 1, 0, 1));
    ShapeTrace trace;
    EncoderOutput<float> enc = model.encoder.forward(tape, image, Mode::eval(), &trace);

    CHECK(enc.tokens.value().shape() == Shape{1, 196, 768});
    CHECK(enc.skips[0].value().shape() == Shape{1, 64, 112, 112});
    CHECK(enc.skips[1].value().shape() == Shape{1, 256, 56, 56});
    CHECK(enc.skips[2].value().shape() == Shape{1, 512, 28, 28});
    REQUIRE(trace.find("bottleneck") != nullptr);
    CHECK(*trace.find("bottleneck") == Shape{1, 1024, 14, 14});
    REQUIRE(trace.find("pre_embedding") != nullptr);
    CHECK(*trace.find("pre_embedding") == Shape{1, 768, 14, 14});
}

TEST_CASE("token count follows the input size") {
    ModelConfig cfg = ModelConfig::toy(256, 32, 1);
    DATransUNet<float> model(cfg);
    Tape<float> tape(false);
    Var<float> image = tape.input(rand_tensor<float>({1, 3, 256, 256}, 2, 0, 1));
    EncoderOutput<float> enc = model.encoder.forward(tape, image, Mode::eval());
    CHECK(enc.tokens.value().dim(1) == 256);
}

TEST_CASE("disabling encoder DA swaps in a plain projection without shape changes") {
    ModelConfig cfg = ModelConfig::toy(64, 32, 1);
    cfg.enable_encoder_da = false;
    DATransUNet<float> model(cfg);
    CHECK(model.encoder.bottleneck_da.has_value() == false);
    CHECK(model.encoder.bottleneck_proj.has_value() == true);
    Tape<float> tape(false);
    Var<float> image = tape.input(rand_tensor<float>({2, 3, 64, 64}, 3, 0, 1));
    ShapeTrace trace;
    Var<float> logits = model.forward(tape, image, Mode::eval(), &trace);
    CHECK(logits.value().shape() == Shape{2, 1, 64, 64});
    CHECK(*trace.find("pre_embedding") == Shape{2, 32, 4, 4});
}

TEST_CASE("transformer layer with zero output projections is the identity") {
    InitRng init(7);
    TransformerLayer<double> layer("l", 16, 4, 32, 0.0, init);
    auto zero = [](Parameter<double>& p) {
        std::fill(p.value.vec().begin(), p.value.vec().end(), 0.0);
    };
    zero(layer.wo.weight);
    zero(layer.wo.bias);
    zero(layer.fc2.weight);
    zero(layer.fc2.bias);
    Tensor<double> x = rand_tensor<double>({2, 5, 16}, 4);
    Tape<double> tape;
    Var<double> y = layer.forward(tape, tape.input(x), Mode::eval());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);  // bitwise
}

TEST_CASE("per-head attention rows sum to one") {
    InitRng init(8);
    TransformerLayer<double> layer("l", 12, 3, 24, 0.0, init);
    Tensor<double> x = rand_tensor<double>({2, 6, 12}, 5, -2, 2);
    Tape<double> tape;
    Var<double> probs;
    layer.forward(tape, tape.input(x), Mode::eval(), &probs);
    const auto& p = probs.value();
    REQUIRE(p.shape() == Shape{6, 6, 6});  // (n*heads, t, t)
    for (int64_t r = 0; r < p.dim(0) * p.dim(1); ++r) {
        double s = 0;
        for (int64_t i = 0; i < p.dim(2); ++i) s += p[r * p.dim(2) + i];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("multi-head attention matches the per-head loop oracle") {
    InitRng init(9);
    TransformerLayer<double> layer("l", 8, 2, 16, 0.0, init);
    Tensor<double> x = rand_tensor<double>({1, 4, 8}, 6);
    Tape<double> tape;
    Var<double> got = layer.attend(tape, tape.input(x), Mode::eval());
    Tensor<double> want = oracle::multihead_attention(
        x, 2, layer.wq.weight.value, layer.wq.bias.value, layer.wk.weight.value,
        layer.wk.bias.value, layer.wv.weight.value, layer.wv.bias.value, layer.wo.weight.value,
        layer.wo.bias.value);
    for (int64_t i = 0; i < want.numel(); ++i)
        CHECK(got.value()[i] == doctest::Approx(want[i]).epsilon(1e-5));
}

TEST_CASE("transformer layer rejects hidden-size mismatch") {
    InitRng init(10);
    TransformerLayer<double> layer("l", 16, 4, 32, 0.0, init);
    Tape<double> tape;
    Var<double> x = tape.input(rand_tensor<double>({1, 4, 8}, 7));
    CHECK_THROWS_AS(layer.forward(tape, x, Mode::eval()), ShapeError);
}

TEST_CASE("decoder reproduces the documented shape ladder at 224") {
    ModelConfig cfg;
    cfg.transformer_layers = 1;
    cfg.dropout = 0.0;
    DATransUNet<float> model(cfg);
    Tape<float> tape(false);
    Var<float> image = tape.input(rand_tensor<float>({1, 3, 224, 224}, 8, 0, 1));
    ShapeTrace trace;
    Var<float> logits = model.forward(tape, image, Mode::eval(), &trace);
    CHECK(*trace.find("regrid") == Shape{1, 768, 14, 14});
    CHECK(*trace.find("pre_head") == Shape{1, 64, 112, 112});
    CHECK(logits.value().shape() == Shape{1, 9, 224, 224});
}

TEST_CASE("single-class head yields single-channel logits") {
    ModelConfig cfg = ModelConfig::toy(32, 16, 1, 1);
    DATransUNet<float> model(cfg);
    Tape<float> tape(false);
    Var<float> logits =
        model.forward(tape, tape.input(rand_tensor<float>({1, 3, 32, 32}, 9, 0, 1)), Mode::eval());
    CHECK(logits.value().shape() == Shape{1, 1, 32, 32});
}

TEST_CASE("zeroed decoder parameters produce all-zero logits") {
    ModelConfig cfg = ModelConfig::toy(32, 16, 1, 2);
    DATransUNet<float> model(cfg);
    Registry<float> reg;
    model.decoder.collect(reg);
    for (const auto& e : reg.entries()) {
        if (e.param) std::fill(e.value->vec().begin(), e.value->vec().end(), 0.f);
    }
    Tape<float> tape(false);
    Var<float> logits =
        model.forward(tape, tape.input(rand_tensor<float>({1, 3, 32, 32}, 10, 0, 1)), Mode::eval());
    for (int64_t i = 0; i < logits.value().numel(); ++i) CHECK(logits.value()[i] == 0.f);
}

TEST_CASE("decoder rejects skip resolution mismatch naming the stage") {
    ModelConfig cfg = ModelConfig::toy(32, 16, 1);
    DATransUNet<float> model(cfg);
    Tape<float> tape(false);
    Var<float> tokens = tape.input(rand_tensor<float>({1, 4, 16}, 11));
    std::array<Var<float>, 3> skips{
        tape.input(rand_tensor<float>({1, 8, 16, 16}, 12)),
        tape.input(rand_tensor<float>({1, 16, 8, 8}, 13)),
        tape.input(rand_tensor<float>({1, 32, 8, 8}, 14)),  // wrong: should be 4x4 -> up to 8 ok
    };
    // tokens 4 -> grid 2 -> up to 4: skip[2] must be 4x4, give 8x8 instead
    try {
        model.decoder.forward(tape, tokens, skips, Mode::eval());
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
    }
}

TEST_CASE("model forward on the toy config keeps batch and class extents") {
    ModelConfig cfg = ModelConfig::toy(64, 32, 2, 1);
    DATransUNet<float> model(cfg);
    Tape<float> tape(false);
    Var<float> logits =
        model.forward(tape, tape.input(rand_tensor<float>({2, 3, 64, 64}, 15, 0, 1)), Mode::eval());
    CHECK(logits.value().shape() == Shape{2, 1, 64, 64});
}

TEST_CASE("eval-mode forward is bitwise deterministic") {
    ModelConfig cfg = ModelConfig::toy(32, 16, 1, 2);
    DATransUNet<float> model(cfg);
    Tensor<float> image = rand_tensor<float>({1, 3, 32, 32}, 16, 0, 1);
    Tensor<float> a, b;
    {
        Tape<float> tape(false);
        a = model.forward(tape, tape.input(image), Mode::eval()).value().clone();
    }
    {
        Tape<float> tape(false);
        b = model.forward(tape, tape.input(image), Mode::eval()).value().clone();
    }
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("alpha and beta contribute exactly one scalar each per DA block") {
    ModelConfig cfg = ModelConfig::toy(32, 16, 1);
    DATransUNet<float> model(cfg);
    Registry<float> reg = model.registry();
    int64_t alphas = 0, betas = 0;
    for (const auto& e : reg.entries()) {
        if (e.name.find(".alpha") != std::string::npos) {
            alphas++;
            CHECK(e.value->numel() == 1);
        }
        if (e.name.find(".cam.beta") != std::string::npos) {
            betas++;
            CHECK(e.value->numel() == 1);
        }
    }
    // encoder DA + 3 skip DA blocks
    CHECK(alphas == 4);
    CHECK(betas == 4);
}

TEST_CASE("parameter count equals a hand-summed ledger on a small config") {
    ModelConfig cfg;
    cfg.in_channels = 3;
    cfg.num_classes = 2;
    cfg.input_size = 32;
    cfg.stem_channels = {4, 8, 16, 32};
    cfg.transformer_hidden = 16;
    cfg.transformer_layers = 1;
    cfg.transformer_heads = 2;
    cfg.mlp_dim = 24;
    cfg.da_reduction = 16;
    cfg.pam_qk_reduction = 8;
    cfg.enable_encoder_da = true;
    cfg.enable_skip_da = {true, false, false};
    cfg.decoder_channels = {12, 10, 8};
    cfg.neck_channels = 14;

    // Independent arithmetic, layer by layer.
    auto conv = [](int64_t ic, int64_t oc, int64_t k, bool bias) {
        return oc * ic * k * k + (bias ? oc : 0);
    };
    auto bn = [](int64_t c) { return 2 * c; };  // learnable gamma/beta only
    auto conv_bn = [&](int64_t ic, int64_t oc, int64_t k) { return conv(ic, oc, k, false) + bn(oc); };
    auto down_stage = [&](int64_t ic, int64_t oc) {
        return conv_bn(ic, oc, 3) + conv_bn(oc, oc, 3) + conv_bn(ic, oc, 1);
    };
    auto da_block = [&](int64_t ic, int64_t oc) {
        const int64_t r = std::max<int64_t>(1, (ic + 15) / 16);
        const int64_t qk = std::max<int64_t>(1, r / 8);
        int64_t n = 0;
        n += conv_bn(ic, r, 3) + conv_bn(r, r, 3);  // pam_in, pam_out
        n += conv_bn(ic, r, 3) + conv_bn(r, r, 3);  // cam_in, cam_out
        n += conv(r, oc, 1, true);                  // fuse
        n += conv(r, qk, 1, true) * 2;              // query, key
        n += conv(r, r, 1, true);                   // value
        n += 1 + 1;                                 // alpha, beta
        return n;
    };
    auto linear = [](int64_t i, int64_t o) { return i * o + o; };
    auto transformer_layer = [&](int64_t h, int64_t mlp) {
        return 2 * (2 * h)            // two layer norms
               + 4 * linear(h, h)     // q, k, v, out
               + linear(h, mlp) + linear(mlp, h);
    };

    int64_t expect = 0;
    expect += conv_bn(3, 4, 7);                      // stem
    expect += down_stage(4, 8) + down_stage(8, 16) + down_stage(16, 32);
    expect += da_block(32, 16);                      // encoder DA
    expect += (32 / 16) * (32 / 16) * 16;            // position embedding (2x2 tokens)
    expect += transformer_layer(16, 24);
    expect += 2 * 16;                                // final norm
    expect += da_block(4, 4);                        // skip 1 only
    expect += conv_bn(16, 14, 3);                    // neck
    expect += conv_bn(14 + 16, 12, 3) + conv_bn(12, 12, 3);
    expect += conv_bn(12 + 8, 10, 3) + conv_bn(10, 10, 3);
    expect += conv_bn(10 + 4, 8, 3) + conv_bn(8, 8, 3);
    expect += conv(8, 2, 1, true);                   // head

    CHECK(count_parameters(cfg) == expect);
}

TEST_CASE("parameter count is linear in transformer depth") {
    ModelConfig a = ModelConfig::toy(32, 16, 1);
    ModelConfig b = ModelConfig::toy(32, 16, 3);
    ModelConfig c = ModelConfig::toy(32, 16, 5);
    const int64_t ca = count_parameters(a), cb = count_parameters(b), cc = count_parameters(c);
    const int64_t per_layer = (cb - ca) / 2;
    CHECK(cb - ca == 2 * per_layer);
    CHECK(cc - cb == 2 * per_layer);
    CHECK(per_layer > 0);
}

TEST_CASE("toggling DA flags never changes output shapes") {
    for (bool enc : {false, true}) {
        for (int skips = 0; skips < 8; ++skips) {
            ModelConfig cfg = ModelConfig::toy(32, 16, 1, 3);
            cfg.enable_encoder_da = enc;
            cfg.enable_skip_da = {(skips & 1) != 0, (skips & 2) != 0, (skips & 4) != 0};
            DATransUNet<float> model(cfg);
            Tape<float> tape(false);
            Var<float> logits = model.forward(
                tape, tape.input(rand_tensor<float>({1, 3, 32, 32}, 100 + skips, 0, 1)),
                Mode::eval());
            CHECK(logits.value().shape() == Shape{1, 3, 32, 32});
        }
    }
}
