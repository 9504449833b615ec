// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Tolerances are pinned in code next to each check.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>
#include <vector>

#include "dtu/data.hpp"
#include "dtu/dual_attention.hpp"
#include "dtu/gradcheck_suite.hpp"
#include "dtu/metrics.hpp"
#include "dtu/model.hpp"
#include "dtu/oracles.hpp"
#include "dtu/train.hpp"

using namespace dtu;
namespace fs = std::filesystem;

namespace {

struct Criterion {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::vector<Criterion> g_results;

void report(const std::string& name, bool pass, const std::string& detail) {
    g_results.push_back({name, pass, detail});
    std::printf("[%s] %-24s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
Tensor<T> rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
    return t;
}

double max_rel_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double den = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
        m = std::max(m, std::abs(a[i] - b[i]) / den);
    }
    return m;
}

// ---------------------------------------------------------------------------

void criterion_oracle_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(1001);
    double worst = 0;
    int fixtures = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t n = 1 + static_cast<int64_t>(rng() % 2);
        const int64_t c = 1 + static_cast<int64_t>(rng() % 16);
        const int64_t h = 1 + static_cast<int64_t>(rng() % 8);
        const int64_t w = 1 + static_cast<int64_t>(rng() % 8);
        Tensor<double> a = rand_tensor<double>({n, c, h, w}, rng, -2, 2);

        InitRng init(rng());
        PamParams<double> pam("pam", c, 8, init);
        pam.alpha.value[0] = 0.1 + 0.8 * static_cast<double>(trial) / 100.0;
        Tensor<double> got_pam, got_cam;
        {
            Tape<double> tape(false);
            got_pam = pam_forward(tape, tape.input(a), pam).value().clone();
        }
        Tensor<double> want_pam = oracle::pam(
            a, pam.query_conv.weight.value, pam.query_conv.bias.value, pam.key_conv.weight.value,
            pam.key_conv.bias.value, pam.value_conv.weight.value, pam.value_conv.bias.value,
            pam.alpha.value[0]);
        worst = std::max(worst, max_rel_diff(got_pam, want_pam));

        CamParams<double> cam("cam");
        cam.beta.value[0] = 1.0 - 0.7 * static_cast<double>(trial) / 100.0;
        {
            Tape<double> tape(false);
            got_cam = cam_forward(tape, tape.input(a), cam).value().clone();
        }
        worst = std::max(worst, max_rel_diff(got_cam, oracle::cam(a, cam.beta.value[0])));

        // DA block: production block vs the same wiring with oracle attention
        DABlock<double> block("da", c, std::max<int64_t>(1, c / 2), 16, 8, init);
        block.pam.alpha.value[0] = 0.5;
        block.cam.beta.value[0] = 0.5;
        const Mode mode = Mode::eval();
        Tensor<double> got_da;
        {
            Tape<double> tape(false);
            got_da = block.forward(tape, tape.input(a), mode).value().clone();
        }
        auto run_stage = [&](ConvBnRelu<double>& stage, const Tensor<double>& x) {
            Tape<double> tape(false);
            return stage.forward(tape, tape.input(x), mode).value().clone();
        };
        Tensor<double> b1 = run_stage(block.pam_in, a);
        b1 = oracle::pam(b1, block.pam.query_conv.weight.value, block.pam.query_conv.bias.value,
                         block.pam.key_conv.weight.value, block.pam.key_conv.bias.value,
                         block.pam.value_conv.weight.value, block.pam.value_conv.bias.value,
                         block.pam.alpha.value[0]);
        b1 = run_stage(block.pam_out, b1);
        Tensor<double> b2 = run_stage(block.cam_in, a);
        b2 = oracle::cam(b2, block.cam.beta.value[0]);
        b2 = run_stage(block.cam_out, b2);
        Tensor<double> fused(b1.shape());
        for (int64_t i = 0; i < fused.numel(); ++i) fused[i] = b1[i] + b2[i];
        Tensor<double> want_da;
        {
            Tape<double> tape(false);
            want_da = block.fuse.forward(tape, tape.input(fused)).value().clone();
        }
        worst = std::max(worst, max_rel_diff(got_da, want_da));
        fixtures++;
    }
    const double secs = seconds_since(t0);
    std::ostringstream os;
    os << fixtures << " fixtures, worst rel err " << worst << ", " << secs << "s";
    report("oracle_equivalence", worst < 1e-5 && secs < 60.0 && fixtures >= 100, os.str());
}

void criterion_identity_cases() {
    std::mt19937_64 rng(2002);
    double worst = 0;

    InitRng init(7);
    PamParams<double> pam("pam", 6, 8, init);
    Tensor<double> a = rand_tensor<double>({2, 6, 5, 4}, rng);
    {
        Tape<double> tape(false);
        Tensor<double> out = pam_forward(tape, tape.input(a), pam).value().clone();
        for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(out[i] - a[i]));
    }
    CamParams<double> cam("cam");
    {
        Tape<double> tape(false);
        Tensor<double> out = cam_forward(tape, tape.input(a), cam).value().clone();
        for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(out[i] - a[i]));
    }
    TransformerLayer<double> layer("l", 16, 4, 32, 0.0, init);
    for (Parameter<double>* p :
         {&layer.wo.weight, &layer.wo.bias, &layer.fc2.weight, &layer.fc2.bias}) {
        std::fill(p->value.vec().begin(), p->value.vec().end(), 0.0);
    }
    Tensor<double> x = rand_tensor<double>({2, 5, 16}, rng);
    {
        Tape<double> tape(false);
        Tensor<double> out = layer.forward(tape, tape.input(x), Mode::eval()).value().clone();
        for (int64_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(out[i] - x[i]));
    }
    std::ostringstream os;
    os << "max abs deviation " << worst;
    report("identity_cases", worst <= 1e-12, os.str());
}

void criterion_normalization() {
    std::mt19937_64 rng(3003);
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const int64_t c = 2 + static_cast<int64_t>(rng() % 8);
        Tensor<double> a = rand_tensor<double>({2, c, 4, 4}, rng, -3, 3);
        InitRng init(rng());
        PamParams<double> pam("pam", c, 8, init);
        CamParams<double> cam("cam");
        Tape<double> tape;
        Var<double> pattn, cattn;
        pam_forward(tape, tape.input(a), pam, &pattn);
        cam_forward(tape, tape.input(a), cam, &cattn);

        TransformerLayer<double> layer("l", 16, 4, 32, 0.0, init);
        Var<double> tprobs;
        layer.forward(tape, tape.input(rand_tensor<double>({2, 6, 16}, rng, -2, 2)),
                      Mode::eval(), &tprobs);

        for (const Var<double>* v : {&pattn, &cattn, &tprobs}) {
            const auto& t = v->value();
            const int64_t rows = t.dim(0) * t.dim(1), len = t.dim(2);
            for (int64_t r = 0; r < rows; ++r) {
                double s = 0;
                for (int64_t i = 0; i < len; ++i) s += t[r * len + i];
                worst = std::max(worst, std::abs(s - 1.0));
            }
        }
    }
    std::ostringstream os;
    os << "worst row-sum deviation " << worst;
    report("normalization", worst <= 1e-6, os.str());
}

void criterion_gradient_checks() {
    const auto t0 = std::chrono::steady_clock::now();
    GradSuiteResult suite = run_gradcheck_suite(20240915, 1e-5, 1e-4, 3);
    const double secs = seconds_since(t0);
    std::ostringstream os;
    bool pass = secs < 300.0;
    double worst_module = 0, worst_e2e = 0;
    for (const auto& c : suite.checks) {
        pass = pass && c.ok();
        if (c.name == "end_to_end_toy") worst_e2e = c.max_rel_err;
        else worst_module = std::max(worst_module, c.max_rel_err);
    }
    os << "per-module worst " << worst_module << " (tol 1e-5), end-to-end " << worst_e2e
       << " (tol 1e-4), " << secs << "s";
    report("gradient_checks", pass, os.str());
}

void criterion_shape_pipeline() {
    bool pass = true;
    std::ostringstream os;
    {
        ModelConfig cfg;  // full defaults: 12 transformer layers, 9 classes
        cfg.dropout = 0.0;
        DATransUNet<float> model(cfg);
        std::mt19937_64 rng(4004);
        Tape<float> tape(false);
        Var<float> image = tape.input(rand_tensor<float>({1, 3, 224, 224}, rng, 0, 1));
        ShapeTrace trace;
        Var<float> logits = model.forward(tape, image, Mode::eval(), &trace);
        auto eq = [&](const char* key, Shape want) {
            const Shape* got = trace.find(key);
            const bool ok = got && *got == want;
            pass = pass && ok;
            if (!ok) os << key << " mismatch; ";
            return ok;
        };
        eq("bottleneck", {1, 1024, 14, 14});
        eq("pre_embedding", {1, 768, 14, 14});
        eq("tokens", {1, 196, 768});
        eq("regrid", {1, 768, 14, 14});
        eq("pre_head", {1, 64, 112, 112});
        pass = pass && logits.value().shape() == Shape{1, 9, 224, 224};
    }
    {
        ModelConfig cfg;
        cfg.input_size = 256;
        cfg.transformer_layers = 1;  // token count is depth-independent
        cfg.dropout = 0.0;
        DATransUNet<float> model(cfg);
        std::mt19937_64 rng(4005);
        Tape<float> tape(false);
        ShapeTrace trace;
        model.encoder.forward(tape, tape.input(rand_tensor<float>({1, 3, 256, 256}, rng, 0, 1)),
                              Mode::eval(), &trace);
        const Shape* tokens = trace.find("tokens");
        pass = pass && tokens && *tokens == Shape{1, 256, 768};
        if (!(tokens && *tokens == Shape{1, 256, 768})) os << "256 tokens mismatch; ";
    }
    if (os.str().empty())
        os << "224: (1024,14,14)->(768,14,14)->(196,768)->(64,112,112)->(9,224,224); 256: 256 "
              "tokens";
    report("shape_pipeline", pass, os.str());
}

void criterion_metric_fidelity() {
    std::mt19937_64 rng(5005);
    bool counts_ok = true;
    double worst_hd = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const int64_t h = 2 + static_cast<int64_t>(rng() % 31);
        const int64_t w = 2 + static_cast<int64_t>(rng() % 31);
        Tensor<int32_t> a({h, w}), b({h, w});
        std::uniform_real_distribution<double> unit(0, 1);
        const double pa = 0.1 + 0.5 * unit(rng), pb = 0.1 + 0.5 * unit(rng);
        for (int64_t i = 0; i < h * w; ++i) {
            a[i] = unit(rng) < pa ? 1 : 0;
            b[i] = unit(rng) < pb ? 1 : 0;
        }
        auto om = oracle::metrics(a, b);
        auto c = confusion_counts(a, b, 1);
        counts_ok = counts_ok && c.tp == om.tp && c.fp == om.fp && c.fn == om.fn;
        worst_hd = std::max(worst_hd,
                            std::abs(hausdorff(a, b, HausdorffVariant::kMax) - om.hd));
        worst_hd = std::max(worst_hd,
                            std::abs(hausdorff(a, b, HausdorffVariant::kP95) - om.hd95));
    }
    bool identity_ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        ConfusionCounts c{static_cast<int64_t>(rng() % 500), static_cast<int64_t>(rng() % 500),
                          static_cast<int64_t>(rng() % 500)};
        auto [iou, dice] = iou_and_dice(c);
        identity_ok = identity_ok && std::abs(dice - 2.0 * iou / (1.0 + iou)) <= 1e-12 &&
                      iou <= dice && dice <= 1.0;
    }
    std::ostringstream os;
    os << "500 mask pairs, counts " << (counts_ok ? "exact" : "MISMATCH") << ", worst HD diff "
       << worst_hd << ", dice identity " << (identity_ok ? "holds" : "BROKEN");
    report("metric_fidelity", counts_ok && worst_hd < 1e-9 && identity_ok, os.str());
}

void criterion_loss_contract() {
    std::mt19937_64 rng(6006);
    bool midpoint_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> logits = rand_tensor<double>({1, 3, 4, 4}, rng, -3, 3);
        Tensor<int32_t> labels({1, 4, 4});
        for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = static_cast<int32_t>(rng() % 3);
        Tape<double> tape;
        LossParts<double> loss =
            combined_loss(tape, tape.input(logits), labels, LossMode::kMulticlass);
        midpoint_ok = midpoint_ok &&
                      loss.total.value()[0] -
                              0.5 * (loss.primary.value()[0] + loss.dice.value()[0]) ==
                          0.0;
    }
    Tensor<int32_t> labels({1, 4, 4});
    for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = static_cast<int32_t>(rng() & 1);
    Tape<double> tape;
    LossParts<double> loss = combined_loss(tape, tape.input(Tensor<double>({1, 1, 4, 4})), labels,
                                           LossMode::kBinary);
    const double bce_dev = std::abs(loss.primary.value()[0] - std::log(2.0));
    std::ostringstream os;
    os << "midpoint exact " << (midpoint_ok ? "yes" : "NO") << ", BCE(0 logits) - ln2 = "
       << bce_dev;
    report("loss_contract", midpoint_ok && bce_dev <= 1e-9, os.str());
}

void criterion_overfit_sanity() {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig mcfg = ModelConfig::toy(64, 32, 2, 1);
    mcfg.seed = 77;
    DATransUNet<float> model(mcfg);
    Dataset data = generate_synthetic(8, 64, 2, 999);

    TrainConfig tcfg;
    tcfg.optimizer = OptKind::kAdam;
    tcfg.learning_rate = 1e-3;
    tcfg.momentum = 0.9;
    tcfg.weight_decay = 1e-4;
    tcfg.batch_size = 4;
    tcfg.seed = 31;
    tcfg.loss_mode = LossMode::kBinary;

    double dice = 0;
    int epochs_run = 0;
    OptimizerState<float> opt;
    while (epochs_run < 200) {
        tcfg.epochs = epochs_run + 10;
        fit(model, data, {}, tcfg, &opt, epochs_run);
        epochs_run = static_cast<int>(tcfg.epochs);
        MetricsReport rep = evaluate_dataset(model, data, tcfg.batch_size);
        dice = rep.mean_dice;
        if (dice > 0.95) break;
        if (seconds_since(t0) > 540.0) break;
    }
    const double secs = seconds_since(t0);
    std::ostringstream os;
    os << "train dice " << dice << " after " << epochs_run << " epochs, " << secs << "s";
    report("overfit_sanity", dice > 0.95 && epochs_run <= 200 && secs < 600.0, os.str());
}

void criterion_ablation_structure() {
    ModelConfig mcfg = ModelConfig::toy(32, 16, 1, 1);
    mcfg.seed = 5;
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 4;
    tcfg.seed = 9;
    tcfg.loss_mode = LossMode::kBinary;
    Dataset data = generate_synthetic(8, 32, 2, 123);

    AblationResult t3 = run_ablation<float>(mcfg, tcfg, data, AblationAxes::kEncoderAndSkips);
    AblationResult t4 = run_ablation<float>(mcfg, tcfg, data, AblationAxes::kSkipLayers);

    const std::string dir = (fs::temp_directory_path() / "dtu_acceptance_ablate").string();
    fs::create_directories(dir);
    write_ablation_csv(dir + "/t3.csv", t3);
    write_ablation_csv(dir + "/t4.csv", t4);
    auto header_of = [](const std::string& path) {
        std::ifstream is(path);
        std::string h;
        std::getline(is, h);
        return h;
    };
    const bool rows_ok = t3.rows.size() == 4 && t4.rows.size() == 5;
    const bool schema_ok = header_of(dir + "/t3.csv") == "row,encoder_da,skip_da,DSC,HD" &&
                           header_of(dir + "/t4.csv") == "row,layer1,layer2,layer3,DSC,HD";
    const bool shared_split = t3.train_hash == t4.train_hash && t3.eval_hash == t4.eval_hash &&
                              t3.seed == t4.seed;
    bool measured = true;
    for (const auto& r : t3.rows) measured = measured && std::isfinite(r.dsc);
    std::ostringstream os;
    os << t3.rows.size() << "+" << t4.rows.size() << " rows, schema "
       << (schema_ok ? "ok" : "BAD") << ", split hash " << t3.train_hash;
    report("ablation_structure", rows_ok && schema_ok && shared_split && measured, os.str());
}

void criterion_determinism_persistence() {
    Dataset data = generate_synthetic(6, 32, 2, 321);
    ModelConfig mcfg = ModelConfig::toy(32, 16, 1, 1);
    mcfg.seed = 8;
    TrainConfig tcfg;
    tcfg.epochs = 3;
    tcfg.batch_size = 2;
    tcfg.seed = 21;
    tcfg.loss_mode = LossMode::kBinary;
    tcfg.deterministic = true;

    RunRecord a, b;
    {
        DATransUNet<float> m(mcfg);
        a = fit(m, data, {}, tcfg);
    }
    {
        DATransUNet<float> m(mcfg);
        b = fit(m, data, {}, tcfg);
    }
    bool curves_equal = a.epoch_loss.size() == b.epoch_loss.size();
    for (size_t i = 0; curves_equal && i < a.epoch_loss.size(); ++i)
        curves_equal = a.epoch_loss[i] == b.epoch_loss[i];

    // checkpoint round trip + resume equivalence
    const std::string path = (fs::temp_directory_path() / "dtu_acceptance.ckpt").string();
    bool roundtrip_ok = true, resume_ok = true;
    {
        DATransUNet<float> m(mcfg);
        OptimizerState<float> opt;
        TrainConfig head = tcfg;
        head.epochs = 1;
        fit(m, data, {}, head, &opt);
        save_checkpoint(path, m, head, opt, 1);

        DATransUNet<float> r(mcfg);
        OptimizerState<float> ropt;
        int64_t epoch = 0;
        load_checkpoint(path, r, static_cast<TrainConfig*>(nullptr), &ropt, &epoch);
        Registry<float> rm = m.registry(), rr = r.registry();
        const auto& em = rm.entries();
        const auto& er = rr.entries();
        for (size_t i = 0; i < em.size(); ++i)
            for (int64_t j = 0; j < em[i].value->numel(); ++j)
                roundtrip_ok = roundtrip_ok && (*em[i].value)[j] == (*er[i].value)[j];

        RunRecord tail = fit(r, data, {}, tcfg, &ropt, epoch);
        DATransUNet<float> full(mcfg);
        RunRecord whole = fit(full, data, {}, tcfg);
        resume_ok = tail.epoch_loss.size() == 2 && tail.epoch_loss[0] == whole.epoch_loss[1] &&
                    tail.epoch_loss[1] == whole.epoch_loss[2];
    }
    fs::remove(path);
    std::ostringstream os;
    os << "curves " << (curves_equal ? "identical" : "DIFFER") << ", round trip "
       << (roundtrip_ok ? "bitwise" : "LOSSY") << ", resume "
       << (resume_ok ? "equivalent" : "DIVERGED");
    report("determinism_persistence", curves_equal && roundtrip_ok && resume_ok, os.str());
}

}  // namespace

int main() {
    criterion_oracle_equivalence();
    criterion_identity_cases();
    criterion_normalization();
    criterion_gradient_checks();
    criterion_shape_pipeline();
    criterion_metric_fidelity();
    criterion_loss_contract();
    criterion_overfit_sanity();
    criterion_ablation_structure();
    criterion_determinism_persistence();

    int failed = 0;
    for (const auto& c : g_results)
        if (!c.pass) failed++;
    std::printf("%d/%zu criteria passed\n", static_cast<int>(g_results.size()) - failed,
                g_results.size());
    return failed == 0 ? 0 : 1;
}
