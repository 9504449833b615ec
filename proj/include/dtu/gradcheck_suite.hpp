#pragma once

#include <random>
#include <string>
#include <vector>

#include "dtu/dual_attention.hpp"
#include "dtu/gradcheck.hpp"
#include "dtu/losses.hpp"
#include "dtu/model.hpp"

// The 64-bit finite-difference suite: per-module checks for the attention
// blocks and losses, plus an end-to-end check of the combined loss on a toy
// model. Used by both the CLI `gradcheck` command and the acceptance tests.

namespace dtu {

struct GradSuiteCheck {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    size_t checked = 0;

    bool ok() const { return max_rel_err < tolerance; }
};

struct GradSuiteResult {
    std::vector<GradSuiteCheck> checks;

    bool ok() const {
        for (const auto& c : checks)
            if (!c.ok()) return false;
        return true;
    }
    double worst() const {
        double w = 0;
        for (const auto& c : checks) w = std::max(w, c.max_rel_err);
        return w;
    }
};

namespace suite_detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<double> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

inline Tensor<int32_t> random_labels(Shape shape, int32_t classes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int32_t> dist(0, classes - 1);
    Tensor<int32_t> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

}  // namespace suite_detail

inline GradSuiteResult run_gradcheck_suite(uint64_t seed = 20240915,
                                           double module_tol = 1e-5, double e2e_tol = 1e-4,
                                           size_t e2e_samples = 3) {
    using suite_detail::random_labels;
    using suite_detail::random_tensor;
    std::mt19937_64 rng(seed);
    GradSuiteResult result;
    const double step = 1e-4;

    {  // PAM: d mean(pam(x)) / d input, alpha, kernels
        InitRng init(seed + 1);
        PamParams<double> pam("pam", 2, 8, init);
        pam.alpha.value[0] = 0.5;
        Tensor<double> x = random_tensor({1, 2, 3, 3}, rng);
        auto f = [&](Tape<double>& tape, Var<double> vx) {
            return mean_all(pam_forward(tape, vx, pam));
        };
        auto rep = gradcheck<double>(f, x, step, module_tol, "pam.input");
        result.checks.push_back({"pam_input", rep.max_rel_err, module_tol, rep.checked});

        auto loss_fn = [&]() {
            Tape<double> tape(false);
            return mean_all(pam_forward(tape, tape.input(x), pam)).value()[0];
        };
        auto grad_fn = [&]() {
            Tape<double> tape;
            tape.backward(mean_all(pam_forward(tape, tape.input(x), pam)));
        };
        std::vector<Parameter<double>*> params{&pam.alpha, &pam.query_conv.weight,
                                               &pam.key_conv.weight, &pam.value_conv.weight,
                                               &pam.value_conv.bias};
        auto prep = gradcheck_params<double>(loss_fn, grad_fn, params, step, module_tol, 0, seed);
        result.checks.push_back({"pam_params", prep.max_rel_err, module_tol, prep.checked});
    }

    {  // CAM: d mean(cam(x)) / d input, beta
        CamParams<double> cam("cam");
        cam.beta.value[0] = 0.7;
        Tensor<double> x = random_tensor({1, 3, 2, 2}, rng);
        auto f = [&](Tape<double>& tape, Var<double> vx) {
            return mean_all(cam_forward(tape, vx, cam));
        };
        auto rep = gradcheck<double>(f, x, step, module_tol, "cam.input");
        result.checks.push_back({"cam_input", rep.max_rel_err, module_tol, rep.checked});

        auto loss_fn = [&]() {
            Tape<double> tape(false);
            return mean_all(cam_forward(tape, tape.input(x), cam)).value()[0];
        };
        auto grad_fn = [&]() {
            Tape<double> tape;
            tape.backward(mean_all(cam_forward(tape, tape.input(x), cam)));
        };
        auto prep = gradcheck_params<double>(loss_fn, grad_fn, {&cam.beta}, step, module_tol, 0,
                                             seed);
        result.checks.push_back({"cam_beta", prep.max_rel_err, module_tol, prep.checked});
    }

    {  // dice loss on probabilities kept inside (0,1)
        Tensor<double> probs = random_tensor({1, 1, 4, 4}, rng, 0.2, 0.8);
        Tensor<double> target({1, 1, 4, 4});
        std::uniform_int_distribution<int> bit(0, 1);
        for (int64_t i = 0; i < target.numel(); ++i) target[i] = bit(rng);
        auto f = [&](Tape<double>& tape, Var<double> vx) {
            return dice_loss(tape, vx, target, 1.0);
        };
        auto rep = gradcheck<double>(f, probs, step, module_tol, "dice.probs");
        result.checks.push_back({"dice_loss", rep.max_rel_err, module_tol, rep.checked});
    }

    {  // combined loss, binary then multiclass, on a 4x4 logit map
        Tensor<double> logits = random_tensor({1, 1, 4, 4}, rng, -2.0, 2.0);
        Tensor<int32_t> labels = random_labels({1, 4, 4}, 2, rng);
        auto f = [&](Tape<double>& tape, Var<double> vz) {
            return combined_loss(tape, vz, labels, LossMode::kBinary).total;
        };
        auto rep = gradcheck<double>(f, logits, step, module_tol, "combined.binary");
        result.checks.push_back({"combined_binary", rep.max_rel_err, module_tol, rep.checked});

        Tensor<double> mlogits = random_tensor({1, 3, 4, 4}, rng, -2.0, 2.0);
        Tensor<int32_t> mlabels = random_labels({1, 4, 4}, 3, rng);
        auto fm = [&](Tape<double>& tape, Var<double> vz) {
            return combined_loss(tape, vz, mlabels, LossMode::kMulticlass).total;
        };
        auto repm = gradcheck<double>(fm, mlogits, step, module_tol, "combined.multiclass");
        result.checks.push_back({"combined_multiclass", repm.max_rel_err, module_tol,
                                 repm.checked});
    }

    {  // end-to-end toy model: sampled elements of every parameter + input
        ModelConfig cfg = ModelConfig::toy(32, 16, 1, 1);
        cfg.seed = seed + 7;
        DATransUNet<double> model(cfg);
        Registry<double> reg = model.registry();
        // Wake the attention terms up: zero-initialized alpha/beta would
        // leave their branches gradient-free.
        for (auto* p : reg.parameters()) {
            if (p->name.find(".alpha") != std::string::npos) p->value[0] = 0.3;
            if (p->name.find(".beta") != std::string::npos && p->value.numel() == 1)
                p->value[0] = 0.6;
        }
        Parameter<double> input("input", random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0));
        Tensor<int32_t> labels = random_labels({1, 32, 32}, 2, rng);
        const Mode mode{true, /*update_bn=*/false, nullptr};

        auto loss_fn = [&]() {
            Tape<double> tape(false);
            Var<double> image = tape.input(input.value);
            Var<double> logits = model.forward(tape, image, mode);
            return combined_loss(tape, logits, labels, LossMode::kBinary).total.value()[0];
        };
        auto grad_fn = [&]() {
            Tape<double> tape;
            Var<double> image = tape.param(input);
            Var<double> logits = model.forward(tape, image, mode);
            tape.backward(combined_loss(tape, logits, labels, LossMode::kBinary).total);
        };
        std::vector<Parameter<double>*> params = reg.parameters();
        params.push_back(&input);
        // Smaller step than the module checks: a larger one occasionally
        // carries an activation across a ReLU kink somewhere in the network,
        // which corrupts the central difference.
        auto rep = gradcheck_params<double>(loss_fn, grad_fn, params, 1e-5, e2e_tol,
                                            e2e_samples, seed);
        result.checks.push_back({"end_to_end_toy", rep.max_rel_err, e2e_tol, rep.checked});
    }

    return result;
}

}  // namespace dtu
