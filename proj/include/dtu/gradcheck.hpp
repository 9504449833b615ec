#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtu/ops.hpp"
#include "dtu/tape.hpp"
#include "dtu/tensor.hpp"

namespace dtu {

struct GradCheckEntry {
    std::string name;     // parameter / input name
    int64_t index;        // flat element index
    double analytic;
    double numeric;
    double rel_err;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    GradCheckEntry worst;
    size_t checked = 0;
    std::vector<GradCheckEntry> breaches;  // entries exceeding tolerance

    bool ok() const { return breaches.empty(); }
};

namespace detail {

// Relative error with an absolute floor so near-zero gradients compare
// absolutely instead of blowing up the ratio. With tolerance rtol this gives
// |a-b| <= rtol*max(|a|,|b|, floor), i.e. an effective atol of rtol*floor.
inline double rel_err(double a, double b, double floor_den) {
    const double den = std::max({std::abs(a), std::abs(b), floor_den});
    return std::abs(a - b) / den;
}

// Central differences at 32-bit carry ~1e-5 absolute noise from rounding of
// the forward values, so small gradients are compared absolutely there.
template <typename T>
constexpr double default_den_floor() {
    return sizeof(T) == 8 ? 1e-6 : 1e-1;
}

}  // namespace detail

// Compare reverse-mode gradients of a scalar-valued function against central
// finite differences, element by element. f receives a fresh tape and the
// input leaf; it must return a 1-element Var on that tape.
template <typename T, typename F>
GradCheckReport gradcheck(F f, const Tensor<T>& x, T step, double tolerance,
                          const std::string& name = "x") {
    if (!(step > T(0))) throw ContractError("gradcheck: step must be > 0");
    Tensor<T> analytic;
    {
        Tape<T> tape;
        Var<T> vx = tape.input(x.clone(), /*requires_grad=*/true);
        Var<T> y = f(tape, vx);
        if (y.value().numel() != 1) {
            throw ContractError("gradcheck: function output must be scalar, got shape " +
                                shape_str(y.value().shape()));
        }
        tape.backward(y);
        analytic = vx.grad().clone();
    }

    auto eval = [&](const Tensor<T>& p) -> T {
        Tape<T> tape(/*grad_enabled=*/false);
        Var<T> vx = tape.input(p);
        Var<T> y = f(tape, vx);
        return y.value()[0];
    };

    GradCheckReport rep;
    Tensor<T> probe = x.clone();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T orig = probe[i];
        const T h = step * (T(1) + std::abs(orig));
        probe[i] = orig + h;
        const T fp = eval(probe);
        probe[i] = orig - h;
        const T fm = eval(probe);
        probe[i] = orig;
        const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                               (2.0 * static_cast<double>(h));
        const double a = static_cast<double>(analytic[i]);
        const double re = detail::rel_err(a, numeric, detail::default_den_floor<T>());
        rep.checked++;
        GradCheckEntry e{name, i, a, numeric, re};
        if (re > rep.max_rel_err) {
            rep.max_rel_err = re;
            rep.worst = e;
        }
        if (re > tolerance) rep.breaches.push_back(e);
    }
    return rep;
}

// Finite-difference check of d(loss)/d(parameters) for a model-style closure.
// loss_fn must be deterministic and must read parameter values from the given
// Parameter objects on each call. Checks `samples` elements per parameter
// (all of them when samples == 0), chosen with a fixed-seed RNG.
template <typename T>
GradCheckReport gradcheck_params(const std::function<T()>& loss_fn,
                                 const std::function<void()>& grad_fn,
                                 std::vector<Parameter<T>*> params, T step, double tolerance,
                                 size_t samples = 0, uint64_t seed = 0x5eed) {
    for (auto* p : params) p->zero_grad();
    grad_fn();  // populates p->grad via one reverse-mode pass

    std::mt19937_64 rng(seed);
    GradCheckReport rep;
    for (auto* p : params) {
        const int64_t n = p->value.numel();
        std::vector<int64_t> picks;
        if (samples == 0 || static_cast<int64_t>(samples) >= n) {
            picks.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) picks[static_cast<size_t>(i)] = i;
        } else {
            std::uniform_int_distribution<int64_t> dist(0, n - 1);
            for (size_t i = 0; i < samples; ++i) picks.push_back(dist(rng));
        }
        for (int64_t i : picks) {
            const T orig = p->value[i];
            const T h = step * (T(1) + std::abs(orig));
            p->value[i] = orig + h;
            const T fp = loss_fn();
            p->value[i] = orig - h;
            const T fm = loss_fn();
            p->value[i] = orig;
            const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                                   (2.0 * static_cast<double>(h));
            const double a = static_cast<double>(p->grad[i]);
            const double re = detail::rel_err(a, numeric, detail::default_den_floor<T>());
            rep.checked++;
            GradCheckEntry e{p->name, i, a, numeric, re};
            if (re > rep.max_rel_err) {
                rep.max_rel_err = re;
                rep.worst = e;
            }
            if (re > tolerance) rep.breaches.push_back(e);
        }
    }
    return rep;
}

}  // namespace dtu
