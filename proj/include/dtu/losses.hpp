#pragma once

#include <string>

#include "dtu/ops.hpp"
#include "dtu/tape.hpp"

namespace dtu {

enum class LossMode { kBinary, kMulticlass };

inline const char* loss_mode_name(LossMode m) {
    return m == LossMode::kBinary ? "binary" : "multiclass";
}

// total = 0.5 * primary + 0.5 * dice, where primary is BCE (binary head)
// or pixel cross-entropy (multiclass head).
template <typename T>
struct LossParts {
    Var<T> total;
    Var<T> primary;
    Var<T> dice;
};

// Soft Dice loss: 1 - mean over (batch, class) of
//   (2 * sum(p*t) + smooth) / (sum(p) + sum(t) + smooth),
// sums taken over the spatial extent. target must be binary / one-hot and
// match the probability shape.
template <typename T>
Var<T> dice_loss(Tape<T>& tape, Var<T> probs, const Tensor<T>& target, T smooth = T(1)) {
    const Tensor<T>& pv = probs.value();
    detail::require_rank("dice_loss", pv, 4);
    detail::require_same_shape("dice_loss", pv, target);
    if (smooth < T(0)) throw ContractError("dice_loss: smooth must be >= 0");
    const T* p = pv.data();
    for (int64_t i = 0; i < pv.numel(); ++i) {
        if (p[i] < T(-1e-6) || p[i] > T(1) + T(1e-6)) {
            throw ContractError("dice_loss: probability " + std::to_string(static_cast<double>(p[i])) +
                                " outside [0,1] at flat index " + std::to_string(i));
        }
    }
    Var<T> t = tape.input(target);
    Var<T> inter = sum_axes(mul(probs, t), {2, 3});       // (n, c)
    Var<T> psum = sum_axes(probs, {2, 3});
    Var<T> tsum = sum_axes(t, {2, 3});
    Var<T> num = add_const(scale(inter, T(2)), smooth);
    Var<T> den = add_const(add(psum, tsum), smooth);
    Var<T> dice = mean_all(div(num, den));
    return add_const(scale(dice, T(-1)), T(1));
}

// One-hot encode integer labels (n,h,w) against C classes.
template <typename T>
Tensor<T> one_hot(const Tensor<int32_t>& labels, int64_t num_classes) {
    const int64_t n = labels.dim(0), h = labels.dim(1), w = labels.dim(2);
    Tensor<T> out({n, num_classes, h, w});
    const int64_t hw = h * w;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < hw; ++j) {
            const int32_t y = labels[i * hw + j];
            if (y < 0 || y >= num_classes) {
                throw DataError("one_hot: label " + std::to_string(y) + " out of range for " +
                                std::to_string(num_classes) + " classes");
            }
            out[(i * num_classes + y) * hw + j] = T(1);
        }
    return out;
}

// Combined objective. Binary mode expects single-channel logits (sigmoid
// decision); multiclass expects per-class logits (softmax decision).
template <typename T>
LossParts<T> combined_loss(Tape<T>& tape, Var<T> logits, const Tensor<int32_t>& labels,
                           LossMode mode, T smooth = T(1)) {
    const Tensor<T>& zv = logits.value();
    detail::require_rank("combined_loss", zv, 4);
    const int64_t n = zv.dim(0), c = zv.dim(1), h = zv.dim(2), w = zv.dim(3);
    if (labels.rank() != 3 || labels.dim(0) != n || labels.dim(1) != h || labels.dim(2) != w) {
        throw ShapeError("combined_loss: labels " + shape_str(labels.shape()) +
                         " do not match logits " + shape_str(zv.shape()));
    }

    Var<T> primary, dice;
    if (mode == LossMode::kBinary) {
        if (c != 1) {
            throw ShapeError("combined_loss: binary mode needs single-channel logits, got " +
                             shape_str(zv.shape()));
        }
        for (int64_t i = 0; i < labels.numel(); ++i) {
            if (labels[i] < 0 || labels[i] > 1) {
                throw DataError("combined_loss: binary target has label " +
                                std::to_string(labels[i]));
            }
        }
        Tensor<T> target = labels.template cast<T>().reshaped({n, 1, h, w});
        primary = bce_with_logits(logits, target);
        dice = dice_loss(tape, sigmoid(logits), target, smooth);
    } else {
        if (c < 2) {
            throw ShapeError("combined_loss: multiclass mode needs >= 2 channels, got " +
                             shape_str(zv.shape()));
        }
        primary = ce_with_logits(logits, labels);
        Tensor<T> target = one_hot<T>(labels, c);
        dice = dice_loss(tape, softmax(logits, 1), target, smooth);
    }
    Var<T> total = scale(add(primary, dice), T(0.5));
    return {total, primary, dice};
}

}  // namespace dtu
