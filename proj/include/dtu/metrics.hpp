#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dtu/tensor.hpp"

namespace dtu {

struct ConfusionCounts {
    int64_t tp = 0;
    int64_t fp = 0;
    int64_t fn = 0;
};

// Exact pixel counts of one class against the ground truth.
inline ConfusionCounts confusion_counts(const Tensor<int32_t>& pred,
                                        const Tensor<int32_t>& truth, int32_t cls) {
    if (!same_shape(pred, truth)) {
        throw ShapeError("confusion_counts: mask shapes differ, " + shape_str(pred.shape()) +
                         " vs " + shape_str(truth.shape()));
    }
    ConfusionCounts c;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred[i] == cls, t = truth[i] == cls;
        if (p && t) c.tp++;
        else if (p) c.fp++;
        else if (t) c.fn++;
    }
    return c;
}

// IoU = TP/(TP+FP+FN), Dice = 2TP/(2TP+FP+FN); both-empty returns (1,1).
inline std::pair<double, double> iou_and_dice(const ConfusionCounts& c) {
    if (c.tp < 0 || c.fp < 0 || c.fn < 0) throw ContractError("iou_and_dice: negative counts");
    if (c.tp + c.fp + c.fn == 0) return {1.0, 1.0};
    const double iou = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
    const double dice =
        2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    return {iou, dice};
}

enum class HausdorffVariant { kMax, kP95 };

namespace metric_detail {

// Boundary pixels: foreground with at least one 4-neighbor background;
// pixels beyond the image border count as background.
inline std::vector<uint8_t> boundary_map(const Tensor<int32_t>& mask, int64_t& count) {
    const int64_t h = mask.dim(0), w = mask.dim(1);
    std::vector<uint8_t> b(static_cast<size_t>(h * w), 0);
    count = 0;
    auto fg = [&](int64_t y, int64_t x) {
        if (y < 0 || y >= h || x < 0 || x >= w) return false;
        return mask[y * w + x] != 0;
    };
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) {
                b[static_cast<size_t>(y * w + x)] = 1;
                count++;
            }
    return b;
}

// 1-D squared-distance transform (lower envelope of parabolas).
inline void dt1d(const std::vector<double>& f, std::vector<double>& d, int64_t n) {
    std::vector<int64_t> v(static_cast<size_t>(n));
    std::vector<double> z(static_cast<size_t>(n + 1));
    int64_t k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int64_t q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int64_t p = v[static_cast<size_t>(k)];
            s = ((f[static_cast<size_t>(q)] + static_cast<double>(q * q)) -
                 (f[static_cast<size_t>(p)] + static_cast<double>(p * p))) /
                (2.0 * static_cast<double>(q - p));
            if (s <= z[static_cast<size_t>(k)]) {
                k--;
            } else {
                break;
            }
        }
        k++;
        v[static_cast<size_t>(k)] = q;
        z[static_cast<size_t>(k)] = s;
        z[static_cast<size_t>(k + 1)] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int64_t q = 0; q < n; ++q) {
        while (z[static_cast<size_t>(k + 1)] < static_cast<double>(q)) k++;
        const int64_t p = v[static_cast<size_t>(k)];
        const double dq = static_cast<double>(q - p);
        d[static_cast<size_t>(q)] = dq * dq + f[static_cast<size_t>(p)];
    }
}

// Exact Euclidean squared distance to the nearest set pixel.
inline std::vector<double> edt_squared(const std::vector<uint8_t>& set, int64_t h, int64_t w) {
    const double inf = 1e18;
    std::vector<double> grid(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) grid[static_cast<size_t>(i)] = set[static_cast<size_t>(i)] ? 0.0 : inf;
    std::vector<double> f(static_cast<size_t>(std::max(h, w)));
    std::vector<double> d(static_cast<size_t>(std::max(h, w)));
    for (int64_t x = 0; x < w; ++x) {  // columns
        for (int64_t y = 0; y < h; ++y) f[static_cast<size_t>(y)] = grid[static_cast<size_t>(y * w + x)];
        dt1d(f, d, h);
        for (int64_t y = 0; y < h; ++y) grid[static_cast<size_t>(y * w + x)] = d[static_cast<size_t>(y)];
    }
    for (int64_t y = 0; y < h; ++y) {  // rows
        for (int64_t x = 0; x < w; ++x) f[static_cast<size_t>(x)] = grid[static_cast<size_t>(y * w + x)];
        dt1d(f, d, w);
        for (int64_t x = 0; x < w; ++x) grid[static_cast<size_t>(y * w + x)] = d[static_cast<size_t>(x)];
    }
    return grid;
}

inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace metric_detail

struct HausdorffResult {
    double value = 0.0;
    bool sentinel = false;  // one side empty: value is the image diagonal
};

// Hausdorff distance between the boundary point sets of two binary masks.
// kMax is max over both directed farthest-nearest distances; kP95 replaces
// each directed max with the (linearly interpolated) 95th percentile.
inline HausdorffResult hausdorff_ex(const Tensor<int32_t>& pred, const Tensor<int32_t>& truth,
                                    HausdorffVariant variant) {
    if (!same_shape(pred, truth)) {
        throw ShapeError("hausdorff: mask shapes differ, " + shape_str(pred.shape()) + " vs " +
                         shape_str(truth.shape()));
    }
    const int64_t h = pred.dim(0), w = pred.dim(1);
    int64_t na = 0, nb = 0;
    auto ba = metric_detail::boundary_map(pred, na);
    auto bb = metric_detail::boundary_map(truth, nb);
    if (na == 0 && nb == 0) return {0.0, false};
    if (na == 0 || nb == 0) {
        return {std::hypot(static_cast<double>(h), static_cast<double>(w)), true};
    }
    auto directed = [&](const std::vector<uint8_t>& from, const std::vector<uint8_t>& to) {
        const auto dt2 = metric_detail::edt_squared(to, h, w);
        std::vector<double> dists;
        for (int64_t i = 0; i < h * w; ++i)
            if (from[static_cast<size_t>(i)]) dists.push_back(std::sqrt(dt2[static_cast<size_t>(i)]));
        return dists;
    };
    const auto dab = directed(ba, bb);
    const auto dba = directed(bb, ba);
    if (variant == HausdorffVariant::kMax) {
        const double m1 = *std::max_element(dab.begin(), dab.end());
        const double m2 = *std::max_element(dba.begin(), dba.end());
        return {std::max(m1, m2), false};
    }
    return {std::max(metric_detail::percentile(dab, 95.0), metric_detail::percentile(dba, 95.0)),
            false};
}

inline double hausdorff(const Tensor<int32_t>& pred, const Tensor<int32_t>& truth,
                        HausdorffVariant variant = HausdorffVariant::kMax) {
    return hausdorff_ex(pred, truth, variant).value;
}

struct ClassMetrics {
    int32_t cls = 0;
    double iou = 0.0;
    double dice = 0.0;
    double hd = 0.0;    // mean over slices
    double hd95 = 0.0;  // mean over slices
    int64_t tp = 0, fp = 0, fn = 0;
    int64_t slices = 0;
    int64_t sentinel_slices = 0;   // empty-vs-nonempty HD occurrences
    int64_t both_empty_slices = 0; // IoU/Dice = 1 convention applied
};

struct MetricsReport {
    std::vector<ClassMetrics> per_class;  // foreground classes only
    double mean_iou = 0.0;
    double mean_dice = 0.0;
    double mean_hd = 0.0;
    double mean_hd95 = 0.0;

    void finalize() {
        mean_iou = mean_dice = mean_hd = mean_hd95 = 0.0;
        if (per_class.empty()) return;
        for (const auto& c : per_class) {
            mean_iou += c.iou;
            mean_dice += c.dice;
            mean_hd += c.hd;
            mean_hd95 += c.hd95;
        }
        const double n = static_cast<double>(per_class.size());
        mean_iou /= n;
        mean_dice /= n;
        mean_hd /= n;
        mean_hd95 /= n;
    }
};

// Decision rule: argmax over channels (multiclass) or logit > 0 (single
// channel, equivalent to sigmoid >= 0.5).
template <typename T>
Tensor<int32_t> predict_mask(const Tensor<T>& logits_one) {
    const int64_t c = logits_one.dim(0), h = logits_one.dim(1), w = logits_one.dim(2);
    Tensor<int32_t> mask({h, w});
    const int64_t hw = h * w;
    if (c == 1) {
        for (int64_t i = 0; i < hw; ++i) mask[i] = logits_one[i] > T(0) ? 1 : 0;
    } else {
        for (int64_t i = 0; i < hw; ++i) {
            int32_t best = 0;
            T bv = logits_one[i];
            for (int64_t k = 1; k < c; ++k) {
                const T v = logits_one[k * hw + i];
                if (v > bv) {
                    bv = v;
                    best = static_cast<int32_t>(k);
                }
            }
            mask[i] = best;
        }
    }
    return mask;
}

// Per-class metrics over a batch: confusion counts aggregate across slices,
// Hausdorff distances are computed per 2-D slice and averaged.
template <typename T>
MetricsReport evaluate_batch(const Tensor<T>& logits, const Tensor<int32_t>& targets,
                             int64_t num_classes) {
    if (logits.rank() != 4) throw ShapeError("evaluate_batch: logits must be rank 4");
    const int64_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    if (targets.rank() != 3 || targets.dim(0) != n || targets.dim(1) != h || targets.dim(2) != w) {
        throw ShapeError("evaluate_batch: targets " + shape_str(targets.shape()) +
                         " do not match logits " + shape_str(logits.shape()));
    }
    const int64_t hw = h * w;

    std::vector<int32_t> classes;
    if (c == 1) {
        classes.push_back(1);
    } else {
        for (int32_t k = 1; k < static_cast<int32_t>(num_classes); ++k) classes.push_back(k);
    }

    MetricsReport rep;
    for (int32_t cls : classes) {
        ClassMetrics cm;
        cm.cls = cls;
        double hd_sum = 0.0, hd95_sum = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            Tensor<T> slice = Tensor<T>({c, h, w});
            std::copy(logits.data() + i * c * hw, logits.data() + (i + 1) * c * hw, slice.data());
            Tensor<int32_t> pred = predict_mask(slice);
            Tensor<int32_t> truth({h, w});
            std::copy(targets.data() + i * hw, targets.data() + (i + 1) * hw, truth.data());

            ConfusionCounts cc = confusion_counts(pred, truth, cls);
            cm.tp += cc.tp;
            cm.fp += cc.fp;
            cm.fn += cc.fn;
            if (cc.tp + cc.fp + cc.fn == 0) cm.both_empty_slices++;

            // Binary view of this class for the boundary metric.
            Tensor<int32_t> pb({h, w}), tb({h, w});
            for (int64_t j = 0; j < hw; ++j) {
                pb[j] = pred[j] == cls ? 1 : 0;
                tb[j] = truth[j] == cls ? 1 : 0;
            }
            HausdorffResult r1 = hausdorff_ex(pb, tb, HausdorffVariant::kMax);
            HausdorffResult r2 = hausdorff_ex(pb, tb, HausdorffVariant::kP95);
            if (r1.sentinel) cm.sentinel_slices++;
            hd_sum += r1.value;
            hd95_sum += r2.value;
            cm.slices++;
        }
        auto [iou, dice] = iou_and_dice({cm.tp, cm.fp, cm.fn});
        cm.iou = iou;
        cm.dice = dice;
        cm.hd = cm.slices ? hd_sum / static_cast<double>(cm.slices) : 0.0;
        cm.hd95 = cm.slices ? hd95_sum / static_cast<double>(cm.slices) : 0.0;
        rep.per_class.push_back(cm);
    }
    rep.finalize();
    return rep;
}

// Merge batch reports: counts add, per-slice HD averages combine weighted.
inline MetricsReport merge_reports(const std::vector<MetricsReport>& reports) {
    MetricsReport out;
    for (const auto& r : reports) {
        for (const auto& cm : r.per_class) {
            ClassMetrics* dst = nullptr;
            for (auto& e : out.per_class)
                if (e.cls == cm.cls) dst = &e;
            if (!dst) {
                out.per_class.push_back(ClassMetrics{});
                dst = &out.per_class.back();
                dst->cls = cm.cls;
            }
            dst->tp += cm.tp;
            dst->fp += cm.fp;
            dst->fn += cm.fn;
            dst->hd = (dst->hd * static_cast<double>(dst->slices) +
                       cm.hd * static_cast<double>(cm.slices));
            dst->hd95 = (dst->hd95 * static_cast<double>(dst->slices) +
                         cm.hd95 * static_cast<double>(cm.slices));
            dst->slices += cm.slices;
            dst->sentinel_slices += cm.sentinel_slices;
            dst->both_empty_slices += cm.both_empty_slices;
            if (dst->slices > 0) {
                dst->hd /= static_cast<double>(dst->slices);
                dst->hd95 /= static_cast<double>(dst->slices);
            }
        }
    }
    for (auto& cm : out.per_class) {
        auto [iou, dice] = iou_and_dice({cm.tp, cm.fp, cm.fn});
        cm.iou = iou;
        cm.dice = dice;
    }
    std::sort(out.per_class.begin(), out.per_class.end(),
              [](const ClassMetrics& a, const ClassMetrics& b) { return a.cls < b.cls; });
    out.finalize();
    return out;
}

}  // namespace dtu
