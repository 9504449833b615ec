#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dtu/tensor.hpp"

// Deliberately naive reference implementations used as test ground truth.
// Everything here is a direct loop transcription of the defining formulas
// and shares no code with the production ops. Tiny inputs only.

namespace dtu::oracle {

// 1x1 convolution written as an explicit per-pixel dot product.
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    const int64_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t oc = w.dim(0);
    Tensor<T> out({n, oc, h, wd});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < oc; ++o)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t xx = 0; xx < wd; ++xx) {
                    T acc = bias.numel() ? bias[o] : T(0);
                    for (int64_t c = 0; c < ic; ++c)
                        acc += w[(o * ic + c)] * x[((i * ic + c) * h + y) * wd + xx];
                    out[((i * oc + o) * h + y) * wd + xx] = acc;
                }
    return out;
}

// Position attention, transcribed directly as loops:
//   S[j,i] = exp(B_i . C_j) / sum_i exp(B_i . C_j)
//   E_j    = alpha * sum_i S[j,i] D_i + A_j
// B, C, D are 1x1 convolutions of A with the given kernels.
template <typename T>
Tensor<T> pam(const Tensor<T>& a, const Tensor<T>& wq, const Tensor<T>& bq, const Tensor<T>& wk,
              const Tensor<T>& bk, const Tensor<T>& wv, const Tensor<T>& bv, T alpha) {
    const int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    const int64_t npos = h * w;
    const int64_t qk = wq.dim(0);
    Tensor<T> bmap = conv1x1(a, wq, bq);
    Tensor<T> cmap = conv1x1(a, wk, bk);
    Tensor<T> dmap = conv1x1(a, wv, bv);

    Tensor<T> out({n, c, h, w});
    for (int64_t img = 0; img < n; ++img) {
        // channel-vectors per position
        auto bvec = [&](int64_t pos, int64_t ch) { return bmap[(img * qk + ch) * npos + pos]; };
        auto cvec = [&](int64_t pos, int64_t ch) { return cmap[(img * qk + ch) * npos + pos]; };
        auto dvec = [&](int64_t pos, int64_t ch) { return dmap[(img * c + ch) * npos + pos]; };

        std::vector<T> attn(static_cast<size_t>(npos * npos));
        for (int64_t j = 0; j < npos; ++j) {
            std::vector<T> logits(static_cast<size_t>(npos));
            for (int64_t i = 0; i < npos; ++i) {
                T dot = T(0);
                for (int64_t ch = 0; ch < qk; ++ch) dot += bvec(i, ch) * cvec(j, ch);
                logits[static_cast<size_t>(i)] = dot;
            }
            T mx = logits[0];
            for (T v : logits) mx = std::max(mx, v);
            T denom = T(0);
            for (int64_t i = 0; i < npos; ++i) {
                const T e = std::exp(logits[static_cast<size_t>(i)] - mx);
                attn[static_cast<size_t>(j * npos + i)] = e;
                denom += e;
            }
            for (int64_t i = 0; i < npos; ++i) attn[static_cast<size_t>(j * npos + i)] /= denom;
        }
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t j = 0; j < npos; ++j) {
                T acc = T(0);
                for (int64_t i = 0; i < npos; ++i)
                    acc += attn[static_cast<size_t>(j * npos + i)] * dvec(i, ch);
                out[(img * c + ch) * npos + j] =
                    alpha * acc + a[(img * c + ch) * npos + j];
            }
    }
    return out;
}

// The attention map alone (for row-sum and hand-computed fixtures).
template <typename T>
Tensor<T> pam_attention(const Tensor<T>& a, const Tensor<T>& wq, const Tensor<T>& bq,
                        const Tensor<T>& wk, const Tensor<T>& bk) {
    const int64_t n = a.dim(0), h = a.dim(2), w = a.dim(3);
    const int64_t npos = h * w;
    const int64_t qk = wq.dim(0);
    Tensor<T> bmap = conv1x1(a, wq, bq);
    Tensor<T> cmap = conv1x1(a, wk, bk);
    Tensor<T> attn({n, npos, npos});
    for (int64_t img = 0; img < n; ++img)
        for (int64_t j = 0; j < npos; ++j) {
            std::vector<T> logits(static_cast<size_t>(npos));
            for (int64_t i = 0; i < npos; ++i) {
                T dot = T(0);
                for (int64_t ch = 0; ch < qk; ++ch)
                    dot += bmap[(img * qk + ch) * npos + i] * cmap[(img * qk + ch) * npos + j];
                logits[static_cast<size_t>(i)] = dot;
            }
            T mx = logits[0];
            for (T v : logits) mx = std::max(mx, v);
            T denom = T(0);
            for (int64_t i = 0; i < npos; ++i) denom += std::exp(logits[static_cast<size_t>(i)] - mx);
            for (int64_t i = 0; i < npos; ++i)
                attn[(img * npos + j) * npos + i] = std::exp(logits[static_cast<size_t>(i)] - mx) / denom;
        }
    return attn;
}

// Channel attention:
//   X[j,i] = exp(A_i . A_j) / sum_i exp(A_i . A_j)   (dot over positions)
//   E_j    = beta * sum_i X[j,i] A_i + A_j
template <typename T>
Tensor<T> cam(const Tensor<T>& a, T beta) {
    const int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    const int64_t npos = h * w;
    Tensor<T> out({n, c, h, w});
    for (int64_t img = 0; img < n; ++img) {
        std::vector<T> attn(static_cast<size_t>(c * c));
        for (int64_t j = 0; j < c; ++j) {
            std::vector<T> logits(static_cast<size_t>(c));
            for (int64_t i = 0; i < c; ++i) {
                T dot = T(0);
                for (int64_t p = 0; p < npos; ++p)
                    dot += a[(img * c + i) * npos + p] * a[(img * c + j) * npos + p];
                logits[static_cast<size_t>(i)] = dot;
            }
            T mx = logits[0];
            for (T v : logits) mx = std::max(mx, v);
            T denom = T(0);
            for (int64_t i = 0; i < c; ++i) {
                const T e = std::exp(logits[static_cast<size_t>(i)] - mx);
                attn[static_cast<size_t>(j * c + i)] = e;
                denom += e;
            }
            for (int64_t i = 0; i < c; ++i) attn[static_cast<size_t>(j * c + i)] /= denom;
        }
        for (int64_t j = 0; j < c; ++j)
            for (int64_t p = 0; p < npos; ++p) {
                T acc = T(0);
                for (int64_t i = 0; i < c; ++i)
                    acc += attn[static_cast<size_t>(j * c + i)] * a[(img * c + i) * npos + p];
                out[(img * c + j) * npos + p] = beta * acc + a[(img * c + j) * npos + p];
            }
    }
    return out;
}

// Naive per-head scaled dot-product attention for (n, t, hidden) tokens.
// wq/wk/wv/wo are (hidden, hidden) with (hidden) biases.
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& x, int64_t heads, const Tensor<T>& wq,
                              const Tensor<T>& bq, const Tensor<T>& wk, const Tensor<T>& bk,
                              const Tensor<T>& wv, const Tensor<T>& bv, const Tensor<T>& wo,
                              const Tensor<T>& bo) {
    const int64_t n = x.dim(0), t = x.dim(1), hid = x.dim(2);
    const int64_t dh = hid / heads;
    auto project = [&](const Tensor<T>& w, const Tensor<T>& b, int64_t img, int64_t tok,
                       int64_t out_dim, std::vector<T>& dst) {
        for (int64_t o = 0; o < out_dim; ++o) {
            T acc = b[o];
            for (int64_t i = 0; i < hid; ++i) acc += x[(img * t + tok) * hid + i] * w[i * out_dim + o];
            dst[static_cast<size_t>(o)] = acc;
        }
    };

    Tensor<T> out({n, t, hid});
    std::vector<T> q(static_cast<size_t>(hid)), k(static_cast<size_t>(hid)),
        v(static_cast<size_t>(hid));
    for (int64_t img = 0; img < n; ++img) {
        std::vector<T> qs(static_cast<size_t>(t * hid)), ks(static_cast<size_t>(t * hid)),
            vs(static_cast<size_t>(t * hid));
        for (int64_t tok = 0; tok < t; ++tok) {
            project(wq, bq, img, tok, hid, q);
            project(wk, bk, img, tok, hid, k);
            project(wv, bv, img, tok, hid, v);
            std::copy(q.begin(), q.end(), qs.begin() + tok * hid);
            std::copy(k.begin(), k.end(), ks.begin() + tok * hid);
            std::copy(v.begin(), v.end(), vs.begin() + tok * hid);
        }
        std::vector<T> ctx(static_cast<size_t>(t * hid), T(0));
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        for (int64_t hh = 0; hh < heads; ++hh) {
            for (int64_t j = 0; j < t; ++j) {
                std::vector<T> logits(static_cast<size_t>(t));
                for (int64_t i = 0; i < t; ++i) {
                    T dot = T(0);
                    for (int64_t d = 0; d < dh; ++d)
                        dot += qs[static_cast<size_t>(j * hid + hh * dh + d)] *
                               ks[static_cast<size_t>(i * hid + hh * dh + d)];
                    logits[static_cast<size_t>(i)] = dot * scale;
                }
                T mx = logits[0];
                for (T lv : logits) mx = std::max(mx, lv);
                T denom = T(0);
                for (int64_t i = 0; i < t; ++i) denom += std::exp(logits[static_cast<size_t>(i)] - mx);
                for (int64_t i = 0; i < t; ++i) {
                    const T wgt = std::exp(logits[static_cast<size_t>(i)] - mx) / denom;
                    for (int64_t d = 0; d < dh; ++d)
                        ctx[static_cast<size_t>(j * hid + hh * dh + d)] +=
                            wgt * vs[static_cast<size_t>(i * hid + hh * dh + d)];
                }
            }
        }
        for (int64_t tok = 0; tok < t; ++tok)
            for (int64_t o = 0; o < hid; ++o) {
                T acc = bo[o];
                for (int64_t i = 0; i < hid; ++i)
                    acc += ctx[static_cast<size_t>(tok * hid + i)] * wo[i * hid + o];
                out[(img * t + tok) * hid + o] = acc;
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Set-based segmentation metrics on tiny masks
// ---------------------------------------------------------------------------

struct OracleMetrics {
    double iou = 0.0;
    double dice = 0.0;
    double hd = 0.0;
    double hd95 = 0.0;
    int64_t tp = 0, fp = 0, fn = 0;
};

inline std::vector<std::pair<int64_t, int64_t>> boundary_points(const Tensor<int32_t>& mask) {
    const int64_t h = mask.dim(0), w = mask.dim(1);
    auto fg = [&](int64_t y, int64_t x) {
        if (y < 0 || y >= h || x < 0 || x >= w) return false;
        return mask[y * w + x] != 0;
    };
    std::vector<std::pair<int64_t, int64_t>> pts;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)))
                pts.emplace_back(y, x);
    return pts;
}

inline double percentile_linear(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

// Exhaustive all-pairs directed distances; returns (max, p95) of each
// direction combined per the Hausdorff definition.
inline std::pair<double, double> hausdorff_bruteforce(const Tensor<int32_t>& a,
                                                      const Tensor<int32_t>& b) {
    auto pa = boundary_points(a);
    auto pb = boundary_points(b);
    if (pa.empty() && pb.empty()) return {0.0, 0.0};
    if (pa.empty() || pb.empty()) {
        const double diag = std::hypot(static_cast<double>(a.dim(0)), static_cast<double>(a.dim(1)));
        return {diag, diag};
    }
    auto directed = [](const std::vector<std::pair<int64_t, int64_t>>& from,
                       const std::vector<std::pair<int64_t, int64_t>>& to) {
        std::vector<double> dists;
        dists.reserve(from.size());
        for (auto& f : from) {
            double best = std::numeric_limits<double>::infinity();
            for (auto& t : to) {
                const double dy = static_cast<double>(f.first - t.first);
                const double dx = static_cast<double>(f.second - t.second);
                best = std::min(best, std::sqrt(dy * dy + dx * dx));
            }
            dists.push_back(best);
        }
        return dists;
    };
    auto dab = directed(pa, pb);
    auto dba = directed(pb, pa);
    const double max_ab = *std::max_element(dab.begin(), dab.end());
    const double max_ba = *std::max_element(dba.begin(), dba.end());
    const double p95 = std::max(percentile_linear(dab, 95.0), percentile_linear(dba, 95.0));
    return {std::max(max_ab, max_ba), p95};
}

// IoU / Dice / HD for one binary class by direct set counting.
inline OracleMetrics metrics(const Tensor<int32_t>& pred, const Tensor<int32_t>& truth) {
    OracleMetrics m;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        if (p && t) m.tp++;
        else if (p && !t) m.fp++;
        else if (!p && t) m.fn++;
    }
    if (m.tp + m.fp + m.fn == 0) {
        m.iou = 1.0;
        m.dice = 1.0;
    } else {
        m.iou = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp + m.fn);
        m.dice = 2.0 * static_cast<double>(m.tp) / static_cast<double>(2 * m.tp + m.fp + m.fn);
    }
    auto [hd, hd95] = hausdorff_bruteforce(pred, truth);
    m.hd = hd;
    m.hd95 = hd95;
    return m;
}

}  // namespace dtu::oracle
