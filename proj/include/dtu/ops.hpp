#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dtu/kernels.hpp"
#include "dtu/tape.hpp"
#include "dtu/tensor.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and
// records a closure that accumulates exact gradients into its inputs.
// Shapes must match exactly; the only broadcast allowed is a 1-element tensor
// against any shape in the elementwise ops, plus bias_add's suffix rule.

namespace dtu {

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!same_shape(a, b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, int rank) {
    if (a.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(a.shape()));
    }
}

inline bool is_scalar_shape(int64_t numel) { return numel == 1; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (exact shapes, or a 1-element scalar on either side)
// ---------------------------------------------------------------------------

enum class EwKind { kAdd, kSub, kMul, kDiv };

template <typename T>
Var<T> ewise(const char* name, EwKind kind, Var<T> a, Var<T> b) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const bool sa = detail::is_scalar_shape(av.numel());
    const bool sb = detail::is_scalar_shape(bv.numel());
    if (!sa && !sb) detail::require_same_shape(name, av, bv);

    const Tensor<T>& big = sa ? bv : av;
    Tensor<T> out(big.shape());
    const int64_t n = big.numel();
    T* o = out.data();
    const T* pa = av.data();
    const T* pb = bv.data();
    for (int64_t i = 0; i < n; ++i) {
        const T x = pa[sa ? 0 : i];
        const T y = pb[sb ? 0 : i];
        switch (kind) {
            case EwKind::kAdd: o[i] = x + y; break;
            case EwKind::kSub: o[i] = x - y; break;
            case EwKind::kMul: o[i] = x * y; break;
            case EwKind::kDiv: o[i] = x / y; break;
        }
    }
    return tape.emit(name, std::move(out), {a.id, b.id},
                     [=](Tape<T>& t, int self) {
                         const Tensor<T>& g = t.grad(self);
                         const Tensor<T>& xv = t.value(a.id);
                         const Tensor<T>& yv = t.value(b.id);
                         const T* pg = g.data();
                         const T* px = xv.data();
                         const T* py = yv.data();
                         const int64_t m = g.numel();
                         if (t.requires_grad(a.id)) {
                             Tensor<T>& da = t.grad(a.id);
                             T* pda = da.data();
                             for (int64_t i = 0; i < m; ++i) {
                                 const T y = py[sb ? 0 : i];
                                 T gi;
                                 switch (kind) {
                                     case EwKind::kAdd: gi = pg[i]; break;
                                     case EwKind::kSub: gi = pg[i]; break;
                                     case EwKind::kMul: gi = pg[i] * y; break;
                                     case EwKind::kDiv: gi = pg[i] / y; break;
                                 }
                                 pda[sa ? 0 : i] += gi;
                             }
                         }
                         if (t.requires_grad(b.id)) {
                             Tensor<T>& db = t.grad(b.id);
                             T* pdb = db.data();
                             for (int64_t i = 0; i < m; ++i) {
                                 const T x = px[sa ? 0 : i];
                                 const T y = py[sb ? 0 : i];
                                 T gi;
                                 switch (kind) {
                                     case EwKind::kAdd: gi = pg[i]; break;
                                     case EwKind::kSub: gi = -pg[i]; break;
                                     case EwKind::kMul: gi = pg[i] * x; break;
                                     case EwKind::kDiv: gi = -pg[i] * x / (y * y); break;
                                 }
                                 pdb[sb ? 0 : i] += gi;
                             }
                         }
                     });
}

template <typename T> Var<T> add(Var<T> a, Var<T> b) { return ewise("add", EwKind::kAdd, a, b); }
template <typename T> Var<T> sub(Var<T> a, Var<T> b) { return ewise("sub", EwKind::kSub, a, b); }
template <typename T> Var<T> mul(Var<T> a, Var<T> b) { return ewise("mul", EwKind::kMul, a, b); }
template <typename T> Var<T> div(Var<T> a, Var<T> b) { return ewise("div", EwKind::kDiv, a, b); }

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out(a.value().shape());
    const T* p = a.value().data();
    T* o = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) o[i] = p[i] * c;
    return a.tape->emit("scale", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const T* g = t.grad(self).data();
        T* da = t.grad(a.id).data();
        for (int64_t i = 0; i < t.value(a.id).numel(); ++i) da[i] += g[i] * c;
    });
}

template <typename T>
Var<T> add_const(Var<T> a, T c) {
    Tensor<T> out(a.value().shape());
    const T* p = a.value().data();
    T* o = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) o[i] = p[i] + c;
    return a.tape->emit("add_const", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        t.accumulate_grad(a.id, t.grad(self));
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out(a.value().shape());
    const T* p = a.value().data();
    T* o = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) o[i] = p[i] > T(0) ? p[i] : T(0);
    return a.tape->emit("relu", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const T* g = t.grad(self).data();
        const T* x = t.value(a.id).data();
        T* da = t.grad(a.id).data();
        for (int64_t i = 0; i < t.value(a.id).numel(); ++i)
            if (x[i] > T(0)) da[i] += g[i];
    });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    const T inv_sqrt2 = T(0.7071067811865475244);
    const T inv_sqrt2pi = T(0.3989422804014326779);
    Tensor<T> out(a.value().shape());
    const T* p = a.value().data();
    T* o = out.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        o[i] = T(0.5) * p[i] * (T(1) + std::erf(p[i] * inv_sqrt2));
    return a.tape->emit("gelu", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const T* g = t.grad(self).data();
        const T* x = t.value(a.id).data();
        T* da = t.grad(a.id).data();
        for (int64_t i = 0; i < t.value(a.id).numel(); ++i) {
            const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
            da[i] += g[i] * (cdf + x[i] * pdf);
        }
    });
}

template <typename T>
inline T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    Tensor<T> out(a.value().shape());
    const T* p = a.value().data();
    T* o = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) o[i] = stable_sigmoid(p[i]);
    return a.tape->emit("sigmoid", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const T* g = t.grad(self).data();
        const T* y = t.value(self).data();
        T* da = t.grad(a.id).data();
        for (int64_t i = 0; i < t.value(self).numel(); ++i)
            da[i] += g[i] * y[i] * (T(1) - y[i]);
    });
}

// ---------------------------------------------------------------------------
// Softmax along one axis (numerically stable: per-slice max is subtracted)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> a, int axis) {
    const Tensor<T>& av = a.value();
    if (axis < 0 || axis >= av.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(av.shape()));
    }
    int64_t outer = 1, inner = 1;
    const int64_t len = av.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= av.dim(i);
    for (int i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);

    Tensor<T> out(av.shape());
    const T* p = av.data();
    T* o = out.data();
    for (int64_t ou = 0; ou < outer; ++ou) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = ou * len * inner + in;
            T mx = p[base];
            for (int64_t l = 1; l < len; ++l) mx = std::max(mx, p[base + l * inner]);
            T sum = T(0);
            for (int64_t l = 0; l < len; ++l) {
                const T e = std::exp(p[base + l * inner] - mx);
                o[base + l * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t l = 0; l < len; ++l) o[base + l * inner] *= inv;
        }
    }
    return a.tape->emit("softmax", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const T* g = t.grad(self).data();
        const T* y = t.value(self).data();
        T* da = t.grad(a.id).data();
        for (int64_t ou = 0; ou < outer; ++ou) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = ou * len * inner + in;
                T dot = T(0);
                for (int64_t l = 0; l < len; ++l) {
                    const int64_t k = base + l * inner;
                    dot += g[k] * y[k];
                }
                for (int64_t l = 0; l < len; ++l) {
                    const int64_t k = base + l * inner;
                    da[k] += y[k] * (g[k] - dot);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));  // shares the buffer
    const Shape in_shape = a.value().shape();
    return a.tape->emit("reshape", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        t.accumulate_grad(a.id, t.grad(self).reshaped(in_shape));
    });
}

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
    Tensor<T> out(out_shape);
    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.dim(i + 1);
    std::vector<int64_t> gather(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) gather[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    const T* src = x.data();
    T* dst = out.data();
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const int64_t n = x.numel();
    int64_t src_off = 0;
    for (int64_t i = 0; i < n; ++i) {
        dst[i] = src[src_off];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            src_off += gather[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
            src_off -= gather[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return out;
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<int> perm) {
    const Tensor<T>& av = a.value();
    if (static_cast<int>(perm.size()) != av.rank()) {
        throw ShapeError("permute: axes count " + std::to_string(perm.size()) +
                         " does not match rank of " + shape_str(av.shape()));
    }
    Tensor<T> out = permute_tensor(av, perm);
    return a.tape->emit("permute", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        t.accumulate_grad(a.id, permute_tensor(t.grad(self), inv));
    });
}

// Swap the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Var<T> transpose2(Var<T> a) {
    const int r = a.value().rank();
    if (r < 2) throw ShapeError("transpose2: need rank >= 2, got " + shape_str(a.value().shape()));
    std::vector<int> perm(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) perm[static_cast<size_t>(i)] = i;
    std::swap(perm[static_cast<size_t>(r - 1)], perm[static_cast<size_t>(r - 2)]);
    return permute(a, perm);
}

// Concatenate two rank-4 maps along the channel axis.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    detail::require_rank("concat_channels", av, 4);
    detail::require_rank("concat_channels", bv, 4);
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(av.shape()) +
                         " vs " + shape_str(bv.shape()));
    }
    const int64_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), hw = av.dim(2) * av.dim(3);
    Tensor<T> out({n, ca + cb, av.dim(2), av.dim(3)});
    T* o = out.data();
    const T* pa = av.data();
    const T* pb = bv.data();
    for (int64_t i = 0; i < n; ++i) {
        std::copy(pa + i * ca * hw, pa + (i + 1) * ca * hw, o + i * (ca + cb) * hw);
        std::copy(pb + i * cb * hw, pb + (i + 1) * cb * hw, o + (i * (ca + cb) + ca) * hw);
    }
    return a.tape->emit("concat_channels", std::move(out), {a.id, b.id},
                        [=](Tape<T>& t, int self) {
                            const T* g = t.grad(self).data();
                            if (t.requires_grad(a.id)) {
                                T* da = t.grad(a.id).data();
                                for (int64_t i = 0; i < n; ++i)
                                    for (int64_t j = 0; j < ca * hw; ++j)
                                        da[i * ca * hw + j] += g[i * (ca + cb) * hw + j];
                            }
                            if (t.requires_grad(b.id)) {
                                T* db = t.grad(b.id).data();
                                for (int64_t i = 0; i < n; ++i)
                                    for (int64_t j = 0; j < cb * hw; ++j)
                                        db[i * cb * hw + j] += g[(i * (ca + cb) + ca) * hw + j];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    detail::require_rank("matmul", av, 2);
    detail::require_rank("matmul", bv, 2);
    if (av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul: inner extents disagree, " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
    }
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out({m, n});
    kernels::mm_nn(av.data(), bv.data(), out.data(), m, k, n);
    return a.tape->emit("matmul", std::move(out), {a.id, b.id}, [=](Tape<T>& t, int self) {
        const T* g = t.grad(self).data();
        if (t.requires_grad(a.id))
            kernels::mm_nt(g, t.value(b.id).data(), t.grad(a.id).data(), m, n, k);
        if (t.requires_grad(b.id))
            kernels::mm_tn(t.value(a.id).data(), g, t.grad(b.id).data(), m, k, n);
    });
}

// Batched matmul: (b,m,k) x (b,k,n) -> (b,m,n).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    detail::require_rank("bmm", av, 3);
    detail::require_rank("bmm", bv, 3);
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1)) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
    }
    const int64_t bb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    Tensor<T> out({bb, m, n});
    for (int64_t i = 0; i < bb; ++i)
        kernels::mm_nn(av.data() + i * m * k, bv.data() + i * k * n, out.data() + i * m * n, m, k, n);
    return a.tape->emit("bmm", std::move(out), {a.id, b.id}, [=](Tape<T>& t, int self) {
        const T* g = t.grad(self).data();
        for (int64_t i = 0; i < bb; ++i) {
            if (t.requires_grad(a.id))
                kernels::mm_nt(g + i * m * n, t.value(b.id).data() + i * k * n,
                               t.grad(a.id).data() + i * m * k, m, n, k);
            if (t.requires_grad(b.id))
                kernels::mm_tn(t.value(a.id).data() + i * m * k, g + i * m * n,
                               t.grad(b.id).data() + i * k * n, m, k, n);
        }
    });
}

// ---------------------------------------------------------------------------
// Bias add: b's shape must equal a suffix of x's shape
// ---------------------------------------------------------------------------

template <typename T>
Var<T> bias_add(Var<T> x, Var<T> b) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& bv = b.value();
    const int rx = xv.rank(), rb = bv.rank();
    if (rb > rx) throw ShapeError("bias_add: bias rank exceeds input rank");
    for (int i = 0; i < rb; ++i) {
        if (bv.dim(i) != xv.dim(rx - rb + i)) {
            throw ShapeError("bias_add: bias " + shape_str(bv.shape()) +
                             " is not a suffix of " + shape_str(xv.shape()));
        }
    }
    const int64_t bn = bv.numel();
    const int64_t reps = xv.numel() / bn;
    Tensor<T> out(xv.shape());
    const T* px = xv.data();
    const T* pb = bv.data();
    T* o = out.data();
    for (int64_t r = 0; r < reps; ++r)
        for (int64_t i = 0; i < bn; ++i) o[r * bn + i] = px[r * bn + i] + pb[i];
    return x.tape->emit("bias_add", std::move(out), {x.id, b.id}, [=](Tape<T>& t, int self) {
        const T* g = t.grad(self).data();
        if (t.requires_grad(x.id)) t.accumulate_grad(x.id, t.grad(self));
        if (t.requires_grad(b.id)) {
            T* db = t.grad(b.id).data();
            for (int64_t r = 0; r < reps; ++r)
                for (int64_t i = 0; i < bn; ++i) db[i] += g[r * bn + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> a) {
    const Tensor<T>& av = a.value();
    T s = T(0);
    const T* p = av.data();
    for (int64_t i = 0; i < av.numel(); ++i) s += p[i];
    return a.tape->emit("sum_all", Tensor<T>::scalar(s), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const T g = t.grad(self)[0];
        T* da = t.grad(a.id).data();
        for (int64_t i = 0; i < t.value(a.id).numel(); ++i) da[i] += g;
    });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    const int64_t n = a.value().numel();
    if (n == 0) throw ShapeError("mean_all: empty tensor");
    return scale(sum_all(a), T(1) / static_cast<T>(n));
}

// Sum over a sorted list of axes; reduced axes are dropped from the shape.
template <typename T>
Var<T> sum_axes(Var<T> a, std::vector<int> axes) {
    const Tensor<T>& av = a.value();
    const int r = av.rank();
    std::vector<bool> reduced(static_cast<size_t>(r), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= r) throw ShapeError("sum_axes: axis out of range");
        reduced[static_cast<size_t>(ax)] = true;
    }
    Shape out_shape;
    for (int i = 0; i < r; ++i)
        if (!reduced[static_cast<size_t>(i)]) out_shape.push_back(av.dim(i));
    if (out_shape.empty()) out_shape = {1};

    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * av.dim(i + 1);
    // Output stride per input axis (0 for reduced axes).
    std::vector<int64_t> out_stride_per_axis(static_cast<size_t>(r), 0);
    int64_t os = 1;
    for (int i = r - 1; i >= 0; --i) {
        if (!reduced[static_cast<size_t>(i)]) {
            out_stride_per_axis[static_cast<size_t>(i)] = os;
            os *= av.dim(i);
        }
    }

    Tensor<T> out(out_shape);
    const T* p = av.data();
    T* o = out.data();
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t out_off = 0;
    for (int64_t i = 0; i < av.numel(); ++i) {
        o[out_off] += p[i];
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            out_off += out_stride_per_axis[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < av.dim(d)) break;
            out_off -= out_stride_per_axis[static_cast<size_t>(d)] * av.dim(d);
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return a.tape->emit("sum_axes", std::move(out), {a.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const T* g = t.grad(self).data();
        T* da = t.grad(a.id).data();
        const Tensor<T>& xv = t.value(a.id);
        std::vector<int64_t> ix(static_cast<size_t>(r), 0);
        int64_t goff = 0;
        for (int64_t i = 0; i < xv.numel(); ++i) {
            da[i] += g[goff];
            for (int d = r - 1; d >= 0; --d) {
                ix[static_cast<size_t>(d)]++;
                goff += out_stride_per_axis[static_cast<size_t>(d)];
                if (ix[static_cast<size_t>(d)] < xv.dim(d)) break;
                goff -= out_stride_per_axis[static_cast<size_t>(d)] * xv.dim(d);
                ix[static_cast<size_t>(d)] = 0;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 2-D convolution (NCHW, square kernel, symmetric stride/padding)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T>* bias, int64_t stride, int64_t pad) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    detail::require_rank("conv2d input", xv, 4);
    detail::require_rank("conv2d weight", wv, 4);
    if (xv.dim(1) != wv.dim(1)) {
        throw ShapeError("conv2d: input channels " + shape_str(xv.shape()) +
                         " do not match weight " + shape_str(wv.shape()));
    }
    const int64_t n = xv.dim(0), ic = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    const int64_t oc = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    const int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) {
        throw ShapeError("conv2d: kernel " + shape_str(wv.shape()) + " too large for input " +
                         shape_str(xv.shape()));
    }
    if (bias && bias->value().numel() != oc) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias->value().shape()) +
                         " does not match " + std::to_string(oc) + " output channels");
    }

    const int64_t ckk = ic * kh * kw;
    Tensor<T> out({n, oc, oh, ow});
    std::vector<T> cols(static_cast<size_t>(ckk * oh * ow));
    for (int64_t i = 0; i < n; ++i) {
        kernels::im2col(xv.data() + i * ic * h * wd, ic, h, wd, kh, kw, stride, pad, oh, ow,
                        cols.data());
        kernels::mm_nn(wv.data(), cols.data(), out.data() + i * oc * oh * ow, oc, ckk, oh * ow);
    }
    if (bias) {
        const T* pb = bias->value().data();
        T* o = out.data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < oc; ++c) {
                const T bv = pb[c];
                T* row = o + (i * oc + c) * oh * ow;
                for (int64_t j = 0; j < oh * ow; ++j) row[j] += bv;
            }
    }

    std::vector<int> parents = {x.id, w.id};
    const int bias_id = bias ? bias->id : -1;
    if (bias) parents.push_back(bias_id);
    return x.tape->emit("conv2d", std::move(out), parents, [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xval = t.value(x.id);
        const Tensor<T>& wval = t.value(w.id);
        std::vector<T> cols2(static_cast<size_t>(ckk * oh * ow));
        const bool need_dx = t.requires_grad(x.id);
        const bool need_dw = t.requires_grad(w.id);
        for (int64_t i = 0; i < n; ++i) {
            const T* gslice = g.data() + i * oc * oh * ow;
            if (need_dw) {
                kernels::im2col(xval.data() + i * ic * h * wd, ic, h, wd, kh, kw, stride, pad,
                                oh, ow, cols2.data());
                kernels::mm_nt(gslice, cols2.data(), t.grad(w.id).data(), oc, oh * ow, ckk);
            }
            if (need_dx) {
                std::fill(cols2.begin(), cols2.end(), T(0));
                kernels::mm_tn(wval.data(), gslice, cols2.data(), oc, ckk, oh * ow);
                kernels::col2im(cols2.data(), ic, h, wd, kh, kw, stride, pad, oh, ow,
                                t.grad(x.id).data() + i * ic * h * wd);
            }
        }
        if (bias_id >= 0 && t.requires_grad(bias_id)) {
            T* db = t.grad(bias_id).data();
            const T* pg = g.data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t c = 0; c < oc; ++c) {
                    T acc = T(0);
                    const T* row = pg + (i * oc + c) * oh * ow;
                    for (int64_t j = 0; j < oh * ow; ++j) acc += row[j];
                    db[c] += acc;
                }
        }
    });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int64_t stride, int64_t pad) {
    return conv2d(x, w, &bias, stride, pad);
}

template <typename T>
Var<T> conv2d_nobias(Var<T> x, Var<T> w, int64_t stride, int64_t pad) {
    return conv2d<T>(x, w, nullptr, stride, pad);
}

// ---------------------------------------------------------------------------
// Batch normalization over (N,H,W) per channel
// ---------------------------------------------------------------------------

template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, T momentum, T eps, bool training,
                   bool update_running = true) {
    const Tensor<T>& xv = x.value();
    detail::require_rank("batchnorm2d", xv, 4);
    const int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (gamma.value().numel() != c || beta.value().numel() != c || running_mean.numel() != c ||
        running_var.numel() != c) {
        throw ShapeError("batchnorm2d: parameter extent does not match " + std::to_string(c) +
                         " channels (input " + shape_str(xv.shape()) + ")");
    }
    const int64_t m = n * h * w;
    const int64_t hw = h * w;

    std::vector<T> mean(static_cast<size_t>(c)), var(static_cast<size_t>(c));
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T* p = xv.data() + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) s += p[j];
            }
            const T mu = s / static_cast<T>(m);
            T v = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T* p = xv.data() + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                    const T d = p[j] - mu;
                    v += d * d;
                }
            }
            mean[static_cast<size_t>(ch)] = mu;
            var[static_cast<size_t>(ch)] = v / static_cast<T>(m);
        }
        if (update_running) {
            for (int64_t ch = 0; ch < c; ++ch) {
                const T unbiased = m > 1 ? var[static_cast<size_t>(ch)] * static_cast<T>(m) /
                                               static_cast<T>(m - 1)
                                         : var[static_cast<size_t>(ch)];
                running_mean[ch] = (T(1) - momentum) * running_mean[ch] +
                                   momentum * mean[static_cast<size_t>(ch)];
                running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * unbiased;
            }
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean[static_cast<size_t>(ch)] = running_mean[ch];
            var[static_cast<size_t>(ch)] = running_var[ch];
        }
    }

    Tensor<T> out(xv.shape());
    std::vector<T> inv_std(static_cast<size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch)
        inv_std[static_cast<size_t>(ch)] = T(1) / std::sqrt(var[static_cast<size_t>(ch)] + eps);
    {
        const T* px = xv.data();
        const T* pg = gamma.value().data();
        const T* pb = beta.value().data();
        T* o = out.data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const T mu = mean[static_cast<size_t>(ch)];
                const T is = inv_std[static_cast<size_t>(ch)];
                const T gm = pg[ch], bt = pb[ch];
                const T* src = px + (i * c + ch) * hw;
                T* dst = o + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) dst[j] = gm * (src[j] - mu) * is + bt;
            }
    }

    return x.tape->emit(
        "batchnorm2d", std::move(out), {x.id, gamma.id, beta.id},
        [=](Tape<T>& t, int self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& xval = t.value(x.id);
            const T* pg = g.data();
            const T* px = xval.data();
            const T* gam = t.value(gamma.id).data();
            // Per-channel sums of dy and dy*xhat.
            std::vector<T> sum_dy(static_cast<size_t>(c), T(0)),
                sum_dy_xhat(static_cast<size_t>(c), T(0));
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T mu = mean[static_cast<size_t>(ch)];
                    const T is = inv_std[static_cast<size_t>(ch)];
                    const T* gr = pg + (i * c + ch) * hw;
                    const T* xr = px + (i * c + ch) * hw;
                    T sd = T(0), sx = T(0);
                    for (int64_t j = 0; j < hw; ++j) {
                        sd += gr[j];
                        sx += gr[j] * (xr[j] - mu) * is;
                    }
                    sum_dy[static_cast<size_t>(ch)] += sd;
                    sum_dy_xhat[static_cast<size_t>(ch)] += sx;
                }
            if (t.requires_grad(beta.id)) {
                T* db = t.grad(beta.id).data();
                for (int64_t ch = 0; ch < c; ++ch) db[ch] += sum_dy[static_cast<size_t>(ch)];
            }
            if (t.requires_grad(gamma.id)) {
                T* dg = t.grad(gamma.id).data();
                for (int64_t ch = 0; ch < c; ++ch) dg[ch] += sum_dy_xhat[static_cast<size_t>(ch)];
            }
            if (t.requires_grad(x.id)) {
                T* dx = t.grad(x.id).data();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t ch = 0; ch < c; ++ch) {
                        const T mu = mean[static_cast<size_t>(ch)];
                        const T is = inv_std[static_cast<size_t>(ch)];
                        const T gm = gam[ch];
                        const T* gr = pg + (i * c + ch) * hw;
                        const T* xr = px + (i * c + ch) * hw;
                        T* dr = dx + (i * c + ch) * hw;
                        if (training) {
                            const T mean_dy = sum_dy[static_cast<size_t>(ch)] / static_cast<T>(m);
                            const T mean_dy_xhat =
                                sum_dy_xhat[static_cast<size_t>(ch)] / static_cast<T>(m);
                            for (int64_t j = 0; j < hw; ++j) {
                                const T xhat = (xr[j] - mu) * is;
                                dr[j] += gm * is * (gr[j] - mean_dy - xhat * mean_dy_xhat);
                            }
                        } else {
                            for (int64_t j = 0; j < hw; ++j) dr[j] += gm * is * gr[j];
                        }
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
    const Tensor<T>& xv = x.value();
    const int64_t d = xv.dim(xv.rank() - 1);
    if (gamma.value().numel() != d || beta.value().numel() != d) {
        throw ShapeError("layernorm: parameter extent does not match last axis of " +
                         shape_str(xv.shape()));
    }
    const int64_t rows = xv.numel() / d;
    Tensor<T> out(xv.shape());
    std::vector<T> mean(static_cast<size_t>(rows)), inv_std(static_cast<size_t>(rows));
    {
        const T* px = xv.data();
        const T* pg = gamma.value().data();
        const T* pb = beta.value().data();
        T* o = out.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* src = px + r * d;
            T mu = T(0);
            for (int64_t j = 0; j < d; ++j) mu += src[j];
            mu /= static_cast<T>(d);
            T v = T(0);
            for (int64_t j = 0; j < d; ++j) {
                const T dd = src[j] - mu;
                v += dd * dd;
            }
            const T is = T(1) / std::sqrt(v / static_cast<T>(d) + eps);
            mean[static_cast<size_t>(r)] = mu;
            inv_std[static_cast<size_t>(r)] = is;
            T* dst = o + r * d;
            for (int64_t j = 0; j < d; ++j) dst[j] = pg[j] * (src[j] - mu) * is + pb[j];
        }
    }
    return x.tape->emit(
        "layernorm", std::move(out), {x.id, gamma.id, beta.id}, [=](Tape<T>& t, int self) {
            const T* g = t.grad(self).data();
            const T* px = t.value(x.id).data();
            const T* gam = t.value(gamma.id).data();
            const bool need_dx = t.requires_grad(x.id);
            const bool need_dg = t.requires_grad(gamma.id);
            const bool need_db = t.requires_grad(beta.id);
            T* dx = need_dx ? t.grad(x.id).data() : nullptr;
            T* dg = need_dg ? t.grad(gamma.id).data() : nullptr;
            T* db = need_db ? t.grad(beta.id).data() : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const T mu = mean[static_cast<size_t>(r)];
                const T is = inv_std[static_cast<size_t>(r)];
                const T* gr = g + r * d;
                const T* xr = px + r * d;
                if (need_dg || need_db) {
                    for (int64_t j = 0; j < d; ++j) {
                        if (need_db) db[j] += gr[j];
                        if (need_dg) dg[j] += gr[j] * (xr[j] - mu) * is;
                    }
                }
                if (need_dx) {
                    T mean_dyg = T(0), mean_dyg_xhat = T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        const T dyg = gr[j] * gam[j];
                        const T xhat = (xr[j] - mu) * is;
                        mean_dyg += dyg;
                        mean_dyg_xhat += dyg * xhat;
                    }
                    mean_dyg /= static_cast<T>(d);
                    mean_dyg_xhat /= static_cast<T>(d);
                    T* dr = dx + r * d;
                    for (int64_t j = 0; j < d; ++j) {
                        const T dyg = gr[j] * gam[j];
                        const T xhat = (xr[j] - mu) * is;
                        dr[j] += is * (dyg - mean_dyg - xhat * mean_dyg_xhat);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Bilinear x2 upsampling (half-pixel centers, clamped borders)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> upsample_bilinear2x(Var<T> x) {
    const Tensor<T>& xv = x.value();
    detail::require_rank("upsample_bilinear2x", xv, 4);
    const int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int64_t oh = h * 2, ow = w * 2;

    // Per output row/col: source indices and interpolation weight.
    auto make_axis = [](int64_t out_len, int64_t in_len, std::vector<int64_t>& i0,
                        std::vector<int64_t>& i1, std::vector<T>& frac) {
        i0.resize(static_cast<size_t>(out_len));
        i1.resize(static_cast<size_t>(out_len));
        frac.resize(static_cast<size_t>(out_len));
        for (int64_t o = 0; o < out_len; ++o) {
            T src = (static_cast<T>(o) + T(0.5)) / T(2) - T(0.5);
            if (src < T(0)) src = T(0);
            int64_t lo = static_cast<int64_t>(src);
            if (lo > in_len - 1) lo = in_len - 1;
            int64_t hi = std::min(lo + 1, in_len - 1);
            i0[static_cast<size_t>(o)] = lo;
            i1[static_cast<size_t>(o)] = hi;
            frac[static_cast<size_t>(o)] = src - static_cast<T>(lo);
        }
    };
    std::vector<int64_t> y0, y1, x0, x1;
    std::vector<T> fy, fx;
    make_axis(oh, h, y0, y1, fy);
    make_axis(ow, w, x0, x1, fx);

    Tensor<T> out({n, c, oh, ow});
    const T* p = xv.data();
    T* o = out.data();
    for (int64_t i = 0; i < n * c; ++i) {
        const T* src = p + i * h * w;
        T* dst = o + i * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
            const int64_t ya = y0[static_cast<size_t>(oy)], yb = y1[static_cast<size_t>(oy)];
            const T wy = fy[static_cast<size_t>(oy)];
            for (int64_t ox = 0; ox < ow; ++ox) {
                const int64_t xa = x0[static_cast<size_t>(ox)], xb = x1[static_cast<size_t>(ox)];
                const T wx = fx[static_cast<size_t>(ox)];
                const T top = src[ya * w + xa] * (T(1) - wx) + src[ya * w + xb] * wx;
                const T bot = src[yb * w + xa] * (T(1) - wx) + src[yb * w + xb] * wx;
                dst[oy * ow + ox] = top * (T(1) - wy) + bot * wy;
            }
        }
    }
    return x.tape->emit("upsample_bilinear2x", std::move(out), {x.id},
                        [=](Tape<T>& t, int self) {
                            if (!t.requires_grad(x.id)) return;
                            const T* g = t.grad(self).data();
                            T* dx = t.grad(x.id).data();
                            for (int64_t i = 0; i < n * c; ++i) {
                                const T* gs = g + i * oh * ow;
                                T* ds = dx + i * h * w;
                                for (int64_t oy = 0; oy < oh; ++oy) {
                                    const int64_t ya = y0[static_cast<size_t>(oy)];
                                    const int64_t yb = y1[static_cast<size_t>(oy)];
                                    const T wy = fy[static_cast<size_t>(oy)];
                                    for (int64_t ox = 0; ox < ow; ++ox) {
                                        const int64_t xa = x0[static_cast<size_t>(ox)];
                                        const int64_t xb = x1[static_cast<size_t>(ox)];
                                        const T wx = fx[static_cast<size_t>(ox)];
                                        const T gv = gs[oy * ow + ox];
                                        ds[ya * w + xa] += gv * (T(1) - wy) * (T(1) - wx);
                                        ds[ya * w + xb] += gv * (T(1) - wy) * wx;
                                        ds[yb * w + xa] += gv * wy * (T(1) - wx);
                                        ds[yb * w + xb] += gv * wy * wx;
                                    }
                                }
                            }
                        });
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when not training or p == 0)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> dropout(Var<T> x, double p, std::mt19937_64* rng, bool training) {
    if (!training || p <= 0.0 || rng == nullptr) return x;
    if (p >= 1.0) throw ConfigError("dropout: probability must be < 1");
    const Tensor<T>& xv = x.value();
    Tensor<T> mask(xv.shape());
    std::bernoulli_distribution keep(1.0 - p);
    const T inv_keep = T(1.0 / (1.0 - p));
    T* pm = mask.data();
    for (int64_t i = 0; i < mask.numel(); ++i) pm[i] = keep(*rng) ? inv_keep : T(0);
    Tensor<T> out(xv.shape());
    const T* px = xv.data();
    T* o = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) o[i] = px[i] * pm[i];
    return x.tape->emit("dropout", std::move(out), {x.id}, [=](Tape<T>& t, int self) {
        if (!t.requires_grad(x.id)) return;
        const T* g = t.grad(self).data();
        const T* m = mask.data();
        T* dx = t.grad(x.id).data();
        for (int64_t i = 0; i < mask.numel(); ++i) dx[i] += g[i] * m[i];
    });
}

// ---------------------------------------------------------------------------
// Classification losses with fused log-sum-exp (mean reduction)
// ---------------------------------------------------------------------------

// Binary cross-entropy on logits; target holds 0/1 values of the same shape.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& target) {
    const Tensor<T>& zv = logits.value();
    detail::require_same_shape("bce_with_logits", zv, target);
    const int64_t n = zv.numel();
    if (n == 0) throw ShapeError("bce_with_logits: empty input");
    const T* z = zv.data();
    const T* t = target.data();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T zi = z[i];
        acc += std::max(zi, T(0)) - zi * t[i] + std::log1p(std::exp(-std::abs(zi)));
    }
    acc /= static_cast<T>(n);
    return logits.tape->emit("bce_with_logits", Tensor<T>::scalar(acc), {logits.id},
                             [=](Tape<T>& tp, int self) {
                                 if (!tp.requires_grad(logits.id)) return;
                                 const T g = tp.grad(self)[0];
                                 const T* zz = tp.value(logits.id).data();
                                 const T* tt = target.data();
                                 T* dz = tp.grad(logits.id).data();
                                 const T invn = T(1) / static_cast<T>(n);
                                 for (int64_t i = 0; i < n; ++i)
                                     dz[i] += g * (stable_sigmoid(zz[i]) - tt[i]) * invn;
                             });
}

// Multiclass cross-entropy on logits (N,C,H,W) with integer labels (N,H,W).
template <typename T>
Var<T> ce_with_logits(Var<T> logits, const Tensor<int32_t>& labels) {
    const Tensor<T>& zv = logits.value();
    detail::require_rank("ce_with_logits", zv, 4);
    const int64_t n = zv.dim(0), c = zv.dim(1), h = zv.dim(2), w = zv.dim(3);
    if (labels.rank() != 3 || labels.dim(0) != n || labels.dim(1) != h || labels.dim(2) != w) {
        throw ShapeError("ce_with_logits: labels " + shape_str(labels.shape()) +
                         " do not match logits " + shape_str(zv.shape()));
    }
    const int64_t hw = h * w;
    const int64_t npix = n * hw;
    const T* z = zv.data();
    const int32_t* lb = labels.data();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < hw; ++j) {
            const int32_t y = lb[i * hw + j];
            if (y < 0 || y >= c) {
                throw DataError("ce_with_logits: label " + std::to_string(y) +
                                " out of range for " + std::to_string(c) + " classes");
            }
            const T* zp = z + i * c * hw + j;
            T mx = zp[0];
            for (int64_t k = 1; k < c; ++k) mx = std::max(mx, zp[k * hw]);
            T se = T(0);
            for (int64_t k = 0; k < c; ++k) se += std::exp(zp[k * hw] - mx);
            acc += std::log(se) + mx - zp[y * hw];
        }
    }
    acc /= static_cast<T>(npix);
    return logits.tape->emit(
        "ce_with_logits", Tensor<T>::scalar(acc), {logits.id}, [=](Tape<T>& tp, int self) {
            if (!tp.requires_grad(logits.id)) return;
            const T g = tp.grad(self)[0];
            const T* zz = tp.value(logits.id).data();
            const int32_t* ll = labels.data();
            T* dz = tp.grad(logits.id).data();
            const T invn = T(1) / static_cast<T>(npix);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < hw; ++j) {
                    const T* zp = zz + i * c * hw + j;
                    T* dp = dz + i * c * hw + j;
                    T mx = zp[0];
                    for (int64_t k = 1; k < c; ++k) mx = std::max(mx, zp[k * hw]);
                    T se = T(0);
                    for (int64_t k = 0; k < c; ++k) se += std::exp(zp[k * hw] - mx);
                    const int32_t y = ll[i * hw + j];
                    for (int64_t k = 0; k < c; ++k) {
                        T p = std::exp(zp[k * hw] - mx) / se;
                        if (k == y) p -= T(1);
                        dp[k * hw] += g * p * invn;
                    }
                }
        });
}

}  // namespace dtu
