#pragma once

#include <algorithm>
#include <string>

#include "dtu/nn.hpp"
#include "dtu/ops.hpp"

namespace dtu {

// Position attention: every output position is a weighted sum of the value
// features at all positions, with weights softmax-normalized over sources.
// Query/key channels are reduced to in/qk_reduction (floored at 1); value
// keeps the input channel count. alpha starts at 0 so the module begins as
// the identity and learns its contribution.
template <typename T>
struct PamParams {
    Conv2d<T> query_conv, key_conv, value_conv;  // 1x1
    Parameter<T> alpha;

    PamParams() = default;
    PamParams(const std::string& name, int64_t channels, int64_t qk_reduction, InitRng& init) {
        const int64_t qk = std::max<int64_t>(1, channels / qk_reduction);
        query_conv = Conv2d<T>(name + ".query", channels, qk, 1, 1, 0, true, init);
        key_conv = Conv2d<T>(name + ".key", channels, qk, 1, 1, 0, true, init);
        value_conv = Conv2d<T>(name + ".value", channels, channels, 1, 1, 0, true, init);
        alpha = Parameter<T>(name + ".alpha", Tensor<T>({1}));
    }

    void collect(Registry<T>& reg) {
        query_conv.collect(reg);
        key_conv.collect(reg);
        value_conv.collect(reg);
        reg.add(alpha);
    }
};

// Channel attention: operates on the feature map directly (no convolutions);
// the c-by-c attention map comes from channel-wise dot products. beta starts
// at 0, mirroring alpha.
template <typename T>
struct CamParams {
    Parameter<T> beta;

    CamParams() = default;
    CamParams(const std::string& name) { beta = Parameter<T>(name + ".beta", Tensor<T>({1})); }

    void collect(Registry<T>& reg) { reg.add(beta); }
};

// S[j,i] = softmax_i(B_i . C_j); out_j = alpha * sum_i S[j,i] D_i + A_j.
// Attention rows (fixed j) are normalized over source positions i.
// attn_out, when non-null, receives the (n, N, N) attention map S.
template <typename T>
Var<T> pam_forward(Tape<T>& tape, Var<T> a, PamParams<T>& p, Var<T>* attn_out = nullptr) {
    const Tensor<T>& av = a.value();
    detail::require_rank("pam_forward", av, 4);
    if (av.dim(1) != p.value_conv.weight.value.dim(1)) {
        throw ShapeError("pam_forward: input channels " + shape_str(av.shape()) +
                         " do not match parameters built for " +
                         std::to_string(p.value_conv.weight.value.dim(1)) + " channels");
    }
    const int64_t n = av.dim(0), c = av.dim(1), h = av.dim(2), w = av.dim(3);
    const int64_t npos = h * w;
    const int64_t qk = p.query_conv.weight.value.dim(0);

    Var<T> b = reshape(p.query_conv.forward(tape, a), {n, qk, npos});   // B
    Var<T> cc = reshape(p.key_conv.forward(tape, a), {n, qk, npos});    // C
    Var<T> d = reshape(p.value_conv.forward(tape, a), {n, c, npos});    // D

    // energy[j,i] = C_j . B_i
    Var<T> energy = bmm(transpose2(cc), b);                // (n, npos, npos)
    Var<T> attn = softmax(energy, 2);                      // rows over i
    if (attn_out) *attn_out = attn;
    Var<T> weighted = bmm(d, transpose2(attn));            // (n, c, npos): sum_i S[j,i] D_i
    Var<T> out = reshape(weighted, {n, c, h, w});
    return add(mul(tape.param(p.alpha), out), a);
}

// X[j,i] = softmax_i(A_i . A_j); out_j = beta * sum_i X[j,i] A_i + A_j.
// attn_out, when non-null, receives the (n, c, c) channel attention map X.
template <typename T>
Var<T> cam_forward(Tape<T>& tape, Var<T> a, CamParams<T>& p, Var<T>* attn_out = nullptr) {
    const Tensor<T>& av = a.value();
    detail::require_rank("cam_forward", av, 4);
    const int64_t n = av.dim(0), c = av.dim(1), h = av.dim(2), w = av.dim(3);
    if (h * w < 1) throw ShapeError("cam_forward: empty spatial extent " + shape_str(av.shape()));
    const int64_t npos = h * w;

    Var<T> flat = reshape(a, {n, c, npos});
    Var<T> energy = bmm(flat, transpose2(flat));  // (n, c, c), energy[j,i] = A_j . A_i
    Var<T> attn = softmax(energy, 2);
    if (attn_out) *attn_out = attn;
    Var<T> weighted = bmm(attn, flat);            // (n, c, npos): sum_i X[j,i] A_i
    Var<T> out = reshape(weighted, {n, c, h, w});
    return add(mul(tape.param(p.beta), out), a);
}

// Two-branch block: conv -> PAM -> conv and conv -> CAM -> conv, branch sum
// fused by a final 1x1 channel-restoring convolution. Branch convolutions
// reduce channels to ceil(in/16), floored at 1.
template <typename T>
struct DABlock {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    int64_t reduced = 0;

    ConvBnRelu<T> pam_in, pam_out, cam_in, cam_out;
    Conv2d<T> fuse;
    PamParams<T> pam;
    CamParams<T> cam;

    DABlock() = default;
    DABlock(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t reduction,
            int64_t pam_qk_reduction, InitRng& init)
        : in_channels(in_ch), out_channels(out_ch) {
        if (in_ch < 1) throw ConfigError("DABlock: in_channels must be >= 1");
        reduced = std::max<int64_t>(1, (in_ch + reduction - 1) / reduction);
        pam_in = ConvBnRelu<T>(name + ".pam_in", in_ch, reduced, 3, 1, 1, init);
        pam_out = ConvBnRelu<T>(name + ".pam_out", reduced, reduced, 3, 1, 1, init);
        cam_in = ConvBnRelu<T>(name + ".cam_in", in_ch, reduced, 3, 1, 1, init);
        cam_out = ConvBnRelu<T>(name + ".cam_out", reduced, reduced, 3, 1, 1, init);
        fuse = Conv2d<T>(name + ".fuse", reduced, out_ch, 1, 1, 0, true, init);
        pam = PamParams<T>(name + ".pam", reduced, pam_qk_reduction, init);
        cam = CamParams<T>(name + ".cam");
    }

    Var<T> forward(Tape<T>& tape, Var<T> a, const Mode& mode) {
        if (a.value().dim(1) != in_channels) {
            throw ShapeError("DABlock: input " + shape_str(a.value().shape()) + " has " +
                             std::to_string(a.value().dim(1)) + " channels, block expects " +
                             std::to_string(in_channels));
        }
        Var<T> b1 = pam_in.forward(tape, a, mode);
        b1 = pam_forward(tape, b1, pam);
        b1 = pam_out.forward(tape, b1, mode);

        Var<T> b2 = cam_in.forward(tape, a, mode);
        b2 = cam_forward(tape, b2, cam);
        b2 = cam_out.forward(tape, b2, mode);

        return fuse.forward(tape, add(b1, b2));
    }

    void collect(Registry<T>& reg) {
        pam_in.collect(reg);
        pam_out.collect(reg);
        cam_in.collect(reg);
        cam_out.collect(reg);
        fuse.collect(reg);
        pam.collect(reg);
        cam.collect(reg);
    }
};

}  // namespace dtu
