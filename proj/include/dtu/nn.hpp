#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "dtu/ops.hpp"
#include "dtu/tape.hpp"
#include "dtu/tensor.hpp"

namespace dtu {

// Forward-pass context: training toggles dropout and batch statistics;
// update_bn lets gradient checks run in training mode without touching
// running statistics.
struct Mode {
    bool training = false;
    bool update_bn = true;
    std::mt19937_64* dropout_rng = nullptr;

    static Mode train(std::mt19937_64* rng = nullptr) { return Mode{true, true, rng}; }
    static Mode eval() { return Mode{false, false, nullptr}; }
};

// Flat view of a model's named state. Parameter names must be unique within
// one model instance.
template <typename T>
class Registry {
  public:
    struct Entry {
        std::string name;
        Tensor<T>* value;
        Parameter<T>* param;  // null for buffers
    };

    void add(Parameter<T>& p) {
        insert_name(p.name);
        entries_.push_back({p.name, &p.value, &p});
    }
    void add(Buffer<T>& b) {
        insert_name(b.name);
        entries_.push_back({b.name, &b.value, nullptr});
    }

    const std::vector<Entry>& entries() const { return entries_; }

    std::vector<Parameter<T>*> parameters() const {
        std::vector<Parameter<T>*> out;
        for (const auto& e : entries_)
            if (e.param) out.push_back(e.param);
        return out;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (e.param) n += e.value->numel();
        return n;
    }

    void zero_grad() {
        for (const auto& e : entries_)
            if (e.param) e.param->zero_grad();
    }

  private:
    void insert_name(const std::string& n) {
        if (!names_.insert(n).second) {
            throw ConfigError("duplicate tensor name in model: " + n);
        }
    }
    std::vector<Entry> entries_;
    std::unordered_set<std::string> names_;
};

// Weight initialization: He-uniform for convolutions, truncated normal
// (sigma 0.02, clipped at 2 sigma) for transformer affines.
class InitRng {
  public:
    explicit InitRng(uint64_t seed) : rng_(seed) {}

    template <typename T>
    void he_uniform(Tensor<T>& t, int64_t fan_in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng_));
    }

    template <typename T>
    void trunc_normal(Tensor<T>& t, double sigma = 0.02) {
        std::normal_distribution<double> dist(0.0, sigma);
        for (int64_t i = 0; i < t.numel(); ++i) {
            double v;
            do {
                v = dist(rng_);
            } while (std::abs(v) > 2.0 * sigma);
            t[i] = static_cast<T>(v);
        }
    }

    std::mt19937_64& raw() { return rng_; }

  private:
    std::mt19937_64 rng_;
};

template <typename T>
struct Conv2d {
    Parameter<T> weight;  // (oc, ic, k, k)
    Parameter<T> bias;    // (oc), empty when has_bias is false
    int64_t stride = 1;
    int64_t pad = 0;
    bool has_bias = true;

    Conv2d() = default;
    Conv2d(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride_,
           int64_t pad_, bool with_bias, InitRng& init)
        : stride(stride_), pad(pad_), has_bias(with_bias) {
        weight = Parameter<T>(name + ".weight", Tensor<T>({out_ch, in_ch, k, k}));
        init.he_uniform(weight.value, in_ch * k * k);
        if (with_bias) bias = Parameter<T>(name + ".bias", Tensor<T>({out_ch}));
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) {
        Var<T> w = tape.param(weight);
        if (has_bias) {
            Var<T> b = tape.param(bias);
            return conv2d(x, w, &b, stride, pad);
        }
        return conv2d<T>(x, w, nullptr, stride, pad);
    }

    void collect(Registry<T>& reg) {
        reg.add(weight);
        if (has_bias) reg.add(bias);
    }
};

template <typename T>
struct BatchNorm2d {
    Parameter<T> gamma, beta;
    Buffer<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, int64_t channels) {
        gamma = Parameter<T>(name + ".gamma", Tensor<T>::full({channels}, T(1)));
        beta = Parameter<T>(name + ".beta", Tensor<T>({channels}));
        running_mean = {name + ".running_mean", Tensor<T>({channels})};
        running_var = {name + ".running_var", Tensor<T>::full({channels}, T(1))};
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, const Mode& mode) {
        return batchnorm2d(x, tape.param(gamma), tape.param(beta), running_mean.value,
                           running_var.value, momentum, eps, mode.training, mode.update_bn);
    }

    void collect(Registry<T>& reg) {
        reg.add(gamma);
        reg.add(beta);
        reg.add(running_mean);
        reg.add(running_var);
    }
};

// 3x3 (or other) convolution followed by batch norm and ReLU.
template <typename T>
struct ConvBnRelu {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;

    ConvBnRelu() = default;
    ConvBnRelu(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride,
               int64_t pad, InitRng& init)
        : conv(name + ".conv", in_ch, out_ch, k, stride, pad, /*with_bias=*/false, init),
          bn(name + ".bn", out_ch) {}

    Var<T> forward(Tape<T>& tape, Var<T> x, const Mode& mode) {
        return relu(bn.forward(tape, conv.forward(tape, x), mode));
    }

    void collect(Registry<T>& reg) {
        conv.collect(reg);
        bn.collect(reg);
    }
};

template <typename T>
struct Linear {
    Parameter<T> weight;  // (in, out)
    Parameter<T> bias;    // (out)

    Linear() = default;
    Linear(const std::string& name, int64_t in_dim, int64_t out_dim, InitRng& init) {
        weight = Parameter<T>(name + ".weight", Tensor<T>({in_dim, out_dim}));
        init.trunc_normal(weight.value);
        bias = Parameter<T>(name + ".bias", Tensor<T>({out_dim}));
    }

    // Applies to the last axis; leading axes are flattened for the product.
    Var<T> forward(Tape<T>& tape, Var<T> x) {
        const Shape in_shape = x.shape();
        const int64_t in_dim = in_shape.back();
        if (in_dim != weight.value.dim(0)) {
            throw ShapeError("linear: input " + shape_str(in_shape) + " does not match weight " +
                             shape_str(weight.value.shape()));
        }
        const int64_t rows = x.value().numel() / in_dim;
        Var<T> flat = reshape(x, {rows, in_dim});
        Var<T> y = bias_add(matmul(flat, tape.param(weight)), tape.param(bias));
        Shape out_shape = in_shape;
        out_shape.back() = weight.value.dim(1);
        return reshape(y, out_shape);
    }

    void collect(Registry<T>& reg) {
        reg.add(weight);
        reg.add(bias);
    }
};

template <typename T>
struct LayerNorm {
    Parameter<T> gamma, beta;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int64_t dim) {
        gamma = Parameter<T>(name + ".gamma", Tensor<T>::full({dim}, T(1)));
        beta = Parameter<T>(name + ".beta", Tensor<T>({dim}));
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) {
        return layernorm(x, tape.param(gamma), tape.param(beta));
    }

    void collect(Registry<T>& reg) {
        reg.add(gamma);
        reg.add(beta);
    }
};

}  // namespace dtu
