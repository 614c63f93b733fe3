#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "banet/ops.hpp"

namespace banet {

// Fan-in scaled uniform init, bound 1/sqrt(fan_in).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
    return Tensor<T>::uniform(std::move(shape), -bound, bound, rng);
}

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
           std::size_t padding, std::mt19937_64& rng, Extent extent = Extent::exact)
        : weight(name + ".weight", ParamRole::weight,
                 fan_in_uniform<T>(Shape{out, in, kernel, kernel}, in * kernel * kernel, rng)),
          stride_(stride),
          padding_(padding),
          extent_(extent) {}

    Var<T> forward(Graph<T>& g, Var<T> x) { return conv2d(x, g.param(weight), stride_, padding_, extent_); }

    void parameters(std::vector<Parameter<T>*>& out) { out.push_back(&weight); }

    std::size_t in_channels() const { return weight.value.dim(1); }
    std::size_t out_channels() const { return weight.value.dim(0); }
    std::size_t kernel() const { return weight.value.dim(2); }
    std::size_t stride() const { return stride_; }
    std::size_t padding() const { return padding_; }

    Parameter<T> weight;

private:
    std::size_t stride_ = 1;
    std::size_t padding_ = 0;
    Extent extent_ = Extent::exact;
};

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng)
        : weight(name + ".weight", ParamRole::weight, fan_in_uniform<T>(Shape{out, in}, in, rng)) {
        if (with_bias) bias.emplace(name + ".bias", ParamRole::bias, fan_in_uniform<T>(Shape{out}, in, rng));
    }

    Var<T> forward(Graph<T>& g, Var<T> x) {
        return bias ? linear(x, g.param(weight), g.param(*bias)) : linear(x, g.param(weight));
    }

    void parameters(std::vector<Parameter<T>*>& out) {
        out.push_back(&weight);
        if (bias) out.push_back(&*bias);
    }

    Parameter<T> weight;
    std::optional<Parameter<T>> bias;
};

template <typename T>
class BatchNorm {
public:
    BatchNorm() = default;
    BatchNorm(std::string name, std::size_t channels)
        : gamma(name + ".gamma", ParamRole::bn_gamma, Tensor<T>(Shape{channels}, T(1))),
          beta(name + ".beta", ParamRole::bn_beta, Tensor<T>(Shape{channels}, T(0))) {
        state.running_mean = Tensor<T>(Shape{channels}, T(0));
        state.running_var = Tensor<T>(Shape{channels}, T(1));
    }

    Var<T> forward(Graph<T>& g, Var<T> x, Mode mode) {
        return batchnorm(x, g.param(gamma), g.param(beta), state, mode);
    }

    /// Makes eval-mode BN the exact identity map: gamma 1, beta 0, running
    /// mean 0 and running var chosen so that var + eps rounds to exactly 1.
    void set_identity() {
        gamma.value.fill(T(1));
        beta.value.fill(T(0));
        state.running_mean.fill(T(0));
        T v = T(1) - state.eps;
        while (v + state.eps > T(1)) v = std::nextafter(v, T(0));
        while (v + state.eps < T(1)) v = std::nextafter(v, T(2));
        state.running_var.fill(v);
    }

    void parameters(std::vector<Parameter<T>*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    std::size_t channels() const { return gamma.value.size(); }

    Parameter<T> gamma;
    Parameter<T> beta;
    BatchNormState<T> state;
};

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(std::string name, std::size_t dim)
        : gamma(name + ".gamma", ParamRole::ln_gamma, Tensor<T>(Shape{dim}, T(1))),
          beta(name + ".beta", ParamRole::ln_beta, Tensor<T>(Shape{dim}, T(0))) {}

    Var<T> forward(Graph<T>& g, Var<T> x) { return layernorm(x, g.param(gamma), g.param(beta)); }

    void parameters(std::vector<Parameter<T>*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    Parameter<T> gamma;
    Parameter<T> beta;
};

/// Multi-head self-attention. The key projection carries no bias: softmax over
/// keys is invariant to it.
template <typename T>
class MultiHeadSelfAttention {
public:
    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(std::string name, std::size_t dim, std::size_t heads, std::mt19937_64& rng)
        : heads_(heads) {
        if (heads == 0 || dim % heads != 0) {
            throw ShapeError("attention width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                             " heads");
        }
        q = Linear<T>(name + ".q", dim, dim, true, rng);
        k = Linear<T>(name + ".k", dim, dim, false, rng);
        v = Linear<T>(name + ".v", dim, dim, true, rng);
        o = Linear<T>(name + ".o", dim, dim, true, rng);
    }

    Var<T> forward(Graph<T>& g, Var<T> x) {
        Var<T> ctx = attention_core(q.forward(g, x), k.forward(g, x), v.forward(g, x), heads_);
        return o.forward(g, ctx);
    }

    void parameters(std::vector<Parameter<T>*>& out) {
        q.parameters(out);
        k.parameters(out);
        v.parameters(out);
        o.parameters(out);
    }

    std::size_t heads() const { return heads_; }

    Linear<T> q, k, v, o;

private:
    std::size_t heads_ = 1;
};

}  // namespace banet
