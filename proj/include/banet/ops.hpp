#pragma once

#include <vector>

#include "banet/autograd.hpp"

// Differentiable primitives. Every op appends one node to the graph of its
// first argument and validates shapes eagerly.
namespace banet {

// Elementwise arithmetic (identical shapes).
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);

// Reductions to a rank-0 scalar.
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);

template <typename T> Var<T> reshape(Var<T> x, Shape shape);

// [N,a] ++ [N,b] -> [N,a+b]
template <typename T> Var<T> concat_features(Var<T> a, Var<T> b);

// x * f[index] where f is a rank-1 vector of scalars.
template <typename T> Var<T> scale_by_entry(Var<T> x, Var<T> f, std::size_t index);

// Spatial statistics over [N,C,H,W] -> [N,C].
template <typename T> Var<T> gap(Var<T> x);
template <typename T> Var<T> spatial_max(Var<T> x);
template <typename T> Var<T> spatial_std(Var<T> x);  // population std
// Per-channel inner product with a fixed [H,W] filter.
template <typename T> Var<T> spatial_filter(Var<T> x, const Tensor<T>& filter);

// Last-axis affine map: x[..., Din] * W[Dout, Din]^T (+ b[Dout]).
template <typename T> Var<T> linear(Var<T> x, Var<T> w);
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

// How conv2d treats (H + 2p - kh) not divisible by the stride: exact throws
// ShapeError, floor drops the trailing rows/columns as ResNets do.
enum class Extent { exact, floor };

// Direct cross-correlation, x[N,Cin,H,W] with k[Cout,Cin,kh,kw].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, std::size_t stride, std::size_t padding, Extent extent = Extent::exact);

template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);
};

// Normalizes over every axis except 1, for [N,C] or [N,C,H,W].
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode);

// Normalizes over the last axis.
template <typename T> Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

// X[N,C,H,W] * w[N,C] broadcast over space.
template <typename T> Var<T> channel_scale(Var<T> x, Var<T> w);
// X[N,T,D] * w[N,D] broadcast over tokens.
template <typename T> Var<T> token_scale(Var<T> x, Var<T> w);
// [N,T,D] -> [N,D]
template <typename T> Var<T> token_mean(Var<T> x);
// [N,T,D] -> [N,D,T,1], so spatial pooling strategies apply to token axes.
template <typename T> Var<T> tokens_to_channels(Var<T> x);

// Scaled dot-product attention over q,k,v [N,T,D] split into `heads` heads.
template <typename T> Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, std::size_t heads);
// Softmax weights of the same computation, [N,heads,T,T]. Not differentiable.
template <typename T> Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads);

// [N,C,H,W] -> [N, (H/p)*(W/p), C*p*p]
template <typename T> Var<T> patchify(Var<T> x, std::size_t patch);

// Mean cross-entropy of logits [N,K] against integer labels.
template <typename T> Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels);

}  // namespace banet
