#pragma once

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "banet/layers.hpp"

namespace banet {

enum class PoolKind { avg, avg_max, avg_std, dct };

/// Channel statistic used by the squeeze step.
///
/// avg_max and avg_std emit two statistics per channel ([mean | max] or
/// [mean | std], concatenated along the feature axis), so projections that
/// consume them are twice as wide. dct emits the sum of the channel's
/// coefficients on the `dct_components` lowest-frequency orthonormal DCT-II
/// bases, taken in zig-zag order.
struct PoolingStrategy {
    PoolKind kind = PoolKind::avg;
    std::size_t dct_components = 16;

    std::size_t statistics() const { return kind == PoolKind::avg_max || kind == PoolKind::avg_std ? 2 : 1; }
};

std::string to_string(PoolKind kind);
PoolKind parse_pool_kind(std::string_view name);

// First k (u, v) frequency pairs of an h x w grid in JPEG zig-zag order.
std::vector<std::pair<std::size_t, std::size_t>> dct_zigzag(std::size_t h, std::size_t w, std::size_t k);

// Orthonormal 2D DCT-II basis image for frequency (u, v), shape [h, w].
template <typename T>
Tensor<T> dct_basis(std::size_t h, std::size_t w, std::size_t u, std::size_t v);

// Coefficients of a [h, w] map on the first k zig-zag bases, shape [k].
template <typename T>
Tensor<T> dct_coefficients(const Tensor<T>& map, std::size_t k);

// [N,C,H,W] -> [N, C * strategy.statistics()]
template <typename T>
Var<T> pool(Var<T> x, const PoolingStrategy& strategy);

enum class AttentionKind { none, se, bav1, bav2 };
enum class Counting { per_channel_bn, actual };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(std::string_view name);

/// Squeeze-and-excitation weights: w = sigmoid(W2 relu(W1 pool(X))), no biases.
template <typename T>
class SeAttention {
public:
    SeAttention() = default;
    SeAttention(std::string name, std::size_t channels, std::size_t reduction, PoolingStrategy pooling,
                std::mt19937_64& rng);

    // X[N,C,H,W] -> weights [N,C]
    Var<T> forward(Graph<T>& g, Var<T> x);

    void parameters(std::vector<Parameter<T>*>& out);

    std::size_t channels() const { return w2.value.dim(0); }
    std::size_t reduced() const { return w1.value.dim(0); }
    const PoolingStrategy& pooling() const { return pooling_; }

    Parameter<T> w1;  // [C/r, s*C]
    Parameter<T> w2;  // [C, C/r]

private:
    PoolingStrategy pooling_;
};

/// Bridge attention over n branch feature maps X_1..X_n.
///
/// Integration squeezes each branch to S_i = W1_i pool(X_i), all of width
/// C_n/r, and fuses them: bav1 sums per-branch batch-normed S_i; bav2 takes
/// the weighted sum over n learnable scalars f_i. Generation maps S to
/// sigmoid(W2 relu(S)) for bav1 and sigmoid(W2 relu(BN(S))) for bav2.
template <typename T>
class BridgeAttention {
public:
    BridgeAttention() = default;
    BridgeAttention(std::string name, AttentionKind variant, std::vector<std::size_t> branch_widths,
                    std::size_t out_channels, std::size_t reduction, PoolingStrategy pooling, std::mt19937_64& rng);

    /// Returns S [N, C_n/r]. When `squeezed` is given it receives each S_i.
    Var<T> integrate(Graph<T>& g, std::span<const Var<T>> xs, Mode mode, std::vector<Var<T>>* squeezed = nullptr);

    /// S [N, C_n/r] -> weights [N, C_n]
    Var<T> generate(Graph<T>& g, Var<T> s, Mode mode);

    Var<T> forward(Graph<T>& g, std::span<const Var<T>> xs, Mode mode, std::vector<Var<T>>* squeezed = nullptr) {
        return generate(g, integrate(g, xs, mode, squeezed), mode);
    }

    void parameters(std::vector<Parameter<T>*>& out);

    AttentionKind variant() const { return variant_; }
    std::size_t branches() const { return branch_widths_.size(); }
    const std::vector<std::size_t>& branch_widths() const { return branch_widths_; }
    std::size_t out_channels() const { return w2.value.dim(0); }
    std::size_t reduced() const { return w2.value.dim(1); }
    const PoolingStrategy& pooling() const { return pooling_; }

    std::vector<Parameter<T>> branch_proj;  // W1_i: [C_n/r, s*C_i]
    Parameter<T> fusion;                    // bav2: [n]
    std::vector<BatchNorm<T>> branch_bn;    // bav1: n x BN(C_n/r)
    BatchNorm<T> gen_bn;                    // bav2: BN(C_n/r)
    Parameter<T> w2;                        // [C_n, C_n/r]

private:
    AttentionKind variant_ = AttentionKind::bav2;
    std::vector<std::size_t> branch_widths_;
    PoolingStrategy pooling_;
};

struct AttentionParamCount {
    std::size_t projections = 0;  // W1 or every W1_i
    std::size_t generation = 0;   // W2
    std::size_t fusion = 0;       // bav2 scalars
    std::size_t bn = 0;           // branch BNs (bav1) or generation BN (bav2)

    // What bav1/bav2 add on top of the projections and W2.
    std::size_t extras() const { return fusion + bn; }
    std::size_t total() const { return projections + generation + fusion + bn; }
    bool operator==(const AttentionParamCount&) const = default;
};

/// Closed-form parameter count of one attention module.
///
/// Per-channel counting charges one parameter per BN channel; actual counting
/// charges gamma and beta. Throws ShapeError when r does not divide C_n.
AttentionParamCount attention_param_count(std::span<const std::size_t> branch_widths, std::size_t out_channels,
                                          std::size_t reduction, AttentionKind kind, Counting counting,
                                          std::size_t statistics = 1);

// Integration extras only: bav1 -> n*C_n/r, bav2 -> n + C_n/r (one parameter per BN channel).
std::size_t attention_extra_params(std::size_t n, std::size_t out_channels, std::size_t reduction, AttentionKind kind,
                                   Counting counting);

// Same breakdown, obtained by walking instantiated parameter tensors.
template <typename T>
AttentionParamCount enumerate_attention_params(const std::vector<Parameter<T>*>& params, AttentionKind kind,
                                               Counting counting);

}  // namespace banet
