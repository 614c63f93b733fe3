#pragma once

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "banet/blocks.hpp"

namespace banet {

// Where channel attention sits in a pre-norm transformer.
//   ba_mlp:   bridge FC1 (post-ReLU) and FC2 outputs, rescale FC2's output
//   se_mlp:   SE on FC2's output
//   ba_block: bridge the self-attention sublayer and MLP outputs, rescale the MLP output
//   ba_stage: bridge the outputs of two adjacent blocks, rescale the second (stage level)
enum class Integration { none, ba_mlp, se_mlp, ba_block, ba_stage };

std::string to_string(Integration integration);
Integration parse_integration(std::string_view name);

template <typename T>
struct TransformerTrace {
    Var<T> attn_out;  // self-attention sublayer output, before the residual add
    Var<T> fc1;       // post-activation
    Var<T> fc2;
    Var<T> weights;   // [N,D]; invalid when the block has no attention
    Var<T> out;
    std::vector<Var<T>> squeezed;
};

struct TransformerSpec {
    std::size_t dim = 16;
    std::size_t heads = 2;
    std::size_t mlp_ratio = 4;
    Integration integration = Integration::none;
    std::size_t reduction = 4;
    PoolingStrategy pooling;
};

/// Pre-norm block: X1 = X + MHSA(LN(X)); out = X1 + w * FC2(ReLU(FC1(LN(X1)))),
/// where w are channel weights broadcast over tokens (w = 1 without attention).
template <typename T>
class TransformerBlock {
public:
    TransformerBlock(std::string name, const TransformerSpec& spec, std::mt19937_64& rng);

    // X[N,T,D] -> [N,T,D]
    Var<T> forward(Graph<T>& g, Var<T> x, const ForwardOptions& opts, TransformerTrace<T>* trace = nullptr);

    std::vector<Parameter<T>*> parameters();
    std::vector<BatchNorm<T>*> batchnorms();
    const TransformerSpec& spec() const { return spec_; }

    LayerNorm<T> ln1, ln2;
    MultiHeadSelfAttention<T> attn;
    Linear<T> fc1, fc2;
    std::optional<BridgeAttention<T>> ba;
    std::optional<SeAttention<T>> se;

private:
    TransformerSpec spec_;
};

/// Two consecutive blocks. Block-level integrations are applied inside each
/// block; ba_stage bridges the two block outputs and rescales the second.
template <typename T>
class TransformerStage {
public:
    TransformerStage(std::string name, const TransformerSpec& spec, std::mt19937_64& rng);

    Var<T> forward(Graph<T>& g, Var<T> x, const ForwardOptions& opts, std::vector<TransformerTrace<T>>* traces = nullptr,
                   TransformerTrace<T>* stage_trace = nullptr);

    std::vector<Parameter<T>*> parameters();
    std::vector<BatchNorm<T>*> batchnorms();

    std::vector<TransformerBlock<T>> blocks;
    std::optional<BridgeAttention<T>> ba;

private:
    TransformerSpec spec_;
};

}  // namespace banet
