#pragma once

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "banet/attention.hpp"

namespace banet {

// Feature sources a bridge attention module can draw from.
enum class Tap {
    prev_conv_last,  // previous block, last conv stage (before rescaling)
    prev_end,        // previous block output, after the residual add
    prev_attn,       // previous block attention weights, as a [N,C,1,1] map
    curr_conv1,
    curr_conv2,
    adjacent,  // last conv stage of the current block; always present
};

enum class TapType { conv, attention_weights };

TapType tap_type(Tap tap);
std::string to_string(Tap tap);
Tap parse_tap(std::string_view name);

enum class BlockKind { basic, bottleneck, transformer };

struct BridgeSourceConfig {
    std::vector<Tap> sources;

    // Every conv stage of the block: {conv1, adjacent} or {conv1, conv2, adjacent}.
    static BridgeSourceConfig all_convs(BlockKind kind);
    static BridgeSourceConfig adjacent_only() { return {{Tap::adjacent}}; }

    // The six bridged-feature configurations of the source ablation, each
    // paired with the adjacent layer, in table order.
    static std::vector<std::pair<std::string, BridgeSourceConfig>> ablation_rows();

    bool needs_predecessor() const;
    // Throws std::invalid_argument when the adjacent tap is missing, a tap is
    // repeated, or a tap does not exist for the block kind.
    void validate(BlockKind kind) const;
    std::string label() const;
};

struct AttentionConfig {
    AttentionKind kind = AttentionKind::none;
    std::size_t reduction = 16;
    PoolingStrategy pooling;
    // Empty means BridgeSourceConfig::all_convs for the block kind.
    std::optional<BridgeSourceConfig> sources;
};

struct BlockSpec {
    BlockKind kind = BlockKind::bottleneck;
    std::size_t in_channels = 0;
    std::size_t width = 0;  // bottleneck mid width, or basic block width
    std::size_t stride = 1;
    AttentionConfig attention;
    // Output width of the preceding block; required only for prev_* taps.
    std::size_t prev_out_channels = 0;

    std::size_t out_channels() const { return kind == BlockKind::bottleneck ? 4 * width : width; }
    bool has_downsample() const { return stride != 1 || in_channels != out_channels(); }
};

struct ForwardOptions {
    Mode mode = Mode::eval;
    // Forces every attention weight to exactly 1.
    bool bypass_attention = false;
};

/// Intermediate values of one residual block forward pass.
template <typename T>
struct BlockTrace {
    Var<T> conv1;
    Var<T> conv2;     // bottleneck only
    Var<T> adjacent;  // last conv stage before rescaling
    Var<T> weights;   // attention weights [N,C]; invalid without attention
    Var<T> end;       // block output
    std::vector<Var<T>> squeezed;
};

// Feature maps for the bridge, in the order of cfg.sources.
template <typename T>
std::vector<Var<T>> bridge_tap(const BlockTrace<T>* prev, const BlockTrace<T>& curr, const BridgeSourceConfig& cfg);

/// Basic (two 3x3) or bottleneck (1x1, 3x3, 1x1 x4) residual block with
/// optional channel attention rescaling the last conv stage before the
/// residual add.
template <typename T>
class ResidualBlock {
public:
    ResidualBlock(std::string name, BlockSpec spec, std::mt19937_64& rng);

    Var<T> forward(Graph<T>& g, Var<T> x, const ForwardOptions& opts, const BlockTrace<T>* prev = nullptr,
                   BlockTrace<T>* trace = nullptr);

    std::vector<Parameter<T>*> parameters();
    std::vector<Parameter<T>*> attention_parameters();
    std::vector<BatchNorm<T>*> batchnorms();

    const BlockSpec& spec() const { return spec_; }
    const BridgeSourceConfig& sources() const { return sources_; }
    std::size_t spatial_out(std::size_t in) const { return (in - 1) / spec_.stride + 1; }

    Conv2d<T> conv1, conv2, conv3;
    BatchNorm<T> bn1, bn2, bn3;
    std::optional<Conv2d<T>> down;
    std::optional<BatchNorm<T>> down_bn;
    std::optional<SeAttention<T>> se;
    std::optional<BridgeAttention<T>> ba;

private:
    std::size_t tap_width(Tap tap) const;

    BlockSpec spec_;
    BridgeSourceConfig sources_;
};

// Copies values from `src` into same-named entries of `dst`; returns how many matched.
template <typename T>
std::size_t assign_by_name(const std::vector<Parameter<T>*>& dst, const std::vector<Parameter<T>*>& src);

}  // namespace banet
