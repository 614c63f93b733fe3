#include "banet/blocks.hpp"

#include <algorithm>
#include <map>

namespace banet {

TapType tap_type(Tap tap) { return tap == Tap::prev_attn ? TapType::attention_weights : TapType::conv; }

std::string to_string(Tap tap) {
    switch (tap) {
        case Tap::prev_conv_last: return "prev_conv3";
        case Tap::prev_end: return "prev_end";
        case Tap::prev_attn: return "prev_attn";
        case Tap::curr_conv1: return "curr_conv1";
        case Tap::curr_conv2: return "curr_conv2";
        case Tap::adjacent: return "adjacent";
    }
    return "?";
}

Tap parse_tap(std::string_view name) {
    if (name == "prev_conv3" || name == "prev_conv_last") return Tap::prev_conv_last;
    if (name == "prev_end") return Tap::prev_end;
    if (name == "prev_attn") return Tap::prev_attn;
    if (name == "curr_conv1") return Tap::curr_conv1;
    if (name == "curr_conv2") return Tap::curr_conv2;
    if (name == "adjacent" || name == "curr_conv3") return Tap::adjacent;
    throw std::invalid_argument("unknown bridge tap '" + std::string(name) + "'");
}

BridgeSourceConfig BridgeSourceConfig::all_convs(BlockKind kind) {
    if (kind == BlockKind::bottleneck) return {{Tap::curr_conv1, Tap::curr_conv2, Tap::adjacent}};
    return {{Tap::curr_conv1, Tap::adjacent}};
}

std::vector<std::pair<std::string, BridgeSourceConfig>> BridgeSourceConfig::ablation_rows() {
    return {
        {"attn prev.conv3", {{Tap::prev_attn, Tap::adjacent}}},
        {"conv prev.conv3", {{Tap::prev_conv_last, Tap::adjacent}}},
        {"conv prev.end", {{Tap::prev_end, Tap::adjacent}}},
        {"conv curr.conv1", {{Tap::curr_conv1, Tap::adjacent}}},
        {"conv curr.conv2", {{Tap::curr_conv2, Tap::adjacent}}},
        {"conv curr.conv1&2", {{Tap::curr_conv1, Tap::curr_conv2, Tap::adjacent}}},
    };
}

bool BridgeSourceConfig::needs_predecessor() const {
    return std::any_of(sources.begin(), sources.end(), [](Tap t) {
        return t == Tap::prev_conv_last || t == Tap::prev_end || t == Tap::prev_attn;
    });
}

void BridgeSourceConfig::validate(BlockKind kind) const {
    if (std::find(sources.begin(), sources.end(), Tap::adjacent) == sources.end()) {
        throw std::invalid_argument("bridge sources must include the adjacent layer");
    }
    for (std::size_t i = 0; i < sources.size(); ++i) {
        for (std::size_t j = i + 1; j < sources.size(); ++j) {
            if (sources[i] == sources[j]) throw std::invalid_argument("bridge tap repeated: " + to_string(sources[i]));
        }
    }
    if (kind == BlockKind::basic &&
        std::find(sources.begin(), sources.end(), Tap::curr_conv2) != sources.end()) {
        throw std::invalid_argument("basic block: conv2 is the adjacent layer, use 'adjacent'");
    }
}

std::string BridgeSourceConfig::label() const {
    std::string s;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        if (i) s += '+';
        s += to_string(sources[i]);
    }
    return s;
}

template <typename T>
std::vector<Var<T>> bridge_tap(const BlockTrace<T>* prev, const BlockTrace<T>& curr, const BridgeSourceConfig& cfg) {
    std::vector<Var<T>> out;
    out.reserve(cfg.sources.size());
    auto need_prev = [prev](Tap t) -> const BlockTrace<T>& {
        if (!prev) throw std::invalid_argument("bridge tap " + to_string(t) + " requested on a block with no predecessor");
        return *prev;
    };
    for (Tap t : cfg.sources) {
        Var<T> v;
        switch (t) {
            case Tap::prev_conv_last: v = need_prev(t).adjacent; break;
            case Tap::prev_end: v = need_prev(t).end; break;
            case Tap::prev_attn: {
                const Var<T>& w = need_prev(t).weights;
                if (!w.valid()) throw std::invalid_argument("prev_attn tap: previous block has no attention weights");
                v = reshape(w, Shape{w.shape()[0], w.shape()[1], 1, 1});
                break;
            }
            case Tap::curr_conv1: v = curr.conv1; break;
            case Tap::curr_conv2: v = curr.conv2; break;
            case Tap::adjacent: v = curr.adjacent; break;
        }
        if (!v.valid()) throw std::invalid_argument("bridge tap " + to_string(t) + " is not available in this trace");
        out.push_back(v);
    }
    return out;
}

template <typename T>
ResidualBlock<T>::ResidualBlock(std::string name, BlockSpec spec, std::mt19937_64& rng) : spec_(spec) {
    if (spec.kind == BlockKind::transformer) throw std::invalid_argument("ResidualBlock: transformer spec");
    if (spec.in_channels == 0 || spec.width == 0 || spec.stride == 0) throw ShapeError("ResidualBlock: zero extent");
    const std::size_t w = spec.width, out = spec.out_channels();
    const std::string p = name.empty() ? "" : name + ".";
    if (spec.kind == BlockKind::bottleneck) {
        conv1 = Conv2d<T>(p + "conv1", spec.in_channels, w, 1, 1, 0, rng, Extent::floor);
        conv2 = Conv2d<T>(p + "conv2", w, w, 3, spec.stride, 1, rng, Extent::floor);
        conv3 = Conv2d<T>(p + "conv3", w, out, 1, 1, 0, rng, Extent::floor);
        bn3 = BatchNorm<T>(p + "bn3", out);
    } else {
        conv1 = Conv2d<T>(p + "conv1", spec.in_channels, w, 3, spec.stride, 1, rng, Extent::floor);
        conv2 = Conv2d<T>(p + "conv2", w, w, 3, 1, 1, rng, Extent::floor);
    }
    bn1 = BatchNorm<T>(p + "bn1", w);
    bn2 = BatchNorm<T>(p + "bn2", w);
    if (spec.has_downsample()) {
        down = Conv2d<T>(p + "down", spec.in_channels, out, 1, spec.stride, 0, rng, Extent::floor);
        down_bn = BatchNorm<T>(p + "down_bn", out);
    }

    const AttentionConfig& a = spec.attention;
    sources_ = a.sources.value_or(BridgeSourceConfig::all_convs(spec.kind));
    if (a.kind == AttentionKind::se) {
        se = SeAttention<T>(p + "se", out, a.reduction, a.pooling, rng);
    } else if (a.kind == AttentionKind::bav1 || a.kind == AttentionKind::bav2) {
        sources_.validate(spec.kind);
        std::vector<std::size_t> widths;
        for (Tap t : sources_.sources) widths.push_back(tap_width(t));
        ba = BridgeAttention<T>(p + "ba", a.kind, widths, out, a.reduction, a.pooling, rng);
    }
}

template <typename T>
std::size_t ResidualBlock<T>::tap_width(Tap tap) const {
    switch (tap) {
        case Tap::prev_conv_last:
        case Tap::prev_end:
        case Tap::prev_attn:
            if (spec_.prev_out_channels == 0) {
                throw std::invalid_argument("bridge tap " + to_string(tap) + " requested on the first block");
            }
            return spec_.prev_out_channels;
        case Tap::curr_conv1:
        case Tap::curr_conv2: return spec_.width;
        case Tap::adjacent: return spec_.out_channels();
    }
    return 0;
}

template <typename T>
Var<T> ResidualBlock<T>::forward(Graph<T>& g, Var<T> x, const ForwardOptions& opts, const BlockTrace<T>* prev,
                                 BlockTrace<T>* trace) {
    if (x.value().rank() != 4 || x.shape()[1] != spec_.in_channels) {
        throw ShapeError("residual block expects " + std::to_string(spec_.in_channels) + " channels, got " +
                         shape_str(x.shape()));
    }
    BlockTrace<T> local;
    BlockTrace<T>& tr = trace ? *trace : local;
    tr = BlockTrace<T>{};

    Var<T> h = relu(bn1.forward(g, conv1.forward(g, x), opts.mode));
    tr.conv1 = h;
    if (spec_.kind == BlockKind::bottleneck) {
        h = relu(bn2.forward(g, conv2.forward(g, h), opts.mode));
        tr.conv2 = h;
        h = bn3.forward(g, conv3.forward(g, h), opts.mode);
    } else {
        h = bn2.forward(g, conv2.forward(g, h), opts.mode);
    }
    tr.adjacent = h;

    if (se || ba) {
        Var<T> w;
        if (opts.bypass_attention) {
            w = g.constant(Tensor<T>(Shape{h.shape()[0], h.shape()[1]}, T(1)));
        } else if (se) {
            w = se->forward(g, h);
        } else {
            std::vector<Var<T>> taps = bridge_tap(prev, tr, sources_);
            w = ba->forward(g, taps, opts.mode, &tr.squeezed);
        }
        tr.weights = w;
        h = channel_scale(h, w);
    }

    Var<T> shortcut = x;
    if (down) shortcut = down_bn->forward(g, down->forward(g, x), opts.mode);
    Var<T> out = relu(add(h, shortcut));
    tr.end = out;
    return out;
}

template <typename T>
std::vector<Parameter<T>*> ResidualBlock<T>::parameters() {
    std::vector<Parameter<T>*> out;
    conv1.parameters(out);
    bn1.parameters(out);
    conv2.parameters(out);
    bn2.parameters(out);
    if (spec_.kind == BlockKind::bottleneck) {
        conv3.parameters(out);
        bn3.parameters(out);
    }
    if (down) {
        down->parameters(out);
        down_bn->parameters(out);
    }
    for (auto* p : attention_parameters()) out.push_back(p);
    return out;
}

template <typename T>
std::vector<Parameter<T>*> ResidualBlock<T>::attention_parameters() {
    std::vector<Parameter<T>*> out;
    if (se) se->parameters(out);
    if (ba) ba->parameters(out);
    return out;
}

template <typename T>
std::vector<BatchNorm<T>*> ResidualBlock<T>::batchnorms() {
    std::vector<BatchNorm<T>*> out{&bn1, &bn2};
    if (spec_.kind == BlockKind::bottleneck) out.push_back(&bn3);
    if (down_bn) out.push_back(&*down_bn);
    if (ba) {
        if (ba->variant() == AttentionKind::bav2) {
            out.push_back(&ba->gen_bn);
        } else {
            for (auto& bn : ba->branch_bn) out.push_back(&bn);
        }
    }
    return out;
}

template <typename T>
std::size_t assign_by_name(const std::vector<Parameter<T>*>& dst, const std::vector<Parameter<T>*>& src) {
    std::map<std::string, const Parameter<T>*> by_name;
    for (const auto* p : src) by_name[p->name] = p;
    std::size_t n = 0;
    for (auto* p : dst) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) continue;
        if (it->second->value.shape() != p->value.shape()) throw ShapeError("assign_by_name: shape mismatch for " + p->name);
        p->value = it->second->value;
        ++n;
    }
    return n;
}

template std::vector<Var<float>> bridge_tap(const BlockTrace<float>*, const BlockTrace<float>&,
                                            const BridgeSourceConfig&);
template std::vector<Var<double>> bridge_tap(const BlockTrace<double>*, const BlockTrace<double>&,
                                             const BridgeSourceConfig&);
template class ResidualBlock<float>;
template class ResidualBlock<double>;
template std::vector<Var<long double>> bridge_tap(const BlockTrace<long double>*, const BlockTrace<long double>&,
                                                  const BridgeSourceConfig&);
template class ResidualBlock<long double>;
template std::size_t assign_by_name(const std::vector<Parameter<float>*>&, const std::vector<Parameter<float>*>&);
template std::size_t assign_by_name(const std::vector<Parameter<double>*>&, const std::vector<Parameter<double>*>&);

}  // namespace banet
