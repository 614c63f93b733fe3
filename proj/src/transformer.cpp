#include "banet/transformer.hpp"

namespace banet {

std::string to_string(Integration integration) {
    switch (integration) {
        case Integration::none: return "none";
        case Integration::ba_mlp: return "ba_mlp";
        case Integration::se_mlp: return "se_mlp";
        case Integration::ba_block: return "ba_block";
        case Integration::ba_stage: return "ba_stage";
    }
    return "?";
}

Integration parse_integration(std::string_view name) {
    if (name == "none") return Integration::none;
    if (name == "ba_mlp") return Integration::ba_mlp;
    if (name == "se_mlp") return Integration::se_mlp;
    if (name == "ba_block") return Integration::ba_block;
    if (name == "ba_stage") return Integration::ba_stage;
    throw std::invalid_argument("unknown transformer integration '" + std::string(name) + "'");
}

template <typename T>
TransformerBlock<T>::TransformerBlock(std::string name, const TransformerSpec& spec, std::mt19937_64& rng)
    : spec_(spec) {
    if (spec.integration == Integration::ba_stage) {
        throw std::invalid_argument("ba_stage attaches to a TransformerStage, not a single block");
    }
    const std::string p = name.empty() ? "" : name + ".";
    const std::size_t d = spec.dim, hidden = spec.mlp_ratio * spec.dim;
    ln1 = LayerNorm<T>(p + "ln1", d);
    attn = MultiHeadSelfAttention<T>(p + "attn", d, spec.heads, rng);
    ln2 = LayerNorm<T>(p + "ln2", d);
    fc1 = Linear<T>(p + "fc1", d, hidden, true, rng);
    fc2 = Linear<T>(p + "fc2", hidden, d, true, rng);
    switch (spec.integration) {
        case Integration::ba_mlp:
            ba = BridgeAttention<T>(p + "ba", AttentionKind::bav2, {hidden, d}, d, spec.reduction, spec.pooling, rng);
            break;
        case Integration::ba_block:
            ba = BridgeAttention<T>(p + "ba", AttentionKind::bav2, {d, d}, d, spec.reduction, spec.pooling, rng);
            break;
        case Integration::se_mlp: se = SeAttention<T>(p + "se", d, spec.reduction, spec.pooling, rng); break;
        default: break;
    }
}

template <typename T>
Var<T> TransformerBlock<T>::forward(Graph<T>& g, Var<T> x, const ForwardOptions& opts, TransformerTrace<T>* trace) {
    if (x.value().rank() != 3 || x.shape()[2] != spec_.dim) {
        throw ShapeError("transformer block expects [N,T," + std::to_string(spec_.dim) + "], got " +
                         shape_str(x.shape()));
    }
    TransformerTrace<T> local;
    TransformerTrace<T>& tr = trace ? *trace : local;
    tr = TransformerTrace<T>{};

    Var<T> a = attn.forward(g, ln1.forward(g, x));
    tr.attn_out = a;
    Var<T> x1 = add(x, a);
    Var<T> h = relu(fc1.forward(g, ln2.forward(g, x1)));
    tr.fc1 = h;
    Var<T> m = fc2.forward(g, h);
    tr.fc2 = m;

    if (ba || se) {
        Var<T> w;
        if (opts.bypass_attention) {
            w = g.constant(Tensor<T>(Shape{m.shape()[0], spec_.dim}, T(1)));
        } else if (se) {
            w = se->forward(g, tokens_to_channels(m));
        } else {
            Var<T> first = spec_.integration == Integration::ba_mlp ? h : a;
            std::vector<Var<T>> taps{tokens_to_channels(first), tokens_to_channels(m)};
            w = ba->forward(g, taps, opts.mode, &tr.squeezed);
        }
        tr.weights = w;
        m = token_scale(m, w);
    }
    Var<T> out = add(x1, m);
    tr.out = out;
    return out;
}

template <typename T>
std::vector<Parameter<T>*> TransformerBlock<T>::parameters() {
    std::vector<Parameter<T>*> out;
    ln1.parameters(out);
    attn.parameters(out);
    ln2.parameters(out);
    fc1.parameters(out);
    fc2.parameters(out);
    if (ba) ba->parameters(out);
    if (se) se->parameters(out);
    return out;
}

template <typename T>
std::vector<BatchNorm<T>*> TransformerBlock<T>::batchnorms() {
    std::vector<BatchNorm<T>*> out;
    if (ba) out.push_back(&ba->gen_bn);
    return out;
}

template <typename T>
TransformerStage<T>::TransformerStage(std::string name, const TransformerSpec& spec, std::mt19937_64& rng)
    : spec_(spec) {
    const std::string p = name.empty() ? "" : name + ".";
    TransformerSpec inner = spec;
    if (spec.integration == Integration::ba_stage) inner.integration = Integration::none;
    blocks.reserve(2);
    for (std::size_t i = 0; i < 2; ++i) blocks.emplace_back(p + "block" + std::to_string(i), inner, rng);
    if (spec.integration == Integration::ba_stage) {
        ba = BridgeAttention<T>(p + "ba", AttentionKind::bav2, {spec.dim, spec.dim}, spec.dim, spec.reduction,
                                spec.pooling, rng);
    }
}

template <typename T>
Var<T> TransformerStage<T>::forward(Graph<T>& g, Var<T> x, const ForwardOptions& opts,
                                    std::vector<TransformerTrace<T>>* traces, TransformerTrace<T>* stage_trace) {
    std::vector<TransformerTrace<T>> local(blocks.size());
    std::vector<TransformerTrace<T>>& trs = traces ? *traces : local;
    trs.assign(blocks.size(), TransformerTrace<T>{});
    Var<T> h = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        h = blocks[i].forward(g, h, opts, &trs[i]);
    }
    if (!ba) return h;

    TransformerTrace<T> local_stage;
    TransformerTrace<T>& st = stage_trace ? *stage_trace : local_stage;
    st = TransformerTrace<T>{};
    Var<T> w;
    if (opts.bypass_attention) {
        w = g.constant(Tensor<T>(Shape{h.shape()[0], spec_.dim}, T(1)));
    } else {
        std::vector<Var<T>> taps{tokens_to_channels(trs[0].out), tokens_to_channels(trs[1].out)};
        w = ba->forward(g, taps, opts.mode, &st.squeezed);
    }
    st.weights = w;
    st.out = token_scale(h, w);
    return st.out;
}

template <typename T>
std::vector<Parameter<T>*> TransformerStage<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& b : blocks) {
        for (auto* p : b.parameters()) out.push_back(p);
    }
    if (ba) ba->parameters(out);
    return out;
}

template <typename T>
std::vector<BatchNorm<T>*> TransformerStage<T>::batchnorms() {
    std::vector<BatchNorm<T>*> out;
    for (auto& b : blocks) {
        for (auto* bn : b.batchnorms()) out.push_back(bn);
    }
    if (ba) out.push_back(&ba->gen_bn);
    return out;
}

template class TransformerBlock<float>;
template class TransformerBlock<double>;
template class TransformerStage<float>;
template class TransformerStage<double>;
template class TransformerBlock<long double>;
template class TransformerStage<long double>;

}  // namespace banet
