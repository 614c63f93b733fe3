#include "banet/attention.hpp"

#include <cmath>
#include <numbers>

namespace banet {

std::string to_string(PoolKind kind) {
    switch (kind) {
        case PoolKind::avg: return "avg";
        case PoolKind::avg_max: return "avg_max";
        case PoolKind::avg_std: return "avg_std";
        case PoolKind::dct: return "dct";
    }
    return "?";
}

PoolKind parse_pool_kind(std::string_view name) {
    if (name == "avg") return PoolKind::avg;
    if (name == "avg_max") return PoolKind::avg_max;
    if (name == "avg_std") return PoolKind::avg_std;
    if (name == "dct") return PoolKind::dct;
    throw std::invalid_argument("unknown pooling strategy '" + std::string(name) + "'");
}

std::string to_string(AttentionKind kind) {
    switch (kind) {
        case AttentionKind::none: return "none";
        case AttentionKind::se: return "se";
        case AttentionKind::bav1: return "bav1";
        case AttentionKind::bav2: return "bav2";
    }
    return "?";
}

AttentionKind parse_attention_kind(std::string_view name) {
    if (name == "none" || name == "base") return AttentionKind::none;
    if (name == "se") return AttentionKind::se;
    if (name == "bav1" || name == "v1") return AttentionKind::bav1;
    if (name == "bav2" || name == "v2") return AttentionKind::bav2;
    throw std::invalid_argument("unknown attention variant '" + std::string(name) + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> dct_zigzag(std::size_t h, std::size_t w, std::size_t k) {
    if (k > h * w) {
        throw ShapeError("dct: " + std::to_string(k) + " components requested from a " + std::to_string(h) + "x" +
                         std::to_string(w) + " map");
    }
    std::vector<std::pair<std::size_t, std::size_t>> order;
    order.reserve(h * w);
    for (std::size_t s = 0; s + 1 < h + w && order.size() < k; ++s) {
        const std::size_t u_lo = s >= w ? s - w + 1 : 0;
        const std::size_t u_hi = std::min(s, h - 1);
        if (s % 2 == 0) {
            for (std::size_t u = u_hi + 1; u-- > u_lo;) order.emplace_back(u, s - u);
        } else {
            for (std::size_t u = u_lo; u <= u_hi; ++u) order.emplace_back(u, s - u);
        }
    }
    order.resize(k);
    return order;
}

template <typename T>
Tensor<T> dct_basis(std::size_t h, std::size_t w, std::size_t u, std::size_t v) {
    const double pi = std::numbers::pi;
    const double au = u == 0 ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
    const double av = v == 0 ? std::sqrt(1.0 / w) : std::sqrt(2.0 / w);
    Tensor<T> b(Shape{h, w});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            b(i, j) = static_cast<T>(au * av * std::cos(pi * (2.0 * i + 1.0) * u / (2.0 * h)) *
                                     std::cos(pi * (2.0 * j + 1.0) * v / (2.0 * w)));
        }
    }
    return b;
}

template <typename T>
Tensor<T> dct_coefficients(const Tensor<T>& map, std::size_t k) {
    if (map.rank() != 2) throw ShapeError("dct_coefficients: expected [H,W] map");
    const std::size_t h = map.dim(0), w = map.dim(1);
    Tensor<T> out(Shape{k});
    std::size_t idx = 0;
    for (auto [u, v] : dct_zigzag(h, w, k)) {
        Tensor<T> b = dct_basis<T>(h, w, u, v);
        T acc = 0;
        for (std::size_t i = 0; i < map.size(); ++i) acc += map[i] * b[i];
        out[idx++] = acc;
    }
    return out;
}

template <typename T>
Var<T> pool(Var<T> x, const PoolingStrategy& strategy) {
    switch (strategy.kind) {
        case PoolKind::avg: return gap(x);
        case PoolKind::avg_max: return concat_features(gap(x), spatial_max(x));
        case PoolKind::avg_std: return concat_features(gap(x), spatial_std(x));
        case PoolKind::dct: {
            if (x.value().rank() != 4) throw ShapeError("pool: expected [N,C,H,W]");
            const std::size_t h = x.shape()[2], w = x.shape()[3];
            Tensor<T> filter(Shape{h, w});
            for (auto [u, v] : dct_zigzag(h, w, strategy.dct_components)) filter += dct_basis<T>(h, w, u, v);
            return spatial_filter(x, filter);
        }
    }
    throw std::logic_error("unhandled pooling strategy");
}

namespace {

std::size_t reduced_width(std::size_t channels, std::size_t reduction) {
    if (reduction == 0 || channels % reduction != 0) {
        throw ShapeError("reduction ratio " + std::to_string(reduction) + " does not divide " +
                         std::to_string(channels) + " channels");
    }
    return channels / reduction;
}

}  // namespace

template <typename T>
SeAttention<T>::SeAttention(std::string name, std::size_t channels, std::size_t reduction, PoolingStrategy pooling,
                            std::mt19937_64& rng)
    : pooling_(pooling) {
    const std::size_t red = reduced_width(channels, reduction);
    const std::size_t in = channels * pooling.statistics();
    w1 = Parameter<T>(name + ".w1", ParamRole::weight, fan_in_uniform<T>(Shape{red, in}, in, rng));
    w2 = Parameter<T>(name + ".w2", ParamRole::weight, fan_in_uniform<T>(Shape{channels, red}, red, rng));
}

template <typename T>
Var<T> SeAttention<T>::forward(Graph<T>& g, Var<T> x) {
    if (x.value().rank() != 4 || x.shape()[1] != channels()) {
        throw ShapeError("se: expected " + std::to_string(channels()) + " channels, got " + shape_str(x.shape()));
    }
    Var<T> z = pool(x, pooling_);
    return sigmoid(linear(relu(linear(z, g.param(w1))), g.param(w2)));
}

template <typename T>
void SeAttention<T>::parameters(std::vector<Parameter<T>*>& out) {
    out.push_back(&w1);
    out.push_back(&w2);
}

template <typename T>
BridgeAttention<T>::BridgeAttention(std::string name, AttentionKind variant, std::vector<std::size_t> branch_widths,
                                    std::size_t out_channels, std::size_t reduction, PoolingStrategy pooling,
                                    std::mt19937_64& rng)
    : variant_(variant), branch_widths_(std::move(branch_widths)), pooling_(pooling) {
    if (variant != AttentionKind::bav1 && variant != AttentionKind::bav2) {
        throw std::invalid_argument("bridge attention variant must be bav1 or bav2");
    }
    if (branch_widths_.empty()) throw ShapeError("bridge attention needs at least one branch");
    const std::size_t red = reduced_width(out_channels, reduction);
    const std::size_t n = branch_widths_.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t in = branch_widths_[i] * pooling.statistics();
        branch_proj.emplace_back(name + ".proj" + std::to_string(i), ParamRole::weight,
                                 fan_in_uniform<T>(Shape{red, in}, in, rng));
    }
    if (variant == AttentionKind::bav1) {
        for (std::size_t i = 0; i < n; ++i) branch_bn.emplace_back(name + ".bn" + std::to_string(i), red);
    } else {
        fusion = Parameter<T>(name + ".fusion", ParamRole::fusion, Tensor<T>(Shape{n}, T(1) / static_cast<T>(n)));
        gen_bn = BatchNorm<T>(name + ".gen_bn", red);
    }
    w2 = Parameter<T>(name + ".w2", ParamRole::weight, fan_in_uniform<T>(Shape{out_channels, red}, red, rng));
}

template <typename T>
Var<T> BridgeAttention<T>::integrate(Graph<T>& g, std::span<const Var<T>> xs, Mode mode,
                                     std::vector<Var<T>>* squeezed) {
    if (xs.size() != branches()) {
        throw ShapeError("bridge attention expects " + std::to_string(branches()) + " branches, got " +
                         std::to_string(xs.size()));
    }
    Var<T> fused;
    Var<T> f = variant_ == AttentionKind::bav2 ? g.param(fusion) : Var<T>();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].value().rank() != 4 || xs[i].shape()[1] != branch_widths_[i]) {
            throw ShapeError("bridge branch " + std::to_string(i) + " expects " + std::to_string(branch_widths_[i]) +
                             " channels, got " + shape_str(xs[i].shape()));
        }
        Var<T> s = linear(pool(xs[i], pooling_), g.param(branch_proj[i]));
        if (squeezed) squeezed->push_back(s);
        Var<T> term = variant_ == AttentionKind::bav2 ? scale_by_entry(s, f, i) : branch_bn[i].forward(g, s, mode);
        fused = fused.valid() ? add(fused, term) : term;
    }
    return fused;
}

template <typename T>
Var<T> BridgeAttention<T>::generate(Graph<T>& g, Var<T> s, Mode mode) {
    if (s.value().rank() != 2 || s.shape()[1] != reduced()) {
        throw ShapeError("bridge generation expects width " + std::to_string(reduced()) + ", got " +
                         shape_str(s.shape()));
    }
    if (variant_ == AttentionKind::bav2) s = gen_bn.forward(g, s, mode);
    return sigmoid(linear(relu(s), g.param(w2)));
}

template <typename T>
void BridgeAttention<T>::parameters(std::vector<Parameter<T>*>& out) {
    for (auto& p : branch_proj) out.push_back(&p);
    if (variant_ == AttentionKind::bav2) {
        out.push_back(&fusion);
        gen_bn.parameters(out);
    } else {
        for (auto& bn : branch_bn) bn.parameters(out);
    }
    out.push_back(&w2);
}

AttentionParamCount attention_param_count(std::span<const std::size_t> branch_widths, std::size_t out_channels,
                                          std::size_t reduction, AttentionKind kind, Counting counting,
                                          std::size_t statistics) {
    AttentionParamCount c;
    if (kind == AttentionKind::none) return c;
    const std::size_t red = reduced_width(out_channels, reduction);
    const std::size_t per_bn = counting == Counting::per_channel_bn ? 1 : 2;
    if (kind == AttentionKind::se) {
        c.projections = red * out_channels * statistics;
        c.generation = out_channels * red;
        return c;
    }
    const std::size_t n = branch_widths.size();
    for (std::size_t w : branch_widths) c.projections += red * w * statistics;
    c.generation = out_channels * red;
    if (kind == AttentionKind::bav1) {
        c.bn = n * red * per_bn;
    } else {
        c.fusion = n;
        c.bn = red * per_bn;
    }
    return c;
}

std::size_t attention_extra_params(std::size_t n, std::size_t out_channels, std::size_t reduction, AttentionKind kind,
                                   Counting counting) {
    std::vector<std::size_t> widths(n, out_channels);
    return attention_param_count(widths, out_channels, reduction, kind, counting).extras();
}

template <typename T>
AttentionParamCount enumerate_attention_params(const std::vector<Parameter<T>*>& params, AttentionKind kind,
                                               Counting counting) {
    AttentionParamCount c;
    if (kind == AttentionKind::none) return c;
    for (const auto* p : params) {
        const std::size_t n = p->value.size();
        switch (p->role) {
            case ParamRole::fusion: c.fusion += n; break;
            case ParamRole::bn_gamma: c.bn += n; break;
            case ParamRole::bn_beta:
                if (counting == Counting::actual) c.bn += n;
                break;
            case ParamRole::weight:
                if (p->name.ends_with(".w2")) {
                    c.generation += n;
                } else {
                    c.projections += n;
                }
                break;
            default: throw std::invalid_argument("unexpected parameter '" + p->name + "' in attention module");
        }
    }
    return c;
}

template Tensor<float> dct_basis<float>(std::size_t, std::size_t, std::size_t, std::size_t);
template Tensor<double> dct_basis<double>(std::size_t, std::size_t, std::size_t, std::size_t);
template Tensor<float> dct_coefficients<float>(const Tensor<float>&, std::size_t);
template Tensor<double> dct_coefficients<double>(const Tensor<double>&, std::size_t);
template Var<float> pool<float>(Var<float>, const PoolingStrategy&);
template Var<double> pool<double>(Var<double>, const PoolingStrategy&);
template class SeAttention<float>;
template class SeAttention<double>;
template class BridgeAttention<float>;
template class BridgeAttention<double>;
template AttentionParamCount enumerate_attention_params<float>(const std::vector<Parameter<float>*>&, AttentionKind,
                                                               Counting);
template AttentionParamCount enumerate_attention_params<double>(const std::vector<Parameter<double>*>&,
                                                                AttentionKind, Counting);
template Tensor<long double> dct_basis<long double>(std::size_t, std::size_t, std::size_t, std::size_t);
template Var<long double> pool<long double>(Var<long double>, const PoolingStrategy&);
template class SeAttention<long double>;
template class BridgeAttention<long double>;

}  // namespace banet
