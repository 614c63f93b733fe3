#include "banet/suites.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "banet/gradcheck.hpp"

namespace banet {

namespace {

using D = double;
using L = long double;

double g_eps = 1e-6;

template <typename T>
std::shared_ptr<Parameter<T>> input_param(std::string name, Shape shape, std::mt19937_64& rng) {
    return std::make_shared<Parameter<T>>(std::move(name), ParamRole::input,
                                          Tensor<T>::normal(std::move(shape), T(0), T(1), rng));
}

// Scaling weights as an attention module would emit them.
template <typename T>
std::shared_ptr<Parameter<T>> gate_param(std::string name, Shape shape, std::mt19937_64& rng) {
    return std::make_shared<Parameter<T>>(std::move(name), ParamRole::input,
                                          Tensor<T>::uniform(std::move(shape), T(0.1), T(0.9), rng));
}

// sum(v * R) for a fixed random R, so every output coordinate matters. R has
// its own stream; drawing it like the inputs would make R equal to x.
template <typename T>
Var<T> probe(Graph<T>& g, Var<T> v, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dULL);
    return sum(mul(v, g.constant(Tensor<D>::normal(v.shape(), 0.0, 1.0, rng).template cast<T>())));
}

// A loss over shared modules, built identically at any precision. The loss
// takes the BN mode so running statistics can be calibrated on the batch.
template <typename T>
struct Problem {
    std::vector<Parameter<T>*> params;
    std::vector<BatchNorm<T>*> bns;
    std::function<Var<T>(Graph<T>&, Mode)> loss;
};

template <typename T, typename M>
void add_params(std::vector<Parameter<T>*>& ps, M& module) {
    if constexpr (requires { module.parameters(ps); }) {
        module.parameters(ps);
    } else {
        for (auto* p : module.parameters()) ps.push_back(p);
    }
}

// Affine BN parameters near identity, then running statistics set to those
// of the probe batch so no channel sits far outside the ReLU's active range.
void calibrate(Problem<D>& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    std::uniform_real_distribution<double> scale(0.8, 1.2), shift(-0.2, 0.2);
    for (auto* bn : p.bns) {
        for (auto& v : bn->gamma.value.data()) v = scale(rng);
        for (auto& v : bn->beta.value.data()) v = shift(rng);
        bn->state.momentum = 1.0;
    }
    Graph<D> g;
    p.loss(g, Mode::train);
    for (auto* bn : p.bns) bn->state.momentum = 0.1;
}

template <typename B>
GradCheckResult solve(const B& build, std::uint64_t seed) {
    Problem<D> p = build.template operator()<D>(seed);
    Problem<L> q = build.template operator()<L>(seed);
    calibrate(p, seed);
    for (std::size_t i = 0; i < p.bns.size(); ++i) {
        q.bns[i]->state.running_mean = p.bns[i]->state.running_mean.template cast<L>();
        q.bns[i]->state.running_var = p.bns[i]->state.running_var.template cast<L>();
    }
    GradCheckOptions opts;
    opts.seed = seed;
    opts.eps = g_eps;
    return grad_check<D, L>([&p](Graph<D>& g) { return p.loss(g, Mode::eval); }, p.params,
                            [&q](Graph<L>& g) { return q.loss(g, Mode::eval); }, q.params, opts);
}

struct Check {
    std::string name;
    double threshold;
    std::function<GradCheckResult(std::uint64_t)> run;
};

template <typename B>
Check make_check(std::string name, double threshold, B build) {
    return {std::move(name), threshold, [build](std::uint64_t seed) { return solve(build, seed); }};
}

CheckRecord record(const std::string& suite, const Check& c, std::uint64_t seed) {
    const GradCheckResult r = c.run(seed);
    CheckRecord out{suite, c.name, r.max_rel_error, c.threshold, r.coords_checked, "", r.worst_analytic, r.worst_numeric};
    out.worst = r.worst_param + "[" + std::to_string(r.worst_index) + "]";
    return out;
}

// Checks a unary op on a single random input.
template <typename F>
Check unary_check(std::string name, double threshold, Shape shape, F op) {
    return make_check(std::move(name), threshold, [shape, op]<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", shape, rng);
        return Problem<T>{{x.get()}, {}, [x, op, seed](Graph<T>& g, Mode) { return probe(g, op(g.param(*x)), seed); }};
    });
}

// ---------------------------------------------------------------- ops

std::vector<Check> ops_checks() {
    std::vector<Check> cs;
    cs.push_back(unary_check("gap", kConvPathThreshold, {2, 3, 5, 5}, [](auto x) { return gap(x); }));
    cs.push_back(make_check("linear", 1e-7, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", {4, 8}, rng);
        auto lin = std::make_shared<Linear<T>>("fc", 8, 3, true, rng);
        std::vector<Parameter<T>*> ps{x.get()};
        add_params(ps, *lin);
        return Problem<T>{ps, {}, [x, lin, seed](Graph<T>& g, Mode) { return probe(g, lin->forward(g, g.param(*x)), seed); }};
    }));
    for (std::size_t stride : {1, 2}) {
        cs.push_back(make_check("conv2d_s" + std::to_string(stride), kConvPathThreshold,
                                [stride]<typename T>(std::uint64_t seed) {
                                    std::mt19937_64 rng(seed);
                                    auto x = input_param<T>("x", {2, 3, 7 + stride, 7 + stride}, rng);
                                    auto k = input_param<T>("k", {4, 3, 3, 3}, rng);
                                    return Problem<T>{{x.get(), k.get()}, {}, [x, k, stride, seed](Graph<T>& g, Mode) {
                                                          return probe(g, conv2d(g.param(*x), g.param(*k), stride, 1), seed);
                                                      }};
                                }));
    }
    cs.push_back(make_check("batchnorm_train", 1e-5, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", {8, 16}, rng);
        auto bn = std::make_shared<BatchNorm<T>>("bn", 16);
        std::vector<Parameter<T>*> ps{x.get()};
        add_params(ps, *bn);
        return Problem<T>{ps, {bn.get()}, [x, bn, seed](Graph<T>& g, Mode) {
                              BatchNormState<T> scratch = bn->state;  // keep running stats fixed across probes
                              return probe(g, batchnorm(g.param(*x), g.param(bn->gamma), g.param(bn->beta), scratch, Mode::train),
                                           seed);
                          }};
    }));
    cs.push_back(make_check("batchnorm_eval", kConvPathThreshold, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", {2, 3, 4, 4}, rng);
        auto bn = std::make_shared<BatchNorm<T>>("bn", 3);
        std::vector<Parameter<T>*> ps{x.get()};
        add_params(ps, *bn);
        return Problem<T>{ps, {bn.get()},
                          [x, bn, seed](Graph<T>& g, Mode mode) { return probe(g, bn->forward(g, g.param(*x), mode), seed); }};
    }));
    cs.push_back(unary_check("sigmoid", 1e-7, {3, 7}, [](auto x) { return sigmoid(x); }));
    cs.push_back(unary_check("relu", 1e-7, {3, 7}, [](auto x) { return relu(x); }));
    cs.push_back(make_check("channel_scale", 1e-7, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", {2, 3, 4, 4}, rng);
        auto w = gate_param<T>("w", {2, 3}, rng);
        return Problem<T>{{x.get(), w.get()}, {}, [x, w, seed](Graph<T>& g, Mode) {
                              return probe(g, channel_scale(g.param(*x), g.param(*w)), seed);
                          }};
    }));
    cs.push_back(unary_check("spatial_max", kConvPathThreshold, {2, 3, 4, 4}, [](auto x) { return spatial_max(x); }));
    cs.push_back(unary_check("spatial_std", kConvPathThreshold, {2, 3, 4, 4}, [](auto x) { return spatial_std(x); }));
    cs.push_back(unary_check("pool_dct", kConvPathThreshold, {2, 3, 4, 4},
                             [](auto x) { return pool(x, PoolingStrategy{PoolKind::dct, 6}); }));
    cs.push_back(make_check("layernorm", kTransformerPathThreshold, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", {2, 4, 8}, rng);
        auto ln = std::make_shared<LayerNorm<T>>("ln", 8);
        std::uniform_real_distribution<double> pos(0.5, 1.5), any(-0.5, 0.5);
        for (auto& v : ln->gamma.value.data()) v = static_cast<T>(pos(rng));
        for (auto& v : ln->beta.value.data()) v = static_cast<T>(any(rng));
        std::vector<Parameter<T>*> ps{x.get()};
        add_params(ps, *ln);
        return Problem<T>{ps, {}, [x, ln, seed](Graph<T>& g, Mode) { return probe(g, ln->forward(g, g.param(*x)), seed); }};
    }));
    cs.push_back(make_check("mhsa", kTransformerPathThreshold, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", {2, 4, 8}, rng);
        auto attn = std::make_shared<MultiHeadSelfAttention<T>>("mhsa", 8, 2, rng);
        std::vector<Parameter<T>*> ps{x.get()};
        add_params(ps, *attn);
        return Problem<T>{ps, {}, [x, attn, seed](Graph<T>& g, Mode) { return probe(g, attn->forward(g, g.param(*x)), seed); }};
    }));
    cs.push_back(make_check("cross_entropy", 1e-7, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("logits", {5, 4}, rng);
        return Problem<T>{{x.get()}, {}, [x](Graph<T>& g, Mode) {
                              return softmax_cross_entropy(g.param(*x), std::vector<int>{0, 3, 1, 2, 3});
                          }};
    }));
    cs.push_back(make_check("patchify_tokens", 1e-7, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x = input_param<T>("x", {2, 3, 4, 4}, rng);
        auto w = gate_param<T>("w", {2, 12}, rng);
        return Problem<T>{{x.get(), w.get()}, {}, [x, w, seed](Graph<T>& g, Mode) {
                              Var<T> t = patchify(g.param(*x), 2);
                              return probe(g, token_mean(token_scale(t, g.param(*w))), seed);
                          }};
    }));
    return cs;
}

// ---------------------------------------------------------- attention

std::vector<Check> attention_checks() {
    std::vector<Check> cs;
    for (PoolKind kind : {PoolKind::avg, PoolKind::avg_max, PoolKind::avg_std, PoolKind::dct}) {
        const PoolingStrategy pooling{kind, 8};
        cs.push_back(make_check("se_" + to_string(kind), kConvPathThreshold, [pooling]<typename T>(std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            auto x = input_param<T>("x", {2, 8, 4, 4}, rng);
            auto se = std::make_shared<SeAttention<T>>("se", 8, 2, pooling, rng);
            std::vector<Parameter<T>*> ps{x.get()};
            add_params(ps, *se);
            return Problem<T>{ps, {}, [x, se, seed](Graph<T>& g, Mode) { return probe(g, se->forward(g, g.param(*x)), seed); }};
        }));
    }
    for (AttentionKind variant : {AttentionKind::bav1, AttentionKind::bav2}) {
        for (PoolKind kind : {PoolKind::avg, PoolKind::avg_max, PoolKind::avg_std, PoolKind::dct}) {
            const PoolingStrategy pooling{kind, 8};
            cs.push_back(make_check(
                to_string(variant) + "_" + to_string(kind), kConvPathThreshold,
                [variant, pooling]<typename T>(std::uint64_t seed) {
                    std::mt19937_64 rng(seed);
                    std::vector<std::shared_ptr<Parameter<T>>> xs{input_param<T>("x1", {2, 4, 4, 4}, rng),
                                                                  input_param<T>("x2", {2, 4, 4, 4}, rng),
                                                                  input_param<T>("x3", {2, 8, 4, 4}, rng)};
                    auto ba = std::make_shared<BridgeAttention<T>>("ba", variant, std::vector<std::size_t>{4, 4, 8}, 8, 2,
                                                                   pooling, rng);
                    std::vector<Parameter<T>*> ps;
                    for (auto& x : xs) ps.push_back(x.get());
                    add_params(ps, *ba);
                    std::vector<BatchNorm<T>*> bns;
                    for (auto& bn : ba->branch_bn) bns.push_back(&bn);
                    if (variant == AttentionKind::bav2) bns.push_back(&ba->gen_bn);
                    return Problem<T>{ps, bns, [xs, ba, seed](Graph<T>& g, Mode mode) {
                                          std::vector<Var<T>> vs;
                                          for (auto& x : xs) vs.push_back(g.param(*x));
                                          Var<T> w = ba->forward(g, vs, mode);
                                          return probe(g, channel_scale(vs[2], w), seed);
                                      }};
                }));
        }
    }
    cs.push_back(make_check("bav2_train_bn", 1e-5, []<typename T>(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto x1 = input_param<T>("x1", {6, 4, 3, 3}, rng);
        auto x2 = input_param<T>("x2", {6, 8, 3, 3}, rng);
        auto ba = std::make_shared<BridgeAttention<T>>("ba", AttentionKind::bav2, std::vector<std::size_t>{4, 8}, 8, 2,
                                                       PoolingStrategy{}, rng);
        std::vector<Parameter<T>*> ps{x1.get(), x2.get()};
        add_params(ps, *ba);
        return Problem<T>{ps, {&ba->gen_bn}, [x1, x2, ba, seed](Graph<T>& g, Mode) {
                              const BatchNormState<T> saved = ba->gen_bn.state;
                              std::vector<Var<T>> xs{g.param(*x1), g.param(*x2)};
                              Var<T> out = probe(g, ba->forward(g, xs, Mode::train), seed);
                              ba->gen_bn.state = saved;
                              return out;
                          }};
    }));
    return cs;
}

// ------------------------------------------------------------- blocks

BlockSpec small_block(BlockKind kind, AttentionKind attn) {
    BlockSpec s;
    s.kind = kind;
    s.in_channels = kind == BlockKind::bottleneck ? 16 : 8;
    s.width = 8;
    s.stride = 1;
    s.attention.kind = attn;
    s.attention.reduction = kind == BlockKind::bottleneck ? 4 : 2;
    return s;
}

template <typename T>
Problem<T> block_problem(std::uint64_t seed, const BlockSpec& spec, std::size_t spatial) {
    std::mt19937_64 rng(seed);
    auto x = input_param<T>("x", {2, spec.in_channels, spatial, spatial}, rng);
    auto block = std::make_shared<ResidualBlock<T>>("block", spec, rng);
    std::vector<Parameter<T>*> ps{x.get()};
    add_params(ps, *block);
    return Problem<T>{ps, block->batchnorms(), [x, block, seed](Graph<T>& g, Mode mode) {
                          return probe(g, block->forward(g, g.param(*x), ForwardOptions{mode}), seed);
                      }};
}

template <typename T>
Problem<T> chain_problem(std::uint64_t seed, const BlockSpec& first, const BlockSpec& second, std::size_t spatial) {
    std::mt19937_64 rng(seed);
    auto x = input_param<T>("x", {2, first.in_channels, spatial, spatial}, rng);
    auto b1 = std::make_shared<ResidualBlock<T>>("b1", first, rng);
    auto b2 = std::make_shared<ResidualBlock<T>>("b2", second, rng);
    std::vector<Parameter<T>*> ps{x.get()};
    add_params(ps, *b1);
    add_params(ps, *b2);
    auto bns = b1->batchnorms();
    for (auto* bn : b2->batchnorms()) bns.push_back(bn);
    return Problem<T>{ps, bns, [x, b1, b2, seed](Graph<T>& g, Mode mode) {
                          BlockTrace<T> t1, t2;
                          Var<T> h = b1->forward(g, g.param(*x), ForwardOptions{mode}, nullptr, &t1);
                          return probe(g, b2->forward(g, h, ForwardOptions{mode}, &t1, &t2), seed);
                      }};
}

GradCheckResult check_chain(std::uint64_t seed, const BlockSpec& first, const BlockSpec& second, std::size_t spatial) {
    return solve([&]<typename T>(std::uint64_t s) { return chain_problem<T>(s, first, second, spatial); }, seed);
}

std::pair<BlockSpec, BlockSpec> source_chain(const BridgeSourceConfig& sources) {
    BlockSpec first = small_block(BlockKind::bottleneck, AttentionKind::bav2);
    first.width = 4;
    BlockSpec second = small_block(BlockKind::bottleneck, AttentionKind::bav2);
    second.stride = 2;
    second.prev_out_channels = first.out_channels();
    second.attention.sources = sources;
    return {first, second};
}

std::vector<Check> block_checks() {
    std::vector<Check> cs;
    for (BlockKind kind : {BlockKind::basic, BlockKind::bottleneck}) {
        for (AttentionKind attn : {AttentionKind::none, AttentionKind::se, AttentionKind::bav1, AttentionKind::bav2}) {
            for (std::size_t stride : {1, 2}) {
                const std::string name = std::string(kind == BlockKind::basic ? "basic" : "bottleneck") + "_" +
                                         to_string(attn) + "_s" + std::to_string(stride);
                BlockSpec spec = small_block(kind, attn);
                spec.stride = stride;
                cs.push_back(make_check(name, kConvPathThreshold, [spec]<typename T>(std::uint64_t seed) {
                    return block_problem<T>(seed, spec, 6);
                }));
            }
        }
    }
    for (const auto& [label, sources] : BridgeSourceConfig::ablation_rows()) {
        const auto [first, second] = source_chain(sources);
        cs.push_back(make_check("chain " + label, kConvPathThreshold, [first, second]<typename T>(std::uint64_t seed) {
            return chain_problem<T>(seed, first, second, 6);
        }));
    }
    return cs;
}

// -------------------------------------------------------- transformer

std::vector<Check> transformer_checks() {
    std::vector<Check> cs;
    for (Integration integ :
         {Integration::none, Integration::ba_mlp, Integration::se_mlp, Integration::ba_block, Integration::ba_stage}) {
        cs.push_back(make_check(to_string(integ), kTransformerPathThreshold, [integ]<typename T>(std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            TransformerSpec spec;
            spec.integration = integ;
            auto x = input_param<T>("x", {2, 4, spec.dim}, rng);
            auto stage = std::make_shared<TransformerStage<T>>("stage", spec, rng);
            std::vector<Parameter<T>*> ps{x.get()};
            if (integ == Integration::ba_stage) {
                add_params(ps, *stage);
                return Problem<T>{ps, stage->batchnorms(), [x, stage, seed](Graph<T>& g, Mode mode) {
                                      return probe(g, stage->forward(g, g.param(*x), ForwardOptions{mode}), seed);
                                  }};
            }
            // A single block exercises the block-level integration directly.
            auto& block = stage->blocks[0];
            add_params(ps, block);
            return Problem<T>{ps, block.batchnorms(), [x, stage, seed](Graph<T>& g, Mode mode) {
                                  return probe(g, stage->blocks[0].forward(g, g.param(*x), ForwardOptions{mode}), seed);
                              }};
        }));
    }
    return cs;
}

std::vector<Check> suite_checks(std::string_view suite) {
    if (suite == "ops") return ops_checks();
    if (suite == "attention") return attention_checks();
    if (suite == "blocks") return block_checks();
    if (suite == "transformer") return transformer_checks();
    throw std::invalid_argument("unknown gradcheck suite '" + std::string(suite) + "'");
}

}  // namespace

std::vector<std::string> gradcheck_suite_names() { return {"ops", "attention", "blocks", "transformer"}; }

std::vector<CheckRecord> run_gradcheck_suite(std::string_view suite, std::uint64_t seed, double eps) {
    g_eps = eps;
    std::vector<CheckRecord> out;
    const auto names = suite == "all" ? gradcheck_suite_names() : std::vector<std::string>{std::string(suite)};
    for (const auto& name : names) {
        for (const auto& c : suite_checks(name)) out.push_back(record(name, c, seed));
    }
    return out;
}

// ---------------------------------------------------------- ablations

std::string AblationTable::to_csv() const {
    std::ostringstream os;
    auto line = [&os](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
        os << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return os.str();
}

namespace {

std::string dims(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

std::string fmt(double v, int precision = 6) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

template <typename T>
std::vector<std::string> train_row(const TrainConfig& cfg) {
    ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    auto model = make_model<T>(mc);
    const std::size_t params = count_elements(model->parameters());
    const Dataset data = load_dataset(cfg);
    try {
        const TrainResult r = train(*model, data, cfg);
        const EpochMetrics& last = r.epochs.back();
        const bool ok = std::isfinite(last.loss) && last.accuracy >= 0.0 && last.accuracy <= 1.0 &&
                        r.final_accuracy >= 0.0 && r.final_accuracy <= 1.0;
        return {std::to_string(params), fmt(last.loss), fmt(last.accuracy), fmt(r.final_accuracy), ok ? "ok" : "invalid"};
    } catch (const DivergenceError&) {
        return {std::to_string(params), "nan", "", "", "diverged"};
    }
}

std::vector<std::string> train_row_any(const TrainConfig& cfg) {
    return training_precision() == 64 ? train_row<double>(cfg) : train_row<float>(cfg);
}

}  // namespace

AblationTable ablate_pooling(const TrainConfig& base) {
    AblationTable t;
    t.header = {"pooling", "params", "final_loss", "train_acc", "eval_acc", "status"};
    for (PoolKind kind : {PoolKind::avg, PoolKind::avg_max, PoolKind::avg_std, PoolKind::dct}) {
        TrainConfig cfg = base;
        if (cfg.model.is_transformer()) cfg.model.arch = "toy4";
        cfg.model.attention = AttentionKind::bav2;
        cfg.model.pooling.kind = kind;
        auto row = train_row_any(cfg);
        row.insert(row.begin(), to_string(kind));
        t.ok = t.ok && row.back() == "ok";
        t.rows.push_back(std::move(row));
    }
    return t;
}

AblationTable ablate_integration(const TrainConfig& base) {
    AblationTable t;
    t.header = {"integration", "params", "final_loss", "train_acc", "eval_acc", "status"};
    for (Integration integ :
         {Integration::none, Integration::se_mlp, Integration::ba_mlp, Integration::ba_block, Integration::ba_stage}) {
        TrainConfig cfg = base;
        cfg.model.arch = "transformer";
        cfg.model.integration = integ;
        cfg.model.attention = integ == Integration::none     ? AttentionKind::none
                              : integ == Integration::se_mlp ? AttentionKind::se
                                                             : AttentionKind::bav2;
        auto row = train_row_any(cfg);
        row.insert(row.begin(), to_string(integ));
        t.ok = t.ok && row.back() == "ok";
        t.rows.push_back(std::move(row));
    }
    return t;
}

AblationTable ablate_sources(std::uint64_t seed) {
    AblationTable t;
    t.header = {"config", "sources", "n", "tap_channels", "out_shape", "max_rel_error", "status"};
    for (const auto& [label, sources] : BridgeSourceConfig::ablation_rows()) {
        const auto [first, second] = source_chain(sources);

        std::mt19937_64 rng(seed);
        ResidualBlock<D> b1("b1", first, rng);
        ResidualBlock<D> b2("b2", second, rng);
        Graph<D> g;
        Var<D> x = g.constant(Tensor<D>::normal(Shape{2, first.in_channels, 6, 6}, 0.0, 1.0, rng));
        BlockTrace<D> t1, t2;
        Var<D> out = b2.forward(g, b1.forward(g, x, ForwardOptions{}, nullptr, &t1), ForwardOptions{}, &t1, &t2);

        std::string channels;
        bool shapes_ok = out.shape() == Shape{2, second.out_channels(), 3, 3};
        const auto taps = bridge_tap(&t1, t2, sources);
        for (std::size_t i = 0; i < taps.size(); ++i) {
            const std::size_t c = taps[i].shape()[1];
            channels += (i ? "/" : "") + std::to_string(c);
            shapes_ok = shapes_ok && c == b2.ba->branch_widths()[i];
        }
        shapes_ok = shapes_ok && t2.squeezed.size() == sources.sources.size();
        for (const auto& s : t2.squeezed) shapes_ok = shapes_ok && s.shape() == Shape{2, b2.ba->reduced()};

        const double err = check_chain(seed, first, second, 6).max_rel_error;
        const bool ok = shapes_ok && err < kConvPathThreshold;
        t.ok = t.ok && ok;
        t.rows.push_back({label, sources.label(), std::to_string(sources.sources.size()), channels,
                          dims(out.shape()), fmt(err, 3), ok ? "ok" : "fail"});
    }
    return t;
}

}  // namespace banet
