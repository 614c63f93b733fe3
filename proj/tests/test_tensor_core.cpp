#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "banet/gradcheck.hpp"
#include "banet/layers.hpp"

using namespace banet;

namespace {

using T4 = Tensor<double>;

template <typename>
struct ScalarOf;
template <typename T>
struct ScalarOf<Graph<T>> {
    using type = T;
};

Parameter<double> input(std::string name, Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Parameter<double>(std::move(name), ParamRole::input, T4::normal(std::move(shape), 0.0, 1.0, rng));
}

// sum(v * R) for a fixed R drawn independently of any input.
template <typename T>
Var<T> probe(Graph<T>& g, Var<T> v, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return sum(mul(v, g.constant(T4::normal(v.shape(), 0.0, 1.0, rng).template cast<T>())));
}

double check(const LossFn<double>& loss, const std::vector<Parameter<double>*>& ps, double eps = 1e-6) {
    GradCheckOptions opts;
    opts.eps = eps;
    return grad_check<double>(loss, ps, opts).max_rel_error;
}

// Analytic gradients at 64-bit against central differences on a long double
// copy. `build(graph, params)` must be generic over the scalar type.
template <typename F>
double oracle_check(F build, const std::vector<Parameter<double>*>& ps, double eps = 1e-6) {
    std::vector<Parameter<long double>> copies;
    copies.reserve(ps.size());
    for (auto* p : ps) copies.emplace_back(p->name, p->role, p->value.template cast<long double>());
    std::vector<Parameter<long double>*> lps;
    for (auto& c : copies) lps.push_back(&c);
    GradCheckOptions opts;
    opts.eps = eps;
    return grad_check<double, long double>([&](Graph<double>& g) { return build(g, ps); }, ps,
                                           [&](Graph<long double>& g) { return build(g, lps); }, lps, opts)
        .max_rel_error;
}

}  // namespace

TEST(Gap, AllOnes) {
    Graph<double> g;
    auto y = gap(g.constant(T4({1, 2, 2, 2}, 1.0)));
    EXPECT_EQ(y.shape(), (Shape{1, 2}));
    EXPECT_EQ(y.value()[0], 1.0);
    EXPECT_EQ(y.value()[1], 1.0);
}

TEST(Gap, MeanOfChannel) {
    Graph<double> g;
    auto y = gap(g.constant(T4({1, 1, 2, 2}, {1, 2, 3, 4})));
    EXPECT_DOUBLE_EQ(y.value()[0], 2.5);
}

TEST(Gap, GradientIsUniform) {
    auto x = input("x", {2, 3, 5, 5}, 1);
    Graph<double> g;
    g.backward(sum(gap(g.param(x))));
    for (double v : x.grad.data()) EXPECT_NEAR(v, 1.0 / 25.0, 1e-15);
    EXPECT_LT(oracle_check([](auto& h, const auto& p) { return sum(gap(h.param(*p[0]))); }, {&x}), 1e-10);
}

TEST(Gap, EmptySpatialExtentThrows) {
    Graph<double> g;
    EXPECT_THROW(gap(g.constant(T4({1, 2, 0, 3}))), ShapeError);
}

TEST(Linear, IdentityWeights) {
    Graph<double> g;
    T4 x({2, 3}, {1, 2, 3, 4, 5, 6});
    T4 w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    EXPECT_EQ(linear(g.constant(x), g.constant(w)).value(), x);
}

TEST(Linear, HandMultiplication) {
    Graph<double> g;
    auto y = linear(g.constant(T4({1, 2}, {1, 2})), g.constant(T4({2, 2}, {1, 1, 0, 1})));
    EXPECT_EQ(y.value().vec(), (std::vector<double>{3, 2}));
}

TEST(Linear, GradCheck) {
    auto x = input("x", {4, 8}, 2);
    auto w = input("w", {3, 8}, 3);
    auto b = input("b", {3}, 4);
    const double err = oracle_check(
        [](auto& g, const auto& p) { return probe(g, linear(g.param(*p[0]), g.param(*p[1]), g.param(*p[2]))); },
        {&x, &w, &b});
    EXPECT_LT(err, 1e-7);
}

TEST(Linear, ShapeMismatchThrows) {
    Graph<double> g;
    EXPECT_THROW(linear(g.constant(T4({2, 3})), g.constant(T4({4, 2}))), ShapeError);
}

TEST(Conv2d, OneByOneIdentity) {
    std::mt19937_64 rng(5);
    T4 x = T4::normal({2, 3, 4, 4}, 0.0, 1.0, rng);
    T4 k({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) k(c, c, 0, 0) = 1.0;
    Graph<double> g;
    EXPECT_EQ(conv2d(g.constant(x), g.constant(k), 1, 0).value(), x);
}

TEST(Conv2d, OnesKernelCenter) {
    Graph<double> g;
    auto y = conv2d(g.constant(T4({1, 1, 3, 3}, 1.0)), g.constant(T4({1, 1, 3, 3}, 1.0)), 1, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    EXPECT_EQ(y.value()(0, 0, 1, 1), 9.0);
    EXPECT_EQ(y.value()(0, 0, 0, 0), 4.0);
}

TEST(Conv2d, MatchesDirectLoop) {
    std::mt19937_64 rng(6);
    T4 x = T4::normal({1, 2, 5, 5}, 0.0, 1.0, rng);
    T4 k = T4::normal({3, 2, 3, 3}, 0.0, 1.0, rng);
    Graph<double> g;
    const T4 y = conv2d(g.constant(x), g.constant(k), 2, 1).value();
    ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
    for (std::size_t o = 0; o < 3; ++o) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                double s = 0;
                for (std::size_t c = 0; c < 2; ++c) {
                    for (std::size_t a = 0; a < 3; ++a) {
                        for (std::size_t b = 0; b < 3; ++b) {
                            const long r = static_cast<long>(2 * i + a) - 1, q = static_cast<long>(2 * j + b) - 1;
                            if (r >= 0 && r < 5 && q >= 0 && q < 5) s += x(0, c, r, q) * k(o, c, a, b);
                        }
                    }
                }
                EXPECT_NEAR(y(0, o, i, j), s, 1e-12);
            }
        }
    }
}

TEST(Conv2d, GradCheck) {
    auto x = input("x", {2, 3, 8, 8}, 7);
    auto k = input("k", {4, 3, 3, 3}, 8);
    EXPECT_LT(oracle_check([](auto& g, const auto& p) { return probe(g, conv2d(g.param(*p[0]), g.param(*p[1]), 1, 1)); },
                           {&x, &k}), 1e-6);
}

TEST(Conv2d, NonIntegralExtent) {
    Graph<double> g;
    auto x = g.constant(T4({1, 1, 4, 4}, 1.0));
    auto k = g.constant(T4({1, 1, 3, 3}, 1.0));
    EXPECT_THROW(conv2d(x, k, 2, 1), ShapeError);
    EXPECT_EQ(conv2d(x, k, 2, 1, Extent::floor).shape(), (Shape{1, 1, 2, 2}));
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
    T4 x({4, 1}, {1, -1, 1, -1});
    BatchNormState<double> st{T4({1}), T4({1}, 1.0)};
    Graph<double> g;
    auto y = batchnorm(g.constant(x), g.constant(T4({1}, 1.0)), g.constant(T4({1}, 0.0)), st, Mode::train);
    EXPECT_LT(max_abs_diff(y.value(), x), 1e-5);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
    std::mt19937_64 rng(9);
    BatchNormState<double> st{T4({3}), T4({3}, 1.0)};
    Graph<double> g;
    auto y = batchnorm(g.constant(T4::normal({4, 3, 2, 2}, 0.0, 1.0, rng)), g.constant(T4({3}, 0.0)),
                       g.constant(T4({3}, 5.0)), st, Mode::train);
    for (double v : y.value().data()) EXPECT_EQ(v, 5.0);
}

TEST(BatchNorm, RunningStatsUpdate) {
    T4 x({2, 1}, {1.0, 3.0});
    BatchNormState<double> st{T4({1}), T4({1}, 1.0)};
    Graph<double> g;
    batchnorm(g.constant(x), g.constant(T4({1}, 1.0)), g.constant(T4({1}, 0.0)), st, Mode::train);
    EXPECT_NEAR(st.running_mean[0], 0.1 * 2.0, 1e-15);
    EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * 2.0, 1e-15);  // unbiased batch variance is 2
}

TEST(BatchNorm, TrainGradCheck) {
    auto x = input("x", {8, 16}, 10);
    std::mt19937_64 rng(11);
    Parameter<double> gamma("gamma", ParamRole::bn_gamma, T4::uniform({16}, 0.5, 1.5, rng));
    Parameter<double> beta("beta", ParamRole::bn_beta, T4::uniform({16}, -0.5, 0.5, rng));
    const double err = oracle_check(
        [](auto& g, const auto& p) {
            using S = typename ScalarOf<std::remove_reference_t<decltype(g)>>::type;
            BatchNormState<S> st{Tensor<S>({16}), Tensor<S>({16}, S(1))};
            return probe(g, batchnorm(g.param(*p[0]), g.param(*p[1]), g.param(*p[2]), st, Mode::train));
        },
        {&x, &gamma, &beta});
    EXPECT_LT(err, 1e-5);
}

TEST(BatchNorm, BatchOfOneInTrainModeThrows) {
    BatchNormState<double> st{T4({2}), T4({2}, 1.0)};
    Graph<double> g;
    EXPECT_THROW(batchnorm(g.constant(T4({1, 2}, 1.0)), g.constant(T4({2}, 1.0)), g.constant(T4({2})), st, Mode::train),
                 DegenerateError);
}

TEST(Activation, SigmoidAtZero) {
    Parameter<double> x("x", ParamRole::input, T4({1}, 0.0));
    Graph<double> g;
    auto y = sigmoid(g.param(x));
    EXPECT_EQ(y.value()[0], 0.5);
    g.backward(sum(y));
    EXPECT_EQ(x.grad[0], 0.25);
}

TEST(Activation, GradChecks) {
    auto x = input("x", {3, 7}, 12);
    EXPECT_LT(oracle_check([](auto& g, const auto& p) { return probe(g, sigmoid(g.param(*p[0]))); }, {&x}), 1e-7);
    EXPECT_LT(oracle_check([](auto& g, const auto& p) { return probe(g, relu(g.param(*p[0]))); }, {&x}), 1e-7);
}

TEST(ChannelScale, OnesIsIdentity) {
    std::mt19937_64 rng(13);
    T4 x = T4::normal({2, 3, 4, 4}, 0.0, 1.0, rng);
    Graph<double> g;
    EXPECT_EQ(channel_scale(g.constant(x), g.constant(T4({2, 3}, 1.0))).value(), x);
}

TEST(ChannelScale, GapThenUnitScaleIsIdentity) {
    std::mt19937_64 rng(14);
    T4 x = T4::normal({2, 3, 4, 4}, 0.0, 1.0, rng);
    Graph<double> g;
    auto xv = g.constant(x);
    auto w = scale(add(gap(xv), scale(gap(xv), -1.0)), 0.0);
    auto ones = add(w, g.constant(T4({2, 3}, 1.0)));
    EXPECT_EQ(channel_scale(xv, ones).value(), x);
}

TEST(ChannelScale, GradCheck) {
    auto x = input("x", {2, 3, 4, 4}, 15);
    auto w = input("w", {2, 3}, 16);
    EXPECT_LT(oracle_check([](auto& g, const auto& p) { return probe(g, channel_scale(g.param(*p[0]), g.param(*p[1]))); },
                           {&x, &w}), 1e-7);
}

TEST(ChannelScale, ShapeMismatchThrows) {
    Graph<double> g;
    EXPECT_THROW(channel_scale(g.constant(T4({2, 3, 2, 2})), g.constant(T4({2, 4}))), ShapeError);
}

TEST(Mhsa, SingleTokenReturnsValueProjection) {
    std::mt19937_64 rng(17);
    MultiHeadSelfAttention<double> attn("a", 8, 2, rng);
    T4 x = T4::normal({2, 1, 8}, 0.0, 1.0, rng);
    Graph<double> g;
    auto y = attn.forward(g, g.constant(x));
    auto expect = attn.o.forward(g, attn.v.forward(g, g.constant(x)));
    EXPECT_LT(max_abs_diff(y.value(), expect.value()), 1e-14);
}

TEST(Mhsa, EqualTokensGiveUniformWeights) {
    std::mt19937_64 rng(18);
    T4 row = T4::normal({8}, 0.0, 1.0, rng);
    T4 q({1, 4, 8}), k({1, 4, 8});
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t d = 0; d < 8; ++d) {
            q(0, t, d) = row[d] * (1.0 + static_cast<double>(t));
            k(0, t, d) = row[d];
        }
    }
    const T4 w = attention_weights(q, k, 2);
    for (double v : w.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Mhsa, GradCheck) {
    std::mt19937_64 rng(19);
    auto x = input("x", {2, 4, 8}, 20);
    MultiHeadSelfAttention<double> attn("a", 8, 2, rng);
    std::vector<Parameter<double>*> ps{&x};
    attn.parameters(ps);
    EXPECT_LT(check([&](Graph<double>& g) { return probe(g, attn.forward(g, g.param(x))); }, ps), 1e-5);
}

TEST(Mhsa, IndivisibleWidthThrows) {
    std::mt19937_64 rng(21);
    EXPECT_THROW(MultiHeadSelfAttention<double>("a", 10, 3, rng), ShapeError);
}

TEST(LayerNorm, NormalizesLastAxis) {
    std::mt19937_64 rng(22);
    Graph<double> g;
    auto y = layernorm(g.constant(T4::normal({3, 8}, 2.0, 3.0, rng)), g.constant(T4({8}, 1.0)), g.constant(T4({8})));
    for (std::size_t r = 0; r < 3; ++r) {
        double m = 0, v = 0;
        for (std::size_t c = 0; c < 8; ++c) m += y.value()(r, c) / 8;
        for (std::size_t c = 0; c < 8; ++c) v += (y.value()(r, c) - m) * (y.value()(r, c) - m) / 8;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-5);
    }
}

TEST(GradCheck, SumHasExactUnitGradient) {
    auto x = input("x", {3, 5}, 23);
    GradCheckOptions opts;
    EXPECT_LT(grad_check<double>([&](Graph<double>& g) { return sum(g.param(x)); }, {&x}, opts).max_rel_error, 1e-10);
}

TEST(GradCheck, DetectsWrongGradient) {
    auto x = input("x", {4}, 24);
    // A constant node blocks the gradient, so the analytic result is zero.
    const double err = check(
        [&](Graph<double>& g) {
            Var<double> xv = g.param(x);
            return add(sum(g.constant(xv.value())), scale(sum(xv), 0.0));
        },
        {&x});
    EXPECT_GT(err, 0.5);
}

TEST(GradCheck, NonScalarLossThrows) {
    auto x = input("x", {4}, 25);
    EXPECT_THROW(grad_check<double>([&](Graph<double>& g) { return g.param(x); }, {&x}), ShapeError);
}

TEST(GradCheck, SamplesAtLeastSixtyFourCoordinates) {
    auto x = input("x", {20, 20}, 26);
    const auto r = grad_check<double>([&](Graph<double>& g) { return probe(g, sigmoid(g.param(x))); }, {&x});
    EXPECT_GE(r.coords_checked, 64u);
    EXPECT_LE(r.coords_checked, 400u);
}

TEST(GradCheck, RelativeErrorFloor) {
    EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(relative_error(1e-12, 0.0), 1e-12 / 1e-8);
    EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
    std::mt19937_64 rng(27);
    T4 x = T4::normal({2, 3, 6, 6}, 0.0, 1.0, rng);
    T4 k = T4::normal({4, 3, 3, 3}, 0.0, 1.0, rng);
    Graph<double> g1, g2;
    EXPECT_EQ(relu(conv2d(g1.constant(x), g1.constant(k), 1, 1)).value(),
              relu(conv2d(g2.constant(x), g2.constant(k), 1, 1)).value());
}

TEST(Finiteness, NanRejectedAtBoundary) {
    Graph<double> g;
    EXPECT_THROW(g.constant(T4({2}, std::nan(""))), NumericError);
}

TEST(Tensor, ShapeInvariant) {
    EXPECT_THROW(T4({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_EQ(T4({2, 3, 4}).size(), 24u);
}
