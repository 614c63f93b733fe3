#include "banet/ops.hpp"

#include <cmath>
#include <limits>

namespace banet {

namespace {

template <typename T>
void same_graph(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!a.valid() || !b.valid() || &a.graph() != &b.graph()) {
        throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
    }
}

template <typename T>
void same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    same_graph(a, b, "add");
    same_shape(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    out += b.value();
    return a.graph().record(std::move(out), {a.id(), b.id()},
                            [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    same_graph(a, b, "sub");
    same_shape(a.value(), b.value(), "sub");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return a.graph().record(std::move(out), {a.id(), b.id()},
                            [](const Tensor<T>& g) {
                                Tensor<T> neg = g;
                                for (auto& v : neg.vec()) v = -v;
                                return std::vector<Tensor<T>>{g, neg};
                            },
                            "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    same_graph(a, b, "mul");
    same_shape(a.value(), b.value(), "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    Graph<T>* g = &a.graph();
    std::size_t ia = a.id(), ib = b.id();
    return g->record(std::move(out), {ia, ib},
                     [g, ia, ib](const Tensor<T>& go) {
                         const auto& av = g->value(ia);
                         const auto& bv = g->value(ib);
                         Tensor<T> ga(go.shape()), gb(go.shape());
                         for (std::size_t i = 0; i < go.size(); ++i) {
                             ga[i] = go[i] * bv[i];
                             gb[i] = go[i] * av[i];
                         }
                         return std::vector<Tensor<T>>{ga, gb};
                     },
                     "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.vec()) v *= s;
    return a.graph().record(std::move(out), {a.id()},
                            [s](const Tensor<T>& go) {
                                Tensor<T> gi = go;
                                for (auto& v : gi.vec()) v *= s;
                                return std::vector<Tensor<T>>{gi};
                            },
                            "scale");
}

template <typename T>
Var<T> sum(Var<T> a) {
    T acc = 0;
    for (T v : a.value().data()) acc += v;
    Shape in_shape = a.shape();
    return a.graph().record(Tensor<T>::scalar(acc), {a.id()},
                            [in_shape](const Tensor<T>& go) {
                                return std::vector<Tensor<T>>{Tensor<T>(in_shape, go.item())};
                            },
                            "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
    if (a.value().empty()) throw ShapeError("mean of empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> relu(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
    Graph<T>* g = &x.graph();
    std::size_t ix = x.id();
    return g->record(std::move(out), {ix},
                     [g, ix](const Tensor<T>& go) {
                         const auto& xv = g->value(ix);
                         Tensor<T> gi(go.shape());
                         for (std::size_t i = 0; i < go.size(); ++i) gi[i] = xv[i] > T(0) ? go[i] : T(0);
                         return std::vector<Tensor<T>>{gi};
                     },
                     "relu");
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    Tensor<T> y = x.value();
    for (auto& v : y.vec()) v = sigmoid_scalar(v);
    Tensor<T> out = y;
    return x.graph().record(std::move(out), {x.id()},
                            [y](const Tensor<T>& go) {
                                Tensor<T> gi(go.shape());
                                for (std::size_t i = 0; i < go.size(); ++i) gi[i] = go[i] * y[i] * (T(1) - y[i]);
                                return std::vector<Tensor<T>>{gi};
                            },
                            "sigmoid");
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    Shape in_shape = x.shape();
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return x.graph().record(std::move(out), {x.id()},
                            [in_shape](const Tensor<T>& go) {
                                return std::vector<Tensor<T>>{go.reshaped(in_shape)};
                            },
                            "reshape");
}

template <typename T>
Var<T> concat_features(Var<T> a, Var<T> b) {
    same_graph(a, b, "concat_features");
    require_rank(a.value(), 2, "concat_features");
    require_rank(b.value(), 2, "concat_features");
    const std::size_t n = a.shape()[0], da = a.shape()[1], db = b.shape()[1];
    if (b.shape()[0] != n) throw ShapeError("concat_features: batch mismatch");
    Tensor<T> out(Shape{n, da + db});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < da; ++j) out(i, j) = a.value()(i, j);
        for (std::size_t j = 0; j < db; ++j) out(i, da + j) = b.value()(i, j);
    }
    return a.graph().record(std::move(out), {a.id(), b.id()},
                            [n, da, db](const Tensor<T>& go) {
                                Tensor<T> ga(Shape{n, da}), gb(Shape{n, db});
                                for (std::size_t i = 0; i < n; ++i) {
                                    for (std::size_t j = 0; j < da; ++j) ga(i, j) = go(i, j);
                                    for (std::size_t j = 0; j < db; ++j) gb(i, j) = go(i, da + j);
                                }
                                return std::vector<Tensor<T>>{ga, gb};
                            },
                            "concat_features");
}

template <typename T>
Var<T> scale_by_entry(Var<T> x, Var<T> f, std::size_t index) {
    same_graph(x, f, "scale_by_entry");
    require_rank(f.value(), 1, "scale_by_entry");
    if (index >= f.value().size()) throw ShapeError("scale_by_entry: index out of range");
    const T s = f.value()[index];
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v *= s;
    Graph<T>* g = &x.graph();
    std::size_t ix = x.id(), iff = f.id();
    return g->record(std::move(out), {ix, iff},
                     [g, ix, iff, index](const Tensor<T>& go) {
                         const auto& xv = g->value(ix);
                         const T s = g->value(iff)[index];
                         Tensor<T> gx(go.shape());
                         T gs = 0;
                         for (std::size_t i = 0; i < go.size(); ++i) {
                             gx[i] = go[i] * s;
                             gs += go[i] * xv[i];
                         }
                         Tensor<T> gf(g->value(iff).shape());
                         gf[index] = gs;
                         return std::vector<Tensor<T>>{gx, gf};
                     },
                     "scale_by_entry");
}

template <typename T>
Var<T> gap(Var<T> x) {
    require_rank(x.value(), 4, "gap");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
    if (hw == 0) throw ShapeError("gap: empty spatial extent " + shape_str(s));
    Tensor<T> out(Shape{n, c});
    const auto& xv = x.value();
    for (std::size_t i = 0; i < n * c; ++i) {
        T acc = 0;
        for (std::size_t k = 0; k < hw; ++k) acc += xv[i * hw + k];
        out[i] = acc / static_cast<T>(hw);
    }
    Shape in_shape = s;
    return x.graph().record(std::move(out), {x.id()},
                            [in_shape, hw](const Tensor<T>& go) {
                                Tensor<T> gi(in_shape);
                                const T inv = T(1) / static_cast<T>(hw);
                                for (std::size_t i = 0; i < go.size(); ++i) {
                                    for (std::size_t k = 0; k < hw; ++k) gi[i * hw + k] = go[i] * inv;
                                }
                                return std::vector<Tensor<T>>{gi};
                            },
                            "gap");
}

template <typename T>
Var<T> spatial_max(Var<T> x) {
    require_rank(x.value(), 4, "spatial_max");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
    if (hw == 0) throw ShapeError("spatial_max: empty spatial extent");
    Tensor<T> out(Shape{n, c});
    std::vector<std::size_t> argmax(n * c);
    const auto& xv = x.value();
    for (std::size_t i = 0; i < n * c; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < hw; ++k) {
            if (xv[i * hw + k] > xv[i * hw + best]) best = k;
        }
        argmax[i] = best;
        out[i] = xv[i * hw + best];
    }
    Shape in_shape = s;
    return x.graph().record(std::move(out), {x.id()},
                            [in_shape, hw, argmax](const Tensor<T>& go) {
                                Tensor<T> gi(in_shape);
                                for (std::size_t i = 0; i < go.size(); ++i) gi[i * hw + argmax[i]] = go[i];
                                return std::vector<Tensor<T>>{gi};
                            },
                            "spatial_max");
}

template <typename T>
Var<T> spatial_std(Var<T> x) {
    require_rank(x.value(), 4, "spatial_std");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
    if (hw == 0) throw ShapeError("spatial_std: empty spatial extent");
    Tensor<T> out(Shape{n, c});
    Tensor<T> means(Shape{n, c});
    const auto& xv = x.value();
    for (std::size_t i = 0; i < n * c; ++i) {
        T m = 0;
        for (std::size_t k = 0; k < hw; ++k) m += xv[i * hw + k];
        m /= static_cast<T>(hw);
        T v = 0;
        for (std::size_t k = 0; k < hw; ++k) {
            const T d = xv[i * hw + k] - m;
            v += d * d;
        }
        means[i] = m;
        out[i] = std::sqrt(v / static_cast<T>(hw));
    }
    Shape in_shape = s;
    Tensor<T> stds = out;
    Graph<T>* g = &x.graph();
    std::size_t ix = x.id();
    return g->record(std::move(out), {ix},
                     [g, ix, in_shape, hw, means, stds](const Tensor<T>& go) {
                         const auto& xv = g->value(ix);
                         Tensor<T> gi(in_shape);
                         for (std::size_t i = 0; i < go.size(); ++i) {
                             // d std / dx_k = (x_k - mean) / (hw * std); zero where std vanishes.
                             if (stds[i] == T(0)) continue;
                             const T f = go[i] / (static_cast<T>(hw) * stds[i]);
                             for (std::size_t k = 0; k < hw; ++k) gi[i * hw + k] = f * (xv[i * hw + k] - means[i]);
                         }
                         return std::vector<Tensor<T>>{gi};
                     },
                     "spatial_std");
}

template <typename T>
Var<T> spatial_filter(Var<T> x, const Tensor<T>& filter) {
    require_rank(x.value(), 4, "spatial_filter");
    const auto& s = x.shape();
    if (filter.shape() != Shape{s[2], s[3]}) {
        throw ShapeError("spatial_filter: filter " + shape_str(filter.shape()) + " vs input " + shape_str(s));
    }
    const std::size_t nc = s[0] * s[1], hw = s[2] * s[3];
    Tensor<T> out(Shape{s[0], s[1]});
    const auto& xv = x.value();
    for (std::size_t i = 0; i < nc; ++i) {
        T acc = 0;
        for (std::size_t k = 0; k < hw; ++k) acc += xv[i * hw + k] * filter[k];
        out[i] = acc;
    }
    Shape in_shape = s;
    return x.graph().record(std::move(out), {x.id()},
                            [in_shape, filter, hw](const Tensor<T>& go) {
                                Tensor<T> gi(in_shape);
                                for (std::size_t i = 0; i < go.size(); ++i) {
                                    for (std::size_t k = 0; k < hw; ++k) gi[i * hw + k] = go[i] * filter[k];
                                }
                                return std::vector<Tensor<T>>{gi};
                            },
                            "spatial_filter");
}

namespace {

template <typename T>
Var<T> linear_impl(Var<T> x, Var<T> w, const Var<T>* b) {
    same_graph(x, w, "linear");
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() < 2 || ws.size() != 2) throw ShapeError("linear: bad ranks " + shape_str(xs) + " " + shape_str(ws));
    const std::size_t din = xs.back(), dout = ws[0];
    if (ws[1] != din) {
        throw ShapeError("linear: inner extents disagree " + shape_str(xs) + " x " + shape_str(ws) + "^T");
    }
    if (b) {
        same_graph(x, *b, "linear");
        if (b->shape() != Shape{dout}) throw ShapeError("linear: bias shape " + shape_str(b->shape()));
    }
    const std::size_t rows = x.value().size() / din;
    Shape out_shape = xs;
    out_shape.back() = dout;
    Tensor<T> out(out_shape);
    const auto& xv = x.value();
    const auto& wv = w.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = &xv[r * din];
        for (std::size_t o = 0; o < dout; ++o) {
            const T* wr = &wv[o * din];
            T acc = b ? b->value()[o] : T(0);
            for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
            out[r * dout + o] = acc;
        }
    }
    Graph<T>* g = &x.graph();
    std::size_t ix = x.id(), iw = w.id();
    std::vector<std::size_t> inputs{ix, iw};
    if (b) inputs.push_back(b->id());
    const bool has_bias = b != nullptr;
    return g->record(
        std::move(out), std::move(inputs),
        [g, ix, iw, rows, din, dout, has_bias](const Tensor<T>& go) {
            const auto& xv = g->value(ix);
            const auto& wv = g->value(iw);
            Tensor<T> gx(xv.shape()), gw(wv.shape());
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = &xv[r * din];
                T* gxr = &gx[r * din];
                for (std::size_t o = 0; o < dout; ++o) {
                    const T d = go[r * dout + o];
                    if (d == T(0)) continue;
                    const T* wr = &wv[o * din];
                    T* gwr = &gw[o * din];
                    for (std::size_t i = 0; i < din; ++i) {
                        gxr[i] += d * wr[i];
                        gwr[i] += d * xr[i];
                    }
                }
            }
            std::vector<Tensor<T>> res{gx, gw};
            if (has_bias) {
                Tensor<T> gb(Shape{dout});
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t o = 0; o < dout; ++o) gb[o] += go[r * dout + o];
                }
                res.push_back(std::move(gb));
            }
            return res;
        },
        "linear");
}

}  // namespace

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
    return linear_impl<T>(x, w, nullptr);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    return linear_impl<T>(x, w, &b);
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, std::size_t stride, std::size_t padding, Extent extent) {
    same_graph(x, k, "conv2d");
    require_rank(x.value(), 4, "conv2d");
    require_rank(k.value(), 4, "conv2d");
    const auto& xs = x.shape();
    const auto& ks = k.shape();
    const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
    const std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
    if (ks[1] != cin) throw ShapeError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, got " +
                                       std::to_string(cin));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (h + 2 * padding < kh || w + 2 * padding < kw) throw ShapeError("conv2d: kernel larger than padded input");
    if (extent == Extent::exact && ((h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0)) {
        throw ShapeError("conv2d: non-integral output extent for input " + shape_str(xs) + ", kernel " +
                         shape_str(ks) + ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding));
    }
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    const long pad = static_cast<long>(padding);

    Tensor<T> out(Shape{n, cout, oh, ow});
    const auto& xv = x.value();
    const auto& kv = k.value();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t co = 0; co < cout; ++co) {
            T* op = &out[((b * cout + co) * oh) * ow];
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* xp = &xv[((b * cin + ci) * h) * w];
                const T* kp = &kv[((co * cin + ci) * kh) * kw];
                for (std::size_t dy = 0; dy < kh; ++dy) {
                    for (std::size_t dx = 0; dx < kw; ++dx) {
                        const T kval = kp[dy * kw + dx];
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            const long iy = static_cast<long>(oy * stride + dy) - pad;
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            const T* xrow = xp + iy * static_cast<long>(w);
                            T* orow = op + oy * ow;
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const long ix = static_cast<long>(ox * stride + dx) - pad;
                                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                orow[ox] += kval * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    Graph<T>* g = &x.graph();
    std::size_t ixx = x.id(), ik = k.id();
    return g->record(
        std::move(out), {ixx, ik},
        [g, ixx, ik, n, cin, h, w, cout, kh, kw, oh, ow, stride, pad](const Tensor<T>& go) {
            const auto& xv = g->value(ixx);
            const auto& kv = g->value(ik);
            Tensor<T> gx(xv.shape()), gk(kv.shape());
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t co = 0; co < cout; ++co) {
                    const T* gop = &go[((b * cout + co) * oh) * ow];
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T* xp = &xv[((b * cin + ci) * h) * w];
                        T* gxp = &gx[((b * cin + ci) * h) * w];
                        const T* kp = &kv[((co * cin + ci) * kh) * kw];
                        T* gkp = &gk[((co * cin + ci) * kh) * kw];
                        for (std::size_t dy = 0; dy < kh; ++dy) {
                            for (std::size_t dx = 0; dx < kw; ++dx) {
                                const T kval = kp[dy * kw + dx];
                                T kacc = 0;
                                for (std::size_t oy = 0; oy < oh; ++oy) {
                                    const long iy = static_cast<long>(oy * stride + dy) - pad;
                                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                    const T* xrow = xp + iy * static_cast<long>(w);
                                    T* gxrow = gxp + iy * static_cast<long>(w);
                                    const T* grow = gop + oy * ow;
                                    for (std::size_t ox = 0; ox < ow; ++ox) {
                                        const long ix = static_cast<long>(ox * stride + dx) - pad;
                                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                        kacc += grow[ox] * xrow[ix];
                                        gxrow[ix] += grow[ox] * kval;
                                    }
                                }
                                gkp[dy * kw + dx] += kacc;
                            }
                        }
                    }
                }
            }
            return std::vector<Tensor<T>>{gx, gk};
        },
        "conv2d");
}

template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode) {
    same_graph(x, gamma, "batchnorm");
    same_graph(x, beta, "batchnorm");
    const auto& xs = x.shape();
    if (xs.size() != 2 && xs.size() != 4) throw ShapeError("batchnorm: expected [N,C] or [N,C,H,W], got " + shape_str(xs));
    const std::size_t n = xs[0], c = xs[1], inner = xs.size() == 4 ? xs[2] * xs[3] : 1;
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw ShapeError("batchnorm: affine params must be [C]");
    if (state.running_mean.shape() != Shape{c} || state.running_var.shape() != Shape{c}) {
        throw ShapeError("batchnorm: running statistics must be [C]");
    }
    const std::size_t count = n * inner;
    if (mode == Mode::train && count < 2) {
        throw DegenerateError("batchnorm: training mode needs at least two values per channel (batch size 1)");
    }
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();

    Tensor<T> mu(Shape{c}), inv_std(Shape{c});
    if (mode == Mode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T m = 0;
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t k = 0; k < inner; ++k) m += xv[(b * c + ch) * inner + k];
            }
            m /= static_cast<T>(count);
            T v = 0;
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t k = 0; k < inner; ++k) {
                    const T d = xv[(b * c + ch) * inner + k] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(count);
            mu[ch] = m;
            inv_std[ch] = T(1) / std::sqrt(v + state.eps);
            const T unbiased = v * static_cast<T>(count) / static_cast<T>(count - 1);
            state.running_mean[ch] = (T(1) - state.momentum) * state.running_mean[ch] + state.momentum * m;
            state.running_var[ch] = (T(1) - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = state.running_mean[ch];
            inv_std[ch] = T(1) / std::sqrt(state.running_var[ch] + state.eps);
        }
    }

    Tensor<T> out(xs);
    Tensor<T> xhat(xs);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t k = 0; k < inner; ++k) {
                const std::size_t i = (b * c + ch) * inner + k;
                xhat[i] = (xv[i] - mu[ch]) * inv_std[ch];
                out[i] = xhat[i] * gv[ch] + bv[ch];
            }
        }
    }

    Graph<T>* g = &x.graph();
    std::size_t ig = gamma.id();
    const bool train = mode == Mode::train;
    return g->record(
        std::move(out), {x.id(), gamma.id(), beta.id()},
        [g, ig, xhat, inv_std, n, c, inner, count, train](const Tensor<T>& go) {
            const auto& gv = g->value(ig);
            Tensor<T> gx(go.shape()), ggamma(Shape{c}), gbeta(Shape{c});
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t b = 0; b < n; ++b) {
                    for (std::size_t k = 0; k < inner; ++k) {
                        const std::size_t i = (b * c + ch) * inner + k;
                        sum_dy += go[i];
                        sum_dy_xhat += go[i] * xhat[i];
                    }
                }
                ggamma[ch] = sum_dy_xhat;
                gbeta[ch] = sum_dy;
                const T scale = gv[ch] * inv_std[ch];
                const T m = static_cast<T>(count);
                for (std::size_t b = 0; b < n; ++b) {
                    for (std::size_t k = 0; k < inner; ++k) {
                        const std::size_t i = (b * c + ch) * inner + k;
                        if (train) {
                            gx[i] = scale / m * (m * go[i] - sum_dy - xhat[i] * sum_dy_xhat);
                        } else {
                            gx[i] = scale * go[i];
                        }
                    }
                }
            }
            return std::vector<Tensor<T>>{gx, ggamma, gbeta};
        },
        "batchnorm");
}

template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    same_graph(x, gamma, "layernorm");
    same_graph(x, beta, "layernorm");
    const auto& xs = x.shape();
    if (xs.empty()) throw ShapeError("layernorm: scalar input");
    const std::size_t d = xs.back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) throw ShapeError("layernorm: affine params must be [D]");
    const std::size_t rows = x.value().size() / d;
    const auto& xv = x.value();
    Tensor<T> out(xs), xhat(xs), inv_std(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        T m = 0;
        for (std::size_t j = 0; j < d; ++j) m += xv[r * d + j];
        m /= static_cast<T>(d);
        T v = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const T e = xv[r * d + j] - m;
            v += e * e;
        }
        v /= static_cast<T>(d);
        inv_std[r] = T(1) / std::sqrt(v + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xv[r * d + j] - m) * inv_std[r];
            out[r * d + j] = xhat[r * d + j] * gamma.value()[j] + beta.value()[j];
        }
    }
    Graph<T>* g = &x.graph();
    std::size_t ig = gamma.id();
    return g->record(
        std::move(out), {x.id(), gamma.id(), beta.id()},
        [g, ig, xhat, inv_std, rows, d](const Tensor<T>& go) {
            const auto& gv = g->value(ig);
            Tensor<T> gx(go.shape()), ggamma(Shape{d}), gbeta(Shape{d});
            for (std::size_t r = 0; r < rows; ++r) {
                T sum_dxh = 0, sum_dxh_xh = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const std::size_t i = r * d + j;
                    const T dxh = go[i] * gv[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[i];
                    ggamma[j] += go[i] * xhat[i];
                    gbeta[j] += go[i];
                }
                const T m = static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const std::size_t i = r * d + j;
                    const T dxh = go[i] * gv[j];
                    gx[i] = inv_std[r] / m * (m * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                }
            }
            return std::vector<Tensor<T>>{gx, ggamma, gbeta};
        },
        "layernorm");
}

template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> w) {
    same_graph(x, w, "channel_scale");
    require_rank(x.value(), 4, "channel_scale");
    const auto& xs = x.shape();
    if (w.shape() != Shape{xs[0], xs[1]}) {
        throw ShapeError("channel_scale: weights " + shape_str(w.shape()) + " do not match " + shape_str(xs));
    }
    const std::size_t nc = xs[0] * xs[1], hw = xs[2] * xs[3];
    Tensor<T> out = x.value();
    const auto& wv = w.value();
    for (std::size_t i = 0; i < nc; ++i) {
        for (std::size_t k = 0; k < hw; ++k) out[i * hw + k] *= wv[i];
    }
    Graph<T>* g = &x.graph();
    std::size_t ix = x.id(), iw = w.id();
    return g->record(std::move(out), {ix, iw},
                     [g, ix, iw, nc, hw](const Tensor<T>& go) {
                         const auto& xv = g->value(ix);
                         const auto& wv = g->value(iw);
                         Tensor<T> gx(xv.shape()), gw(wv.shape());
                         for (std::size_t i = 0; i < nc; ++i) {
                             T acc = 0;
                             for (std::size_t k = 0; k < hw; ++k) {
                                 gx[i * hw + k] = go[i * hw + k] * wv[i];
                                 acc += go[i * hw + k] * xv[i * hw + k];
                             }
                             gw[i] = acc;
                         }
                         return std::vector<Tensor<T>>{gx, gw};
                     },
                     "channel_scale");
}

template <typename T>
Var<T> token_scale(Var<T> x, Var<T> w) {
    same_graph(x, w, "token_scale");
    require_rank(x.value(), 3, "token_scale");
    const auto& xs = x.shape();
    const std::size_t n = xs[0], t = xs[1], d = xs[2];
    if (w.shape() != Shape{n, d}) {
        throw ShapeError("token_scale: weights " + shape_str(w.shape()) + " do not match " + shape_str(xs));
    }
    Tensor<T> out = x.value();
    const auto& wv = w.value();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t k = 0; k < t; ++k) {
            for (std::size_t j = 0; j < d; ++j) out[(b * t + k) * d + j] *= wv[b * d + j];
        }
    }
    Graph<T>* g = &x.graph();
    std::size_t ix = x.id(), iw = w.id();
    return g->record(std::move(out), {ix, iw},
                     [g, ix, iw, n, t, d](const Tensor<T>& go) {
                         const auto& xv = g->value(ix);
                         const auto& wv = g->value(iw);
                         Tensor<T> gx(xv.shape()), gw(wv.shape());
                         for (std::size_t b = 0; b < n; ++b) {
                             for (std::size_t k = 0; k < t; ++k) {
                                 for (std::size_t j = 0; j < d; ++j) {
                                     const std::size_t i = (b * t + k) * d + j;
                                     gx[i] = go[i] * wv[b * d + j];
                                     gw[b * d + j] += go[i] * xv[i];
                                 }
                             }
                         }
                         return std::vector<Tensor<T>>{gx, gw};
                     },
                     "token_scale");
}

template <typename T>
Var<T> token_mean(Var<T> x) {
    require_rank(x.value(), 3, "token_mean");
    const auto& xs = x.shape();
    const std::size_t n = xs[0], t = xs[1], d = xs[2];
    if (t == 0) throw ShapeError("token_mean: no tokens");
    Tensor<T> out(Shape{n, d});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t k = 0; k < t; ++k) {
            for (std::size_t j = 0; j < d; ++j) out[b * d + j] += xv[(b * t + k) * d + j];
        }
    }
    for (auto& v : out.vec()) v /= static_cast<T>(t);
    Shape in_shape = xs;
    return x.graph().record(std::move(out), {x.id()},
                            [in_shape, n, t, d](const Tensor<T>& go) {
                                Tensor<T> gi(in_shape);
                                const T inv = T(1) / static_cast<T>(t);
                                for (std::size_t b = 0; b < n; ++b) {
                                    for (std::size_t k = 0; k < t; ++k) {
                                        for (std::size_t j = 0; j < d; ++j) gi[(b * t + k) * d + j] = go[b * d + j] * inv;
                                    }
                                }
                                return std::vector<Tensor<T>>{gi};
                            },
                            "token_mean");
}

template <typename T>
Var<T> tokens_to_channels(Var<T> x) {
    require_rank(x.value(), 3, "tokens_to_channels");
    const auto& xs = x.shape();
    const std::size_t n = xs[0], t = xs[1], d = xs[2];
    Tensor<T> out(Shape{n, d, t, 1});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t k = 0; k < t; ++k) {
            for (std::size_t j = 0; j < d; ++j) out[(b * d + j) * t + k] = xv[(b * t + k) * d + j];
        }
    }
    Shape in_shape = xs;
    return x.graph().record(std::move(out), {x.id()},
                            [in_shape, n, t, d](const Tensor<T>& go) {
                                Tensor<T> gi(in_shape);
                                for (std::size_t b = 0; b < n; ++b) {
                                    for (std::size_t k = 0; k < t; ++k) {
                                        for (std::size_t j = 0; j < d; ++j) {
                                            gi[(b * t + k) * d + j] = go[(b * d + j) * t + k];
                                        }
                                    }
                                }
                                return std::vector<Tensor<T>>{gi};
                            },
                            "tokens_to_channels");
}

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
    require_rank(q, 3, "attention_weights");
    if (q.shape() != k.shape()) throw ShapeError("attention_weights: q/k shape mismatch");
    const std::size_t n = q.dim(0), t = q.dim(1), d = q.dim(2);
    if (heads == 0 || d % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                         " heads");
    }
    const std::size_t dh = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> p(Shape{n, heads, t, t});
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < t; ++i) {
                T* row = &p[((b * heads + h) * t + i) * t];
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < t; ++j) {
                    T s = 0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        s += q[(b * t + i) * d + h * dh + e] * k[(b * t + j) * d + h * dh + e];
                    }
                    row[j] = s * inv_sqrt;
                    mx = std::max(mx, row[j]);
                }
                T z = 0;
                for (std::size_t j = 0; j < t; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                for (std::size_t j = 0; j < t; ++j) row[j] /= z;
            }
        }
    }
    return p;
}

template <typename T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
    same_graph(q, k, "attention_core");
    same_graph(q, v, "attention_core");
    if (k.shape() != q.shape() || v.shape() != q.shape()) throw ShapeError("attention_core: q/k/v shape mismatch");
    Tensor<T> p = attention_weights(q.value(), k.value(), heads);
    const std::size_t n = q.shape()[0], t = q.shape()[1], d = q.shape()[2], dh = d / heads;
    const auto& vv = v.value();
    Tensor<T> out(q.shape());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < t; ++i) {
                const T* row = &p[((b * heads + h) * t + i) * t];
                for (std::size_t j = 0; j < t; ++j) {
                    for (std::size_t e = 0; e < dh; ++e) out[(b * t + i) * d + h * dh + e] += row[j] * vv[(b * t + j) * d + h * dh + e];
                }
            }
        }
    }
    Graph<T>* g = &q.graph();
    std::size_t iq = q.id(), ik = k.id(), iv = v.id();
    return g->record(
        std::move(out), {iq, ik, iv},
        [g, iq, ik, iv, p, n, t, d, dh, heads](const Tensor<T>& go) {
            const auto& qv = g->value(iq);
            const auto& kv = g->value(ik);
            const auto& vv = g->value(iv);
            Tensor<T> gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
            const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
            std::vector<T> dp(t), ds(t);
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t i = 0; i < t; ++i) {
                        const T* row = &p[((b * heads + h) * t + i) * t];
                        const T* gorow = &go[(b * t + i) * d + h * dh];
                        T dot = 0;
                        for (std::size_t j = 0; j < t; ++j) {
                            T acc = 0;
                            for (std::size_t e = 0; e < dh; ++e) {
                                acc += gorow[e] * vv[(b * t + j) * d + h * dh + e];
                                gv[(b * t + j) * d + h * dh + e] += row[j] * gorow[e];
                            }
                            dp[j] = acc;
                            dot += acc * row[j];
                        }
                        for (std::size_t j = 0; j < t; ++j) ds[j] = row[j] * (dp[j] - dot) * inv_sqrt;
                        for (std::size_t j = 0; j < t; ++j) {
                            for (std::size_t e = 0; e < dh; ++e) {
                                gq[(b * t + i) * d + h * dh + e] += ds[j] * kv[(b * t + j) * d + h * dh + e];
                                gk[(b * t + j) * d + h * dh + e] += ds[j] * qv[(b * t + i) * d + h * dh + e];
                            }
                        }
                    }
                }
            }
            return std::vector<Tensor<T>>{gq, gk, gv};
        },
        "attention_core");
}

template <typename T>
Var<T> patchify(Var<T> x, std::size_t patch) {
    require_rank(x.value(), 4, "patchify");
    const auto& xs = x.shape();
    const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw ShapeError("patchify: extent " + shape_str(xs) + " not divisible by patch " + std::to_string(patch));
    }
    const std::size_t ph = h / patch, pw = w / patch, t = ph * pw, f = c * patch * patch;
    // index map: out position -> input position
    std::vector<std::size_t> src(n * t * f);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t py = 0; py < ph; ++py) {
            for (std::size_t px = 0; px < pw; ++px) {
                const std::size_t tok = py * pw + px;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t i = 0; i < patch; ++i) {
                        for (std::size_t j = 0; j < patch; ++j) {
                            const std::size_t feat = (ch * patch + i) * patch + j;
                            src[(b * t + tok) * f + feat] =
                                ((b * c + ch) * h + py * patch + i) * w + px * patch + j;
                        }
                    }
                }
            }
        }
    }
    Tensor<T> out(Shape{n, t, f});
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.value()[src[i]];
    Shape in_shape = xs;
    return x.graph().record(std::move(out), {x.id()},
                            [in_shape, src](const Tensor<T>& go) {
                                Tensor<T> gi(in_shape);
                                for (std::size_t i = 0; i < src.size(); ++i) gi[src[i]] += go[i];
                                return std::vector<Tensor<T>>{gi};
                            },
                            "patchify");
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
    require_rank(logits.value(), 2, "softmax_cross_entropy");
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
    if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    Tensor<T> probs(logits.shape());
    T loss = 0;
    const auto& lv = logits.value();
    for (std::size_t b = 0; b < n; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= k) throw ShapeError("label out of range");
        T mx = lv[b * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[b * k + j]);
        T z = 0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[b * k + j] = std::exp(lv[b * k + j] - mx);
            z += probs[b * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[b * k + j] /= z;
        loss += -(lv[b * k + labels[b]] - mx - std::log(z));
    }
    loss /= static_cast<T>(n);
    return logits.graph().record(Tensor<T>::scalar(loss), {logits.id()},
                                 [probs, labels, n, k](const Tensor<T>& go) {
                                     Tensor<T> gi = probs;
                                     const T s = go.item() / static_cast<T>(n);
                                     for (std::size_t b = 0; b < n; ++b) {
                                         gi[b * k + labels[b]] -= T(1);
                                         for (std::size_t j = 0; j < k; ++j) gi[b * k + j] *= s;
                                     }
                                     return std::vector<Tensor<T>>{gi};
                                 },
                                 "softmax_cross_entropy");
}

#define BANET_INSTANTIATE_OPS(T)                                                                     \
    template Var<T> add(Var<T>, Var<T>);                                                             \
    template Var<T> sub(Var<T>, Var<T>);                                                             \
    template Var<T> mul(Var<T>, Var<T>);                                                             \
    template Var<T> scale(Var<T>, T);                                                                \
    template Var<T> sum(Var<T>);                                                                     \
    template Var<T> mean(Var<T>);                                                                    \
    template Var<T> relu(Var<T>);                                                                    \
    template Var<T> sigmoid(Var<T>);                                                                 \
    template Var<T> reshape(Var<T>, Shape);                                                          \
    template Var<T> concat_features(Var<T>, Var<T>);                                                 \
    template Var<T> scale_by_entry(Var<T>, Var<T>, std::size_t);                                     \
    template Var<T> gap(Var<T>);                                                                     \
    template Var<T> spatial_max(Var<T>);                                                             \
    template Var<T> spatial_std(Var<T>);                                                             \
    template Var<T> spatial_filter(Var<T>, const Tensor<T>&);                                        \
    template Var<T> linear(Var<T>, Var<T>);                                                          \
    template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                  \
    template Var<T> conv2d(Var<T>, Var<T>, std::size_t, std::size_t, Extent);                        \
    template Var<T> batchnorm(Var<T>, Var<T>, Var<T>, BatchNormState<T>&, Mode);                     \
    template Var<T> layernorm(Var<T>, Var<T>, Var<T>, T);                                            \
    template Var<T> channel_scale(Var<T>, Var<T>);                                                   \
    template Var<T> token_scale(Var<T>, Var<T>);                                                     \
    template Var<T> token_mean(Var<T>);                                                              \
    template Var<T> tokens_to_channels(Var<T>);                                                      \
    template Var<T> attention_core(Var<T>, Var<T>, Var<T>, std::size_t);                             \
    template Tensor<T> attention_weights(const Tensor<T>&, const Tensor<T>&, std::size_t);           \
    template Var<T> patchify(Var<T>, std::size_t);                                                   \
    template Var<T> softmax_cross_entropy(Var<T>, const std::vector<int>&);

BANET_INSTANTIATE_OPS(float)
BANET_INSTANTIATE_OPS(double)
// Extended precision backs the finite-difference oracle.
BANET_INSTANTIATE_OPS(long double)

}  // namespace banet
