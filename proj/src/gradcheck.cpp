#include "banet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace banet {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

template <typename T, typename U>
GradCheckResult grad_check(const LossFn<T>& loss, const std::vector<Parameter<T>*>& params, const LossFn<U>& oracle,
                           const std::vector<Parameter<U>*>& oracle_params, const GradCheckOptions& opts) {
    if (oracle_params.size() != params.size()) throw std::invalid_argument("grad_check: oracle parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (oracle_params[i]->value.shape() != params[i]->value.shape()) {
            throw ShapeError("grad_check: oracle parameter shape mismatch for " + params[i]->name);
        }
        if (static_cast<const void*>(oracle_params[i]) != static_cast<const void*>(params[i])) {
            oracle_params[i]->value = params[i]->value.template cast<U>();
        }
    }
    zero_grads(params);
    {
        Graph<T> g;
        Var<T> l = loss(g);
        g.backward(l);  // throws on non-scalar loss
    }
    std::vector<Tensor<T>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad);

    auto eval = [&oracle]() {
        Graph<U> g;
        return static_cast<long double>(oracle(g).value().item());
    };

    GradCheckResult res;
    std::mt19937_64 rng(opts.seed);
    const U eps = static_cast<U>(opts.eps);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<U>& p = *oracle_params[pi];
        std::vector<std::size_t> coords(p.value.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > opts.max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opts.max_coords);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t idx : coords) {
            const U orig = p.value[idx];
            const U hi = orig + eps, lo = orig - eps;
            p.value[idx] = hi;
            const long double fp = eval();
            p.value[idx] = lo;
            const long double fm = eval();
            p.value[idx] = orig;
            // Divide by the step actually taken, which differs from 2*eps after rounding.
            const double numeric = static_cast<double>((fp - fm) / (static_cast<long double>(hi) - lo));
            const double a = static_cast<double>(analytic[pi][idx]);
            const double err = relative_error(a, numeric);
            ++res.coords_checked;
            if (err > res.max_rel_error || res.worst_param.empty()) {
                res.max_rel_error = err;
                res.worst_param = params[pi]->name;
                res.worst_index = idx;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

template <typename T>
GradCheckResult grad_check(const LossFn<T>& loss, const std::vector<Parameter<T>*>& params,
                           const GradCheckOptions& opts) {
    return grad_check<T, T>(loss, params, loss, params, opts);
}

template GradCheckResult grad_check<float>(const LossFn<float>&, const std::vector<Parameter<float>*>&,
                                           const GradCheckOptions&);
template GradCheckResult grad_check<double>(const LossFn<double>&, const std::vector<Parameter<double>*>&,
                                            const GradCheckOptions&);
template GradCheckResult grad_check<double, long double>(const LossFn<double>&, const std::vector<Parameter<double>*>&,
                                                         const LossFn<long double>&,
                                                         const std::vector<Parameter<long double>*>&,
                                                         const GradCheckOptions&);

}  // namespace banet
