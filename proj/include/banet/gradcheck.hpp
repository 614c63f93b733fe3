#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "banet/autograd.hpp"

namespace banet {

struct GradCheckOptions {
    double eps = 1e-5;
    // Tensors larger than this are checked on a seeded sample of this many
    // coordinates; smaller ones are checked exhaustively.
    std::size_t max_coords = 128;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
};

template <typename T>
using LossFn = std::function<Var<T>(Graph<T>&)>;

/// Compares reverse-mode gradients of `loss` with respect to `params` against
/// central differences (f(p+eps) - f(p-eps)) / (2 eps). Relative error per
/// coordinate uses the denominator max(|analytic|, |numeric|, 1e-8).
///
/// `loss` must build its graph from scratch on every call, reading parameter
/// values through Graph::param. Throws ShapeError for a non-scalar loss.
template <typename T>
GradCheckResult grad_check(const LossFn<T>& loss, const std::vector<Parameter<T>*>& params,
                           const GradCheckOptions& opts = {});

/// Same comparison, but the central differences are taken on `oracle`, a
/// copy of the computation in a wider type U whose parameters mirror `params`
/// one-to-one. Their values are overwritten with those of `params` first.
template <typename T, typename U>
GradCheckResult grad_check(const LossFn<T>& loss, const std::vector<Parameter<T>*>& params, const LossFn<U>& oracle,
                           const std::vector<Parameter<U>*>& oracle_params, const GradCheckOptions& opts = {});

double relative_error(double analytic, double numeric);

}  // namespace banet
