#pragma once

// Central finite differences over named parameter tensors. Deliberately knows
// nothing about the tape: it only re-evaluates the supplied loss function at
// perturbed points, so it can serve as an independent oracle for backward().

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "meet/tensor.hpp"

namespace meet {

using Params = std::map<std::string, Tensor>;
using LossFn = std::function<double(const Params&)>;

struct FdIssue {
    std::string param;
    std::size_t index;
};

struct FdResult {
    std::map<std::string, Tensor> grads;
    std::vector<FdIssue> non_finite;  // coordinates where a perturbed loss was not finite
};

struct Coord {
    std::string param;
    std::size_t index;
};

namespace detail {

inline double central_difference(const LossFn& fn, Params& work, const std::string& name, std::size_t i,
                                 double step, std::vector<FdIssue>& issues) {
    Tensor& t = work.at(name);
    const double saved = t[i];
    t[i] = saved + step;
    const double up = fn(work);
    t[i] = saved - step;
    const double down = fn(work);
    t[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
        issues.push_back({name, i});
        return std::numeric_limits<double>::quiet_NaN();
    }
    return (up - down) / (2.0 * step);
}

} // namespace detail

// Full gradient map, one central difference per coordinate.
inline FdResult finite_diff_gradient(const LossFn& fn, const Params& params, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_gradient: step must be > 0");
    FdResult r;
    Params work = params;
    for (const auto& [name, tensor] : params) {
        Tensor g(tensor.shape());
        for (std::size_t i = 0; i < tensor.numel(); ++i) {
            g[i] = detail::central_difference(fn, work, name, i, step, r.non_finite);
        }
        r.grads.emplace(name, std::move(g));
    }
    return r;
}

// Same estimator restricted to selected coordinates; used when the parameter
// space is too large to difference exhaustively.
inline std::vector<double> finite_diff_gradient_at(const LossFn& fn, const Params& params,
                                                   const std::vector<Coord>& coords, double step,
                                                   std::vector<FdIssue>* issues = nullptr) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_gradient: step must be > 0");
    std::vector<FdIssue> local;
    std::vector<double> out;
    out.reserve(coords.size());
    Params work = params;
    for (const Coord& c : coords) {
        out.push_back(detail::central_difference(fn, work, c.param, c.index, step, local));
    }
    if (issues) *issues = std::move(local);
    return out;
}

// max_i |a_i - b_i| / max(floor, |a_i|, |b_i|). The floor sits above the
// cancellation noise of a central difference at step 1e-5 on O(1) losses
// (~1e-10), so exactly-zero gradients compare clean while real errors at
// 1e-5 magnitude and up still register.
inline constexpr double kRelErrFloor = 1e-6;

inline double max_relative_error(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_relative_error: shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double denom = std::max({kRelErrFloor, std::abs(a[i]), std::abs(b[i])});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({kRelErrFloor, std::abs(a), std::abs(b)});
}

} // namespace meet
