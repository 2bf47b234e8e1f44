#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "klink/autograd.hpp"

namespace klink {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t entries_checked = 0;
    double tolerance = 0.0;
    bool passed = true;
};

namespace detail {

template <typename T, typename LossFn>
std::vector<Tensor<T>> analytic_gradients(LossFn& loss_fn, const std::vector<Parameter<T>*>& params) {
    for (auto* p : params) p->zero_grad();
    {
        Graph<T> g;
        auto loss = loss_fn(g);
        g.backward(loss);
    }
    std::vector<Tensor<T>> out;
    for (auto* p : params) out.push_back(p->grad);
    return out;
}

// Central differences over `probe`, compared entrywise with `analytic`.
template <typename T, typename R, typename LossFn>
GradCheckReport compare_central(const std::vector<Tensor<T>>& analytic, LossFn& loss_fn, const std::vector<Parameter<R>*>& probe, R eps,
                                double tol) {
    if (!(eps > R(0))) throw Error("finite_difference_check: eps must be positive");
    auto evaluate = [&]() {
        Graph<R> g;
        return loss_fn(g).item();
    };
    GradCheckReport report;
    report.tolerance = tol;
    for (std::size_t k = 0; k < probe.size(); ++k) {
        auto& p = *probe[k];
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const R saved = p.value[i];
            p.value[i] = saved + eps;
            const R up = evaluate();
            p.value[i] = saved - eps;
            const R down = evaluate();
            p.value[i] = saved;
            const double numeric = static_cast<double>((up - down) / (R(2) * eps));
            const double a = static_cast<double>(analytic[k][i]);
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            ++report.entries_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_parameter = p.name;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < report.tolerance;
    return report;
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every entry of every parameter.
/// Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
/// loss_fn(Graph&) must record a scalar loss and be deterministic.
template <typename T, typename LossFn>
GradCheckReport finite_difference_check(LossFn&& loss_fn, const std::vector<Parameter<T>*>& params, T eps, T tol) {
    auto analytic = detail::analytic_gradients(loss_fn, params);
    return detail::compare_central(analytic, loss_fn, params, eps, static_cast<double>(tol));
}

/// Same comparison, but the central differences are taken on a mirror of the
/// computation in a wider type R (e.g. long double). Parameter values are
/// copied into the mirror first, so both sides see the same point. Useful when
/// the loss is exactly invariant along some directions: their true gradient is
/// zero and T-precision differences only measure rounding.
template <typename T, typename R, typename LossFn, typename MirrorFn>
GradCheckReport finite_difference_check(LossFn&& loss_fn, const std::vector<Parameter<T>*>& params, MirrorFn&& mirror_fn,
                                        const std::vector<Parameter<R>*>& mirror, R eps, double tol) {
    if (mirror.size() != params.size()) throw Error("finite_difference_check: mirror parameter count differs");
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (mirror[k]->value.shape() != params[k]->value.shape())
            throw Error("finite_difference_check: mirror shape differs for " + params[k]->name);
        for (std::size_t i = 0; i < params[k]->value.numel(); ++i) mirror[k]->value[i] = static_cast<R>(params[k]->value[i]);
    }
    auto analytic = detail::analytic_gradients(loss_fn, params);
    return detail::compare_central(analytic, mirror_fn, mirror, eps, tol);
}

}  // namespace klink
