#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "nlmf/params.hpp"

namespace nlmf {

struct FdEval {
    double loss = 0;
    double min_kink = std::numeric_limits<double>::infinity();
};

struct FdParamError {
    std::string name;
    double max_rel_err = 0;
};

struct FdReport {
    double max_rel_err = 0;
    std::string worst_param;
    double base_kink = std::numeric_limits<double>::infinity();
    bool skipped_near_kink = false;
    std::vector<FdParamError> params;
};

// Central finite differences in 64-bit against the analytic gradients
// produced by `run(store, want_grads)`. With want_grads the callable must
// fill store grads (after zeroing) and report the forward's kink proximity.
// Relative error uses a floored denominator so that near-zero gradients are
// compared absolutely.
//
// Kink handling: when the base evaluation lands within kink_tol of a
// non-differentiable point the check is skipped so the caller can redraw.
// Scalars whose first difference exceeds recheck_tol are re-verified at
// smaller steps and keep the best agreement: a difference corrupted by a
// kink crossing shrinks with the step, a wrong analytic gradient does not.
template <class RunFn>
FdReport fd_check(ParamStoreT<double>& store, RunFn&& run, double h = 1e-4, double denom_floor = 1e-3,
                  double kink_tol = 0.0,
                  double recheck_tol = std::numeric_limits<double>::infinity()) {
    store.zero_grads();
    FdEval base = run(store, true);
    FdReport report;
    report.base_kink = base.min_kink;
    if (base.min_kink < kink_tol) {
        report.skipped_near_kink = true;
        return report;
    }

    for (const auto& name : store.names()) {
        ParamEntry<double>& e = store.at(name);
        FdParamError pe{name, 0.0};
        for (std::int64_t i = 0; i < e.value.size(); ++i) {
            const std::size_t ii = static_cast<std::size_t>(i);
            const double saved = e.value.data[ii];
            const double ga = e.grad.data[ii];
            auto rel_at = [&](double step) {
                e.value.data[ii] = saved + step;
                const double lp = run(store, false).loss;
                e.value.data[ii] = saved - step;
                const double lm = run(store, false).loss;
                e.value.data[ii] = saved;
                const double gn = (lp - lm) / (2.0 * step);
                return std::abs(ga - gn) / std::max({denom_floor, std::abs(ga), std::abs(gn)});
            };
            double rel = rel_at(h);
            if (rel > recheck_tol)
                for (double shrink : {0.25, 0.0625}) rel = std::min(rel, rel_at(h * shrink));
            pe.max_rel_err = std::max(pe.max_rel_err, rel);
        }
        if (pe.max_rel_err > report.max_rel_err) {
            report.max_rel_err = pe.max_rel_err;
            report.worst_param = name;
        }
        report.params.push_back(std::move(pe));
    }
    return report;
}

} // namespace nlmf
