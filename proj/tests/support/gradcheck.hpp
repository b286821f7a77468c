#pragma once

// Central-difference gradient checking for float32 layer kernels. Float32
// limits FD accuracy to ~1e-2 relative at sane step sizes; the double-precision
// loss-level checks live with the loss templates, this is for layer plumbing.

#include <functional>

#include "ctdn/rng.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn::testing {

struct GradCheckResult {
    double worst_rel = 0.0;
    double worst_abs = 0.0;
    bool ok = true;
};

// f() recomputes the scalar loss from current tensor contents.
inline GradCheckResult fd_check(Tensor& target, const Tensor& analytic, const std::function<double()>& f,
                                double h = 5e-3, double rel_tol = 3e-2, double abs_tol = 2e-3,
                                size_t max_checks = 400, uint64_t seed = 1234) {
    GradCheckResult res;
    Rng rng(seed);
    std::vector<size_t> idx(target.v.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_checks) {
        rng.shuffle(idx);
        idx.resize(max_checks);
    }
    for (size_t i : idx) {
        const float orig = target.v[i];
        target.v[i] = float(orig + h);
        const double fp = f();
        target.v[i] = float(orig - h);
        const double fm = f();
        target.v[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic.v[i];
        const double abs_err = std::abs(fd - an);
        const double rel_err = abs_err / std::max({1.0, std::abs(fd), std::abs(an)});
        res.worst_rel = std::max(res.worst_rel, rel_err);
        res.worst_abs = std::max(res.worst_abs, abs_err);
        if (abs_err > abs_tol && rel_err > rel_tol) res.ok = false;
    }
    return res;
}

}  // namespace ctdn::testing
