#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "starvc/numerics/tape.hpp"

namespace starvc::num {

/// |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

namespace detail {

inline double eval_scalar(const ScalarFn& f, const BasicTensor<double>& x) {
    Tape<double> tape;
    Var<double> xv = tape.leaf(x, false);
    return f(tape, xv).value().item();
}

}  // namespace detail

/// Worst per-coordinate relative error between reverse-mode gradients and
/// central differences of f at x, all in double precision.
inline double grad_check(const ScalarFn& f, const BasicTensor<double>& x, double step = 1e-4) {
    const double f0 = detail::eval_scalar(f, x);
    const double f1 = detail::eval_scalar(f, x);
    if (std::memcmp(&f0, &f1, sizeof(double)) != 0)
        throw DeterminismError("grad_check: repeated evaluation differs (" + std::to_string(f0) + " vs " +
                               std::to_string(f1) + ")");
    Tape<double> tape;
    Var<double> xv = tape.leaf(x, true);
    Var<double> loss = f(tape, xv);
    tape.backward(loss);
    const BasicTensor<double> analytic = tape.grad(xv);
    double worst = 0.0;
    BasicTensor<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double fp = detail::eval_scalar(f, probe);
        probe[i] = orig - step;
        const double fm = detail::eval_scalar(f, probe);
        probe[i] = orig;
        worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * step)));
    }
    return worst;
}

/// Gradient check over parameters of a model-like closure. For each listed
/// parameter, `coords_per_param` coordinates (all of them when <= 0 or larger
/// than the tensor) are perturbed, chosen with `rng`.
inline double grad_check_params(const std::function<Var<double>(Tape<double>&)>& loss_fn,
                                const std::vector<Param<double>*>& params, Rng& rng, int coords_per_param,
                                double step = 1e-4) {
    auto eval = [&] {
        Tape<double> t;
        return loss_fn(t).value().item();
    };
    const double f0 = eval(), f1 = eval();
    if (std::memcmp(&f0, &f1, sizeof(double)) != 0) throw DeterminismError("grad_check_params: repeated evaluation differs");
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> t;
        Var<double> loss = loss_fn(t);
        t.backward(loss);
    }
    double worst = 0.0;
    for (auto* p : params) {
        const std::size_t n = p->value.size();
        std::vector<std::size_t> idx;
        if (coords_per_param <= 0 || static_cast<std::size_t>(coords_per_param) >= n) {
            for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int k = 0; k < coords_per_param; ++k) idx.push_back(static_cast<std::size_t>(rng.below(n)));
        }
        for (std::size_t i : idx) {
            const double orig = p->value[i];
            p->value[i] = orig + step;
            const double fp = eval();
            p->value[i] = orig - step;
            const double fm = eval();
            p->value[i] = orig;
            worst = std::max(worst, relative_error(p->grad[i], (fp - fm) / (2.0 * step)));
        }
    }
    return worst;
}

}  // namespace starvc::num
