#ifndef RETENTION_TESTUTIL_HPP
#define RETENTION_TESTUTIL_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "retention/approx.hpp"
#include "retention/rng.hpp"

namespace retention::testutil {

// Central finite differences against the analytic backward pass on a random
// linear functional of the network output: L = sum_ij c_ij * out_ij.
// Checks `coords` random parameter coordinates at step h; a coordinate
// passes when |analytic - numeric| <= tol * max(|analytic|, |numeric|) or
// both are numerically zero.
struct GradCheckResult {
    int checked = 0;
    int failed = 0;
    double worst_rel = 0.0;
};

inline GradCheckResult gradient_check(Mlp& net, int batch, int coords,
                                      uint64_t seed, double h = 1e-5,
                                      double tol = 1e-4) {
    Rng rng(seed);
    Mat X(batch, net.input_dim());
    for (int i = 0; i < batch; ++i)
        for (int j = 0; j < net.input_dim(); ++j) X(i, j) = rng.normal(0.0, 1.0);
    Mat C(batch, net.output_dim());
    for (int i = 0; i < batch; ++i)
        for (int j = 0; j < net.output_dim(); ++j) C(i, j) = rng.normal(0.0, 1.0);

    auto loss = [&] { return (net.forward(X).array() * C.array()).sum(); };

    MlpCache cache;
    net.forward(X, cache);
    MlpGrads grads;
    net.backward(cache, C, grads);

    GradCheckResult res;
    const size_t n = net.param_count();
    for (int c = 0; c < coords; ++c) {
        const size_t i = rng.uniform_index(n);
        const double saved = net.get_param(i);
        net.set_param(i, saved + h);
        const double up = loss();
        net.set_param(i, saved - h);
        const double down = loss();
        net.set_param(i, saved);
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = net.grad_at(grads, i);
        const double denom = std::max(std::abs(analytic), std::abs(numeric));
        const double rel = denom > 0 ? std::abs(analytic - numeric) / denom : 0.0;
        ++res.checked;
        const bool ok =
            std::abs(analytic - numeric) <= tol * denom ||
            std::abs(analytic - numeric) <= 1e-7;  // dead-unit coordinates
        if (!ok) ++res.failed;
        res.worst_rel = std::max(res.worst_rel, ok ? res.worst_rel : rel);
        if (ok && denom > 0) res.worst_rel = std::max(res.worst_rel, rel);
    }
    return res;
}

}  // namespace retention::testutil

#endif
