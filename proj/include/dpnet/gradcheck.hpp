#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dpnet/common.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

// Verifies an analytic gradient against central finite differences.
//
// `loss_fn` evaluates the scalar loss for the current contents of the checked
// tensors and must not mutate them; `grad_fn` runs forward+backward and
// leaves analytic gradients in each tensor's grad buffer. Perturbation size
// is eps * max(1, |value|). Returns the max over checked elements of
// |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
//
// With max_coords > 0 only that many deterministically-sampled coordinates
// per tensor are probed, which keeps whole-network checks affordable.
struct GradCheckResult {
    double max_rel_error = 0.0;
    size_t checked = 0;
};

template <typename S>
GradCheckResult grad_check(const std::function<double()>& loss_fn,
                           const std::function<void()>& grad_fn,
                           const std::vector<TensorT<S>*>& inputs, double eps,
                           size_t max_coords = 0) {
    DPNET_CHECK(eps >= 1e-4 && eps <= 1e-2, "grad_check: eps must lie in [1e-4, 1e-2], got ",
                eps);
    for (TensorT<S>* t : inputs) t->zero_grad();
    grad_fn();
    {
        const double probe = loss_fn();
        DPNET_CHECK(std::isfinite(probe), "grad_check: loss is not finite (", probe, ")");
    }

    GradCheckResult res;
    uint64_t pick = 0x9e3779b97f4a7c15ull;
    for (TensorT<S>* t : inputs) {
        const size_t n = t->numel();
        std::vector<size_t> coords;
        if (max_coords == 0 || n <= max_coords) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (size_t i = 0; i < max_coords; ++i) {
                pick = pick * 6364136223846793005ull + 1442695040888963407ull;
                coords.push_back(pick % n);
            }
        }
        for (size_t idx : coords) {
            const S saved = t->data[idx];
            const double h =
                eps * std::max(1.0, std::abs(static_cast<double>(saved)));
            t->data[idx] = static_cast<S>(static_cast<double>(saved) + h);
            const double lp = loss_fn();
            t->data[idx] = static_cast<S>(static_cast<double>(saved) - h);
            const double lm = loss_fn();
            t->data[idx] = saved;
            DPNET_CHECK(std::isfinite(lp) && std::isfinite(lm),
                        "grad_check: non-finite perturbed loss");
            // Use the actually-applied scalar steps, not the requested one.
            const double hp =
                static_cast<double>(static_cast<S>(static_cast<double>(saved) + h)) -
                static_cast<double>(saved);
            const double hm =
                static_cast<double>(saved) -
                static_cast<double>(static_cast<S>(static_cast<double>(saved) - h));
            const double numeric = (lp - lm) / (hp + hm);
            const double analytic = static_cast<double>(t->grad[idx]);
            const double denom = std::max(1e-6, std::abs(analytic) + std::abs(numeric));
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel > res.max_rel_error) res.max_rel_error = rel;
            ++res.checked;
        }
    }
    return res;
}

}  // namespace dpnet
