#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dpnet/common.hpp"
#include "dpnet/rng.hpp"

namespace dpnet {

// Dense 4-D array (N, C, H, W) with a same-shape gradient buffer. Every
// feature map, weight and loss input in the library lives in one of these;
// grad is zero-initialized and accumulated into by the backward ops.
//
// The scalar type is a template parameter so the same op and layer code can
// run in float32 (the production type) and in float64, which the gradient
// suite uses to compare analytic gradients against finite differences well
// below the float32 noise floor.
template <typename S>
struct TensorT {
    std::array<int, 4> shape{0, 0, 0, 0};
    std::vector<S> data;
    std::vector<S> grad;

    TensorT() = default;
    TensorT(int n, int c, int h, int w) { resize(n, c, h, w); }

    void resize(int n, int c, int h, int w) {
        DPNET_CHECK(n >= 0 && c >= 0 && h >= 0 && w >= 0, "Tensor: negative dim (", n, ",", c,
                    ",", h, ",", w, ")");
        shape = {n, c, h, w};
        data.assign(numel(), S(0));
        grad.assign(numel(), S(0));
    }

    int n() const { return shape[0]; }
    int c() const { return shape[1]; }
    int h() const { return shape[2]; }
    int w() const { return shape[3]; }
    size_t numel() const {
        return static_cast<size_t>(shape[0]) * shape[1] * shape[2] * shape[3];
    }

    size_t index(int n, int c, int y, int x) const {
        return ((static_cast<size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x;
    }
    S& at(int n, int c, int y, int x) { return data[index(n, c, y, x)]; }
    S at(int n, int c, int y, int x) const { return data[index(n, c, y, x)]; }
    S& grad_at(int n, int c, int y, int x) { return grad[index(n, c, y, x)]; }

    void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    void fill_normal(RngState& rng, double stddev) {
        for (auto& v : data) v = static_cast<S>(rng.normal() * stddev);
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename T>
    TensorT<T> cast() const {
        TensorT<T> out(shape[0], shape[1], shape[2], shape[3]);
        for (size_t i = 0; i < numel(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }

    std::string shape_str() const {
        return format_msg("(", shape[0], ",", shape[1], ",", shape[2], ",", shape[3], ")");
    }
};

using Tensor = TensorT<float>;

enum class Mode { train, eval };

// Exact down-sampling factor. The candidates 1/2, 1/3, 1/4 are kept as
// integer ratios so output sizes never drift from decimal truncation; the
// decimal forms 0.5/0.33/0.25 appear only at the CLI and in reports.
struct Rational {
    int num = 1;
    int den = 1;

    double value() const { return static_cast<double>(num) / den; }

    // round(size * num/den) with halves away from zero, floored at 1.
    int scale_dim(int size) const {
        DPNET_CHECK(size >= 1, "scale_dim: size must be >= 1, got ", size);
        const long long r = (2ll * size * num + den) / (2ll * den);
        return static_cast<int>(r < 1 ? 1 : r);
    }

    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
};

}  // namespace dpnet
