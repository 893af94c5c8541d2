#pragma once

#include <string>
#include <vector>

#include "dpnet/backbone.hpp"
#include "dpnet/dfp.hpp"
#include "dpnet/gradcheck.hpp"
#include "dpnet/head.hpp"

namespace dpnet {

// Central-finite-difference verification of every differentiable op, run at
// double precision where the analytic/numeric comparison is meaningful to
// ~1e-12, plus float32 probes for the multilinear primitives (whose central
// differences are truncation-free, so a larger step sidesteps rounding).
// Network-level checks use eps 1e-4: larger steps make some differences
// straddle relu kinks where the comparison means nothing.
struct GradSuiteEntry {
    std::string name;
    double max_rel_error = 0.0;
    size_t checked = 0;
};

namespace gradsuite_detail {

template <typename S>
std::vector<double> projection(size_t n, uint64_t seed) {
    RngState rng(seed);
    std::vector<double> r(n);
    for (auto& v : r) v = rng.uniform(-1.0, 1.0);
    return r;
}

template <typename S>
double dot_proj(const TensorT<S>& t, const std::vector<double>& r) {
    double acc = 0.0;
    for (size_t i = 0; i < t.numel(); ++i) acc += static_cast<double>(t.data[i]) * r[i];
    return acc;
}

template <typename S>
GradCheckResult conv_check(uint64_t seed, double eps) {
    RngState rng(seed);
    TensorT<S> x(1, 2, 5, 5), w(3, 2, 3, 3), b(1, 3, 1, 1);
    x.fill_normal(rng, 1.0);
    w.fill_normal(rng, 0.5);
    b.fill_normal(rng, 0.2);
    const auto r = projection<S>(75, seed + 100);
    auto loss = [&] { return dot_proj(conv2d(x, w, b, 1, 1), r); };
    auto grad = [&] {
        TensorT<S> out = conv2d(x, w, b, 1, 1);
        TensorT<S> og = out;
        for (size_t i = 0; i < og.numel(); ++i) og.data[i] = static_cast<S>(r[i]);
        conv2d_backward(x, w, b, og, 1, 1);
    };
    return grad_check<S>(loss, grad, {&x, &w, &b}, eps);
}

inline GradCheckResult resize_check(uint64_t seed, Rational df) {
    RngState rng(seed);
    TensorT<double> x(1, 2, 9, 9);
    x.fill_normal(rng, 1.0);
    const size_t out_n = 2ull * df.scale_dim(9) * df.scale_dim(9);
    const auto r = projection<double>(out_n, seed + 7);
    auto loss = [&] { return dot_proj(bilinear_resize(x, df), r); };
    auto grad = [&] {
        TensorT<double> out = bilinear_resize(x, df);
        TensorT<double> og = out;
        for (size_t i = 0; i < og.numel(); ++i) og.data[i] = r[i];
        bilinear_resize_backward(x, og, df);
    };
    return grad_check<double>(loss, grad, {&x}, 1e-3);
}

template <typename S>
GradCheckResult anm_check(uint64_t seed, Mode mode, double eps) {
    ParamRegistryT<S> reg;
    AnmLayerT<S> anm(reg, "n", 3, 2);
    RngState rng(seed);
    reg.params()[0]->tensor.fill_normal(rng, 0.3);
    for (auto& v : reg.params()[0]->tensor.data) v += S(1);
    reg.params()[1]->tensor.fill_normal(rng, 0.5);
    TensorT<S> x(2, 3, 4, 4);
    x.fill_normal(rng, 1.0);
    const auto r = projection<S>(x.numel(), seed + 3);
    auto loss = [&] { return dot_proj(anm.forward(x, 0, mode), r); };
    auto grad = [&] {
        TensorT<S> y = anm.forward(x, 0, mode);
        TensorT<S> og = y;
        for (size_t i = 0; i < og.numel(); ++i) og.data[i] = static_cast<S>(r[i]);
        anm.backward(x, og);
    };
    return grad_check<S>(loss, grad,
                         {&x, &reg.params()[0]->tensor, &reg.params()[1]->tensor}, eps);
}

inline GradCheckResult head_check(uint64_t seed) {
    using S = double;
    ParamRegistryT<S> reg;
    RngState rng(seed);
    HeadConfig hc;
    hc.in_channels = 6;
    hc.num_classes = 2;
    HeadT<S> head(reg, hc, 2, rng);
    TensorT<S> f(1, 6, 5, 5);
    f.fill_normal(rng, 0.8);
    GtAnnotation gts;
    gts.boxes = {{4, 4, 28, 30}, {12, 20, 36, 38}};
    gts.labels = {1, 0};
    const auto asg = assign_targets(5, 5, 8.0, 8.0, gts);
    auto loss = [&] {
        return detection_loss(head.forward(f, 0, Mode::train), {asg}, 1.0).total;
    };
    auto grad = [&] {
        auto out = head.forward(f, 0, Mode::train);
        TensorT<S> d_cls, d_box;
        detection_loss(out, {asg}, 1.0, &d_cls, &d_box);
        TensorT<S> gf = head.backward(d_cls, d_box);
        for (size_t i = 0; i < f.numel(); ++i) f.grad[i] += gf.data[i];
    };
    std::vector<TensorT<S>*> checked{&f};
    for (const auto& p : reg.params()) checked.push_back(&p->tensor);
    return grad_check<S>(loss, grad, checked, 1e-4, 25);
}

inline GradCheckResult dfp_check(uint64_t seed) {
    using S = double;
    ParamRegistryT<S> reg;
    RngState rng(seed);
    DfpConfig dc;
    dc.channels = {4, 6, 8, 8};
    DfpNetT<S> dfp(reg, dc, 6, 3, rng);
    TensorT<S> f1(2, 6, 16, 16);
    f1.fill_normal(rng, 0.7);
    const std::vector<std::vector<int>> labels = {{1, 0, 0}, {1, 1, 0}};
    const std::vector<std::array<double, 4>> targets = {{0.7, 1.2, 0.9, 1.5},
                                                        {1.4, 2.0, 1.8, 2.2}};
    auto loss = [&] {
        auto out = dfp.forward(f1, Mode::train);
        return dfp_loss_batch(out.df_logits, out.v_hat, labels, targets, 1.0);
    };
    auto grad = [&] {
        auto out = dfp.forward(f1, Mode::train);
        TensorT<S> dl, dv;
        dfp_loss_batch(out.df_logits, out.v_hat, labels, targets, 1.0, &dl, &dv);
        dfp.backward(dl, dv);
    };
    std::vector<TensorT<S>*> checked;
    for (const auto& p : reg.params()) checked.push_back(&p->tensor);
    return grad_check<S>(loss, grad, checked, 1e-4, 25);
}

inline GradCheckResult bce_check(uint64_t seed) {
    RngState rng(seed);
    TensorT<double> z(1, 1, 1, 8);
    z.fill_normal(rng, 1.5);
    std::vector<double> y(8);
    for (auto& v : y) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    auto loss = [&] { return bce_with_logits(z.data, y); };
    auto grad = [&] {
        std::vector<double> dz;
        bce_with_logits(z.data, y, &dz);
        for (size_t i = 0; i < dz.size(); ++i) z.grad[i] += dz[i];
    };
    return grad_check<double>(loss, grad, {&z}, 1e-3);
}

inline GradCheckResult smooth_l1_check(uint64_t seed) {
    RngState rng(seed);
    TensorT<double> pred(1, 1, 1, 8);
    std::vector<double> target(8);
    // keep |pred - target| away from the branch point at beta
    for (size_t i = 0; i < 8; ++i) {
        target[i] = rng.normal();
        double d = rng.normal();
        if (std::abs(std::abs(d) - kRegBeta) < 0.02) d += 0.05;
        pred.data[i] = target[i] + d;
    }
    auto loss = [&] { return smooth_l1(pred.data, target, kRegBeta); };
    auto grad = [&] {
        std::vector<double> dp;
        smooth_l1(pred.data, target, kRegBeta, &dp);
        for (size_t i = 0; i < dp.size(); ++i) pred.grad[i] += dp[i];
    };
    return grad_check<double>(loss, grad, {&pred}, 1e-3);
}

inline GradCheckResult sigmoid_fc_check(uint64_t seed) {
    RngState rng(seed);
    TensorT<double> x(1, 4, 1, 1), w(3, 4, 1, 1), b(1, 3, 1, 1);
    x.fill_normal(rng, 1.0);
    w.fill_normal(rng, 0.8);
    b.fill_normal(rng, 0.2);
    const auto r = projection<double>(3, seed + 5);
    auto loss = [&] {
        return dot_proj(sigmoid(fully_connected(x, w, b)), r);
    };
    auto grad = [&] {
        TensorT<double> fc = fully_connected(x, w, b);
        TensorT<double> s = sigmoid(fc);
        TensorT<double> og = s;
        for (size_t i = 0; i < og.numel(); ++i) og.data[i] = r[i];
        fc.zero_grad();
        sigmoid_backward(fc, s, og);
        TensorT<double> fg = fc;
        fg.data = fc.grad;
        fully_connected_backward(x, w, b, fg);
    };
    return grad_check<double>(loss, grad, {&x, &w, &b}, 1e-3);
}

inline GradCheckResult gap_check(uint64_t seed) {
    RngState rng(seed);
    TensorT<double> x(2, 3, 4, 4);
    x.fill_normal(rng, 1.0);
    const auto r = projection<double>(6, seed + 11);
    auto loss = [&] { return dot_proj(global_avg_pool(x), r); };
    auto grad = [&] {
        TensorT<double> g = global_avg_pool(x);
        TensorT<double> og = g;
        for (size_t i = 0; i < og.numel(); ++i) og.data[i] = r[i];
        global_avg_pool_backward(x, og);
    };
    return grad_check<double>(loss, grad, {&x}, 1e-3);
}

}  // namespace gradsuite_detail

inline std::vector<GradSuiteEntry> run_gradient_suite() {
    namespace gd = gradsuite_detail;
    const std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
    std::vector<GradSuiteEntry> out;
    auto collect = [&](const std::string& name, auto&& fn) {
        GradSuiteEntry e;
        e.name = name;
        for (uint64_t s : seeds) {
            const GradCheckResult r = fn(s);
            e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
            e.checked += r.checked;
        }
        out.push_back(e);
    };

    collect("conv2d_f64", [](uint64_t s) { return gd::conv_check<double>(s, 1e-3); });
    collect("conv2d_f32", [](uint64_t s) { return gd::conv_check<float>(s, 1e-2); });
    for (Rational df : {Rational{1, 2}, Rational{1, 3}, Rational{1, 4}}) {
        collect(format_msg("bilinear_resize_", df.num, "_", df.den),
                [df](uint64_t s) { return gd::resize_check(s, df); });
    }
    collect("anm_train_f64", [](uint64_t s) { return gd::anm_check<double>(s, Mode::train, 1e-3); });
    collect("anm_eval_f64", [](uint64_t s) { return gd::anm_check<double>(s, Mode::eval, 1e-3); });
    collect("anm_train_f32", [](uint64_t s) { return gd::anm_check<float>(s, Mode::train, 1e-2); });
    collect("head", [](uint64_t s) { return gd::head_check(s); });
    collect("dfp", [](uint64_t s) { return gd::dfp_check(s); });
    collect("bce_loss", [](uint64_t s) { return gd::bce_check(s); });
    collect("smooth_l1", [](uint64_t s) { return gd::smooth_l1_check(s); });
    collect("sigmoid_fc", [](uint64_t s) { return gd::sigmoid_fc_check(s); });
    collect("global_avg_pool", [](uint64_t s) { return gd::gap_check(s); });
    return out;
}

}  // namespace dpnet
