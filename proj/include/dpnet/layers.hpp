#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dpnet/norm.hpp"
#include "dpnet/ops.hpp"
#include "dpnet/optim.hpp"
#include "dpnet/rng.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

// conv3x3 (or 1x1) -> normalization -> relu. Training forwards keep the
// activations needed by backward(); eval forwards keep nothing.
template <typename S>
class ConvUnitT {
public:
    ConvUnitT(ParamRegistryT<S>& reg, const std::string& name, int cin, int cout, int ksize,
              int stride, int norm_copies, RngState& rng, bool input_grad = true)
        : stride_(stride), pad_(ksize / 2), input_grad_(input_grad) {
        w_ = reg.add_param(name + ".w", cout, cin, ksize, ksize);
        const double std = std::sqrt(2.0 / (static_cast<double>(ksize) * ksize * cin));
        w_->tensor.fill_normal(rng, std);
        b_ = reg.add_param(name + ".b", 1, cout, 1, 1);
        norm_ = std::make_unique<AnmLayerT<S>>(reg, name + ".norm", cout, norm_copies);
    }

    TensorT<S> forward(TensorT<S> x, int j, Mode mode, OpCounter* oc = nullptr) {
        TensorT<S> c = conv2d(x, w_->tensor, b_->tensor, stride_, pad_, oc);
        TensorT<S> n = norm_->forward(c, j, mode, oc);
        TensorT<S> out = relu(n, oc);
        if (mode == Mode::train) {
            in_ = std::move(x);
            in_.zero_grad();
            conv_out_ = std::move(c);
            conv_out_.zero_grad();
            norm_out_ = std::move(n);
        }
        return out;
    }

    // Returns the gradient w.r.t. the unit input (empty when input_grad is off).
    TensorT<S> backward(const TensorT<S>& out_grad) {
        norm_out_.zero_grad();
        relu_backward(norm_out_, out_grad);
        TensorT<S> ng = norm_out_;
        ng.data.swap(ng.grad);
        norm_->backward(conv_out_, ng);
        TensorT<S> cg = conv_out_;
        cg.data.swap(cg.grad);
        conv2d_backward(in_, w_->tensor, b_->tensor, cg, stride_, pad_, input_grad_);
        if (!input_grad_) return TensorT<S>();
        TensorT<S> gx = in_;
        gx.data.swap(gx.grad);
        gx.zero_grad();
        return gx;
    }

    void release_cache() {
        in_ = TensorT<S>();
        conv_out_ = TensorT<S>();
        norm_out_ = TensorT<S>();
    }

    // Forward flops for one image at the given input size, matching OpCounter.
    static uint64_t flops(int cin, int cout, int hin, int win, int ksize, int stride) {
        const uint64_t ho = conv_out_dim(hin, ksize, stride, ksize / 2);
        const uint64_t wo = conv_out_dim(win, ksize, stride, ksize / 2);
        const uint64_t plane = ho * wo;
        return 2ull * ksize * ksize * cin * cout * plane  // conv
               + cout * plane                             // bias
               + 3ull * cout * plane;                     // norm (2) + relu (1)
    }

    AnmLayerT<S>& norm() { return *norm_; }
    const TensorT<S>& weight() const { return w_->tensor; }

private:
    ParamT<S>* w_;
    ParamT<S>* b_;
    std::unique_ptr<AnmLayerT<S>> norm_;
    int stride_;
    int pad_;
    bool input_grad_;
    TensorT<S> in_, conv_out_, norm_out_;
};

// Two conv units with a residual add when the channel counts line up.
template <typename S>
class ResidualBlockT {
public:
    ResidualBlockT(ParamRegistryT<S>& reg, const std::string& name, int cin, int cout,
                   int norm_copies, RngState& rng)
        : u1_(reg, name + ".c1", cin, cout, 3, 1, norm_copies, rng),
          u2_(reg, name + ".c2", cout, cout, 3, 1, norm_copies, rng),
          residual_(cin == cout) {}

    TensorT<S> forward(const TensorT<S>& x, int j, Mode mode, OpCounter* oc = nullptr) {
        TensorT<S> y = u2_.forward(u1_.forward(x, j, mode, oc), j, mode, oc);
        return residual_ ? add(y, x, oc) : std::move(y);
    }

    TensorT<S> backward(const TensorT<S>& out_grad) {
        TensorT<S> gx = u1_.backward(u2_.backward(out_grad));
        if (residual_) {
            for (size_t i = 0; i < gx.numel(); ++i) gx.data[i] += out_grad.data[i];
        }
        return gx;
    }

    void release_cache() {
        u1_.release_cache();
        u2_.release_cache();
    }

    static uint64_t flops(int cin, int cout, int hin, int win) {
        uint64_t f = ConvUnitT<S>::flops(cin, cout, hin, win, 3, 1) +
                     ConvUnitT<S>::flops(cout, cout, hin, win, 3, 1);
        if (cin == cout) f += static_cast<uint64_t>(cout) * hin * win;  // residual add
        return f;
    }

    bool residual() const { return residual_; }

private:
    ConvUnitT<S> u1_, u2_;
    bool residual_;
};

}  // namespace dpnet
