#pragma once

#include <cmath>
#include <vector>

#include "dpnet/common.hpp"
#include "dpnet/ops.hpp"
#include "dpnet/optim.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

// Adaptive normalization: `copies` private (gamma, beta, running mean/var)
// sets switched by the active down-sampling-factor index. With copies == 1
// this degrades to a plain shared batch norm, which is both the DFP's
// normalization and the ablation baseline. A forward at index j touches no
// state of any other copy.
//
// Train mode normalizes with biased batch variance over (N, H, W) and folds
// the unbiased variance into the running estimate; eval mode uses the
// running statistics only. Per-element math runs in double and is rounded
// once into the output. Checkpoint keys are "<layer>.j<index>.<field>".
template <typename S>
class AnmLayerT {
public:
    AnmLayerT(ParamRegistryT<S>& reg, const std::string& name, int channels, int copies)
        : name_(name), channels_(channels), copies_(copies) {
        DPNET_CHECK(copies >= 1, "AnmLayer: need at least one copy");
        for (int j = 0; j < copies; ++j) {
            const std::string base = format_msg(name, ".j", j, ".");
            ParamT<S>* g = reg.add_param(base + "gamma", 1, channels, 1, 1);
            g->tensor.fill(S(1));
            gamma_.push_back(g);
            beta_.push_back(reg.add_param(base + "beta", 1, channels, 1, 1));
            running_mean_.push_back(reg.add_buffer(base + "running_mean", 1, channels, 1, 1));
            BufferT<S>* rv = reg.add_buffer(base + "running_var", 1, channels, 1, 1);
            rv->tensor.fill(S(1));
            running_var_.push_back(rv);
        }
    }

    int channels() const { return channels_; }
    int copies() const { return copies_; }

    // Maps a df index onto a copy; identity for true ANM, constant 0 when the
    // layer is shared.
    int copy_of(int j) const { return copies_ == 1 ? 0 : j; }

    struct StateView {
        const TensorT<S>& gamma;
        const TensorT<S>& beta;
        const TensorT<S>& running_mean;
        const TensorT<S>& running_var;
    };

    StateView state_of(int j) const {
        check_index(j);
        return {gamma_[j]->tensor, beta_[j]->tensor, running_mean_[j]->tensor,
                running_var_[j]->tensor};
    }

    TensorT<S> forward(const TensorT<S>& x, int df_index, Mode mode, OpCounter* oc = nullptr) {
        const int j = copy_of(df_index);
        check_index(j);
        DPNET_CHECK(x.c() == channels_, name_, ": input has ", x.c(), " channels, layer has ",
                    channels_);
        const size_t plane = static_cast<size_t>(x.h()) * x.w();
        const size_t cnt = static_cast<size_t>(x.n()) * plane;

        TensorT<S> out(x.n(), x.c(), x.h(), x.w());
        cache_.j = j;
        cache_.mode = mode;
        cache_.inv_std.assign(channels_, 0.0);

        if (mode == Mode::train) {
            DPNET_CHECK(cnt > 1, name_, ": train-mode batch has a single value per channel (",
                        x.shape_str(), "); variance undefined");
            cache_.xhat.resize(x.n(), x.c(), x.h(), x.w());
            parallel_for(channels_, [&](int64_t ci) {
                const int c = static_cast<int>(ci);
                double sum = 0.0, sq = 0.0;
                for (int n = 0; n < x.n(); ++n) {
                    const S* src = x.data.data() + x.index(n, c, 0, 0);
                    for (size_t i = 0; i < plane; ++i) {
                        sum += static_cast<double>(src[i]);
                        sq += static_cast<double>(src[i]) * static_cast<double>(src[i]);
                    }
                }
                const double mean = sum / static_cast<double>(cnt);
                const double var = std::max(0.0, sq / static_cast<double>(cnt) - mean * mean);
                const double inv_std = 1.0 / std::sqrt(var + kEps);
                cache_.inv_std[c] = inv_std;
                const double g = static_cast<double>(gamma_[j]->tensor.data[c]);
                const double b = static_cast<double>(beta_[j]->tensor.data[c]);
                for (int n = 0; n < x.n(); ++n) {
                    const S* src = x.data.data() + x.index(n, c, 0, 0);
                    S* xh = cache_.xhat.data.data() + cache_.xhat.index(n, c, 0, 0);
                    S* dst = out.data.data() + out.index(n, c, 0, 0);
                    for (size_t i = 0; i < plane; ++i) {
                        const double h = (static_cast<double>(src[i]) - mean) * inv_std;
                        xh[i] = static_cast<S>(h);
                        dst[i] = static_cast<S>(g * h + b);
                    }
                }
                const double unbiased =
                    var * static_cast<double>(cnt) / static_cast<double>(cnt - 1);
                S& rm = running_mean_[j]->tensor.data[c];
                S& rv = running_var_[j]->tensor.data[c];
                rm = static_cast<S>((1.0 - kMomentum) * static_cast<double>(rm) +
                                    kMomentum * mean);
                rv = static_cast<S>((1.0 - kMomentum) * static_cast<double>(rv) +
                                    kMomentum * unbiased);
            });
        } else {
            parallel_for(channels_, [&](int64_t ci) {
                const int c = static_cast<int>(ci);
                const double inv_std =
                    1.0 /
                    std::sqrt(static_cast<double>(running_var_[j]->tensor.data[c]) + kEps);
                const double scale = static_cast<double>(gamma_[j]->tensor.data[c]) * inv_std;
                const double shift =
                    static_cast<double>(beta_[j]->tensor.data[c]) -
                    static_cast<double>(running_mean_[j]->tensor.data[c]) * scale;
                cache_.inv_std[c] = inv_std;
                for (int n = 0; n < x.n(); ++n) {
                    const S* src = x.data.data() + x.index(n, c, 0, 0);
                    S* dst = out.data.data() + out.index(n, c, 0, 0);
                    for (size_t i = 0; i < plane; ++i) {
                        dst[i] = static_cast<S>(scale * static_cast<double>(src[i]) + shift);
                    }
                }
            });
        }
        count_flops(oc, 2ull * x.numel());
        return out;
    }

    // Consumes the cache left by the latest forward. In train mode gradients
    // flow through the batch statistics.
    void backward(TensorT<S>& x, const TensorT<S>& out_grad) {
        const int j = cache_.j;
        const size_t plane = static_cast<size_t>(x.h()) * x.w();
        const size_t cnt = static_cast<size_t>(x.n()) * plane;
        parallel_for(channels_, [&](int64_t ci) {
            const int c = static_cast<int>(ci);
            const double g = static_cast<double>(gamma_[j]->tensor.data[c]);
            const double inv_std = cache_.inv_std[c];
            if (cache_.mode == Mode::train) {
                double dbeta = 0.0, dgamma = 0.0, sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int n = 0; n < x.n(); ++n) {
                    const S* go = out_grad.data.data() + out_grad.index(n, c, 0, 0);
                    const S* xh = cache_.xhat.data.data() + cache_.xhat.index(n, c, 0, 0);
                    for (size_t i = 0; i < plane; ++i) {
                        dbeta += static_cast<double>(go[i]);
                        dgamma += static_cast<double>(go[i]) * static_cast<double>(xh[i]);
                        const double dxh = static_cast<double>(go[i]) * g;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * static_cast<double>(xh[i]);
                    }
                }
                gamma_[j]->tensor.grad[c] += static_cast<S>(dgamma);
                beta_[j]->tensor.grad[c] += static_cast<S>(dbeta);
                const double inv_cnt = 1.0 / static_cast<double>(cnt);
                for (int n = 0; n < x.n(); ++n) {
                    const S* go = out_grad.data.data() + out_grad.index(n, c, 0, 0);
                    const S* xh = cache_.xhat.data.data() + cache_.xhat.index(n, c, 0, 0);
                    S* gx = x.grad.data() + x.index(n, c, 0, 0);
                    for (size_t i = 0; i < plane; ++i) {
                        const double dxh = static_cast<double>(go[i]) * g;
                        gx[i] += static_cast<S>((dxh - sum_dxhat * inv_cnt -
                                                 static_cast<double>(xh[i]) * sum_dxhat_xhat *
                                                     inv_cnt) *
                                                inv_std);
                    }
                }
            } else {
                const double rm = static_cast<double>(running_mean_[j]->tensor.data[c]);
                double dbeta = 0.0, dgamma = 0.0;
                for (int n = 0; n < x.n(); ++n) {
                    const S* go = out_grad.data.data() + out_grad.index(n, c, 0, 0);
                    const S* src = x.data.data() + x.index(n, c, 0, 0);
                    S* gx = x.grad.data() + x.index(n, c, 0, 0);
                    for (size_t i = 0; i < plane; ++i) {
                        dbeta += static_cast<double>(go[i]);
                        dgamma += static_cast<double>(go[i]) *
                                  (static_cast<double>(src[i]) - rm) * inv_std;
                        gx[i] += static_cast<S>(static_cast<double>(go[i]) * g * inv_std);
                    }
                }
                gamma_[j]->tensor.grad[c] += static_cast<S>(dgamma);
                beta_[j]->tensor.grad[c] += static_cast<S>(dbeta);
            }
        });
    }

    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

private:
    void check_index(int j) const {
        DPNET_CHECK(j >= 0 && j < copies_, name_, ": copy index ", j, " out of range [0, ",
                    copies_, ")");
    }

    struct Cache {
        int j = 0;
        Mode mode = Mode::eval;
        TensorT<S> xhat;
        std::vector<double> inv_std;
    };

    std::string name_;
    int channels_;
    int copies_;
    std::vector<ParamT<S>*> gamma_;
    std::vector<ParamT<S>*> beta_;
    std::vector<BufferT<S>*> running_mean_;
    std::vector<BufferT<S>*> running_var_;
    Cache cache_;
};

using AnmLayer = AnmLayerT<float>;

}  // namespace dpnet
