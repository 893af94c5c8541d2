#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dpnet/layers.hpp"

namespace dpnet {

struct BackboneConfig {
    int stem_channels = 16;
    std::vector<int> stage_channels = {16, 32, 64};
    int blocks_per_stage = 2;
    std::vector<Rational> df_candidates = {{1, 2}, {1, 3}, {1, 4}};
    // Ablation switch: a single normalization copy shared by every df.
    bool shared_norm = false;

    int m() const { return static_cast<int>(df_candidates.size()); }

    void validate() const {
        DPNET_CHECK(stem_channels > 0 && blocks_per_stage > 0, "backbone: bad channel/block config");
        DPNET_CHECK(stage_channels.size() == 3, "backbone: expected 3 stages, got ",
                    stage_channels.size());
        DPNET_CHECK(df_candidates.size() >= 2, "backbone: need at least 2 df candidates");
        double prev = 1.0 + 1e-12;
        for (const Rational& df : df_candidates) {
            DPNET_CHECK(df.num > 0 && df.den > 0 && df.num <= df.den,
                        "backbone: df candidate outside (0, 1]");
            DPNET_CHECK(df.value() < prev, "backbone: df candidates must be strictly decreasing");
            prev = df.value();
        }
    }
};

template <typename S>
struct BackboneOutputT {
    TensorT<S> f1;     // pre-dynamic feature map, the DFP input
    TensorT<S> f_out;  // head input
    int applied_df_index = 0;
    double stride_y = 0.0;  // input pixels per f_out cell
    double stride_x = 0.0;
};

using BackboneOutput = BackboneOutputT<float>;

// Staged backbone with one dynamic down-sampling point:
//   stem(/2) -> stage1 -> bilinear resize by df -> stage2 -> reduce(/2) -> stage3
// All normalization layers hold one private copy per df candidate (unless
// shared_norm) and a forward at index j switches every one of them to copy j.
template <typename S>
class BackboneT {
public:
    BackboneT(ParamRegistryT<S>& reg, const BackboneConfig& cfg, RngState& rng)
        : cfg_(cfg) {
        cfg_.validate();
        const int copies = cfg_.shared_norm ? 1 : cfg_.m();
        stem_ = std::make_unique<ConvUnitT<S>>(reg, "backbone.stem", 3, cfg_.stem_channels, 3, 2,
                                               copies, rng, /*input_grad=*/false);
        int c = cfg_.stem_channels;
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            stage1_.push_back(std::make_unique<ResidualBlockT<S>>(
                reg, format_msg("backbone.s1.b", b), c, cfg_.stage_channels[0], copies, rng));
            c = cfg_.stage_channels[0];
        }
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            stage2_.push_back(std::make_unique<ResidualBlockT<S>>(
                reg, format_msg("backbone.s2.b", b), c, cfg_.stage_channels[1], copies, rng));
            c = cfg_.stage_channels[1];
        }
        reduce_ = std::make_unique<ConvUnitT<S>>(reg, "backbone.reduce", c,
                                                 cfg_.stage_channels[2], 3, 2, copies, rng);
        c = cfg_.stage_channels[2];
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            stage3_.push_back(std::make_unique<ResidualBlockT<S>>(
                reg, format_msg("backbone.s3.b", b), c, cfg_.stage_channels[2], copies, rng));
        }
    }

    const BackboneConfig& config() const { return cfg_; }
    int out_channels() const { return cfg_.stage_channels[2]; }

    static int min_input_side() { return 32; }

    BackboneOutputT<S> forward(const TensorT<S>& image, int j, Mode mode,
                               OpCounter* oc = nullptr) {
        DPNET_CHECK(image.c() == 3, "backbone: expected 3-channel input, got ", image.c());
        DPNET_CHECK(image.h() >= min_input_side() && image.w() >= min_input_side(),
                    "backbone: input ", image.shape_str(), " below minimum side ",
                    min_input_side());
        DPNET_CHECK(j >= 0 && j < cfg_.m(), "backbone: df index ", j, " out of range [0, ",
                    cfg_.m(), ")");
        BackboneOutputT<S> out;
        out.applied_df_index = j;

        TensorT<S> x = stem_->forward(image, j, mode, oc);
        for (auto& blk : stage1_) x = blk->forward(x, j, mode, oc);
        out.f1 = x;

        resize_in_shape_ = x.shape;
        TensorT<S> y = bilinear_resize(x, cfg_.df_candidates[j], oc);
        for (auto& blk : stage2_) y = blk->forward(y, j, mode, oc);
        y = reduce_->forward(std::move(y), j, mode, oc);
        for (auto& blk : stage3_) y = blk->forward(y, j, mode, oc);

        out.stride_y = static_cast<double>(image.h()) / y.h();
        out.stride_x = static_cast<double>(image.w()) / y.w();
        out.f_out = std::move(y);
        return out;
    }

    // Stem and stage-1 only: the pre-dynamic feature map the DFP consumes.
    // The DFP runs before a df is chosen, so this pass pins normalization
    // copy j (copy 0 by convention at inference time).
    TensorT<S> forward_f1(const TensorT<S>& image, int j, Mode mode, OpCounter* oc = nullptr) {
        TensorT<S> x = stem_->forward(image, j, mode, oc);
        for (auto& blk : stage1_) x = blk->forward(x, j, mode, oc);
        return x;
    }

    // Propagates d(loss)/d(f_out) back through the cached training forward.
    // Gradients w.r.t. the input image are not produced.
    void backward(const TensorT<S>& f_out_grad, int j) {
        TensorT<S> g = f_out_grad;
        for (auto it = stage3_.rbegin(); it != stage3_.rend(); ++it) g = (*it)->backward(g);
        g = reduce_->backward(g);
        for (auto it = stage2_.rbegin(); it != stage2_.rend(); ++it) g = (*it)->backward(g);

        TensorT<S> pre(resize_in_shape_[0], resize_in_shape_[1], resize_in_shape_[2],
                       resize_in_shape_[3]);
        bilinear_resize_backward(pre, g, cfg_.df_candidates[j]);
        TensorT<S> g1 = pre;
        g1.data.swap(g1.grad);

        for (auto it = stage1_.rbegin(); it != stage1_.rend(); ++it) g1 = (*it)->backward(g1);
        stem_->backward(g1);
    }

    void release_cache() {
        stem_->release_cache();
        for (auto& b : stage1_) b->release_cache();
        for (auto& b : stage2_) b->release_cache();
        reduce_->release_cache();
        for (auto& b : stage3_) b->release_cache();
    }

    // Spatial dims of f1 and f_out for a given input, by the same arithmetic
    // the layers use.
    struct ShapeWalk {
        int f1_h, f1_w;
        int out_h, out_w;
    };
    ShapeWalk walk_shapes(int h, int w, int j) const {
        const int sh = conv_out_dim(h, 3, 2, 1), sw = conv_out_dim(w, 3, 2, 1);
        const Rational df = cfg_.df_candidates[j];
        const int rh = df.scale_dim(sh), rw = df.scale_dim(sw);
        const int oh = conv_out_dim(rh, 3, 2, 1), ow = conv_out_dim(rw, 3, 2, 1);
        return {sh, sw, oh, ow};
    }

    // Closed-form forward flops for one image, matching the OpCounter
    // conventions op for op.
    uint64_t flops(int h, int w, int j) const {
        DPNET_CHECK(j >= 0 && j < cfg_.m(), "backbone_flops: bad df index ", j);
        uint64_t f = 0;
        const int sh = conv_out_dim(h, 3, 2, 1), sw = conv_out_dim(w, 3, 2, 1);
        f += ConvUnitT<S>::flops(3, cfg_.stem_channels, h, w, 3, 2);
        int c = cfg_.stem_channels;
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            f += ResidualBlockT<S>::flops(c, cfg_.stage_channels[0], sh, sw);
            c = cfg_.stage_channels[0];
        }
        const Rational df = cfg_.df_candidates[j];
        const int rh = df.scale_dim(sh), rw = df.scale_dim(sw);
        f += 8ull * c * rh * rw;  // bilinear resize
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            f += ResidualBlockT<S>::flops(c, cfg_.stage_channels[1], rh, rw);
            c = cfg_.stage_channels[1];
        }
        f += ConvUnitT<S>::flops(c, cfg_.stage_channels[2], rh, rw, 3, 2);
        c = cfg_.stage_channels[2];
        const int oh = conv_out_dim(rh, 3, 2, 1), ow = conv_out_dim(rw, 3, 2, 1);
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            f += ResidualBlockT<S>::flops(c, c, oh, ow);
        }
        return f;
    }

private:
    BackboneConfig cfg_;
    std::unique_ptr<ConvUnitT<S>> stem_;
    std::vector<std::unique_ptr<ResidualBlockT<S>>> stage1_;
    std::vector<std::unique_ptr<ResidualBlockT<S>>> stage2_;
    std::unique_ptr<ConvUnitT<S>> reduce_;
    std::vector<std::unique_ptr<ResidualBlockT<S>>> stage3_;
    std::array<int, 4> resize_in_shape_{0, 0, 0, 0};
};

using Backbone = BackboneT<float>;

}  // namespace dpnet
