#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "dpnet/boxes.hpp"
#include "dpnet/layers.hpp"

namespace dpnet {

struct HeadConfig {
    int in_channels = 64;
    int num_classes = 3;
    int tower_convs = 2;
};

template <typename S>
struct HeadOutT {
    TensorT<S> cls_logits;  // N x C x h x w
    TensorT<S> box_logits;  // N x 4 x h x w, log-space distances
    TensorT<S> box_deltas;  // exp(box_logits), strictly positive
};

using HeadOut = HeadOutT<float>;

// Anchor-free dense head: a classification tower and a regression tower
// (conv+norm+relu each), closed by 1x1 convs. Box outputs pass through exp so
// decoded distances are positive; losses act on the log-space values.
template <typename S>
class HeadT {
public:
    HeadT(ParamRegistryT<S>& reg, const HeadConfig& cfg, int norm_copies, RngState& rng)
        : cfg_(cfg) {
        for (int t = 0; t < cfg.tower_convs; ++t) {
            cls_tower_.push_back(std::make_unique<ConvUnitT<S>>(
                reg, format_msg("head.cls.t", t), cfg.in_channels, cfg.in_channels, 3, 1,
                norm_copies, rng));
            reg_tower_.push_back(std::make_unique<ConvUnitT<S>>(
                reg, format_msg("head.reg.t", t), cfg.in_channels, cfg.in_channels, 3, 1,
                norm_copies, rng));
        }
        cls_w_ = reg.add_param("head.cls.out.w", cfg.num_classes, cfg.in_channels, 1, 1);
        cls_w_->tensor.fill_normal(rng, std::sqrt(1.0 / cfg.in_channels));
        cls_b_ = reg.add_param("head.cls.out.b", 1, cfg.num_classes, 1, 1);
        // start near-background so early training is not swamped by negatives
        cls_b_->tensor.fill(static_cast<S>(-std::log((1.0 - 0.01) / 0.01)));
        reg_w_ = reg.add_param("head.reg.out.w", 4, cfg.in_channels, 1, 1);
        reg_w_->tensor.fill_normal(rng, std::sqrt(1.0 / cfg.in_channels));
        reg_b_ = reg.add_param("head.reg.out.b", 1, 4, 1, 1);
    }

    const HeadConfig& config() const { return cfg_; }

    HeadOutT<S> forward(const TensorT<S>& f_out, int j, Mode mode, OpCounter* oc = nullptr) {
        DPNET_CHECK(f_out.c() == cfg_.in_channels, "head: expected ", cfg_.in_channels,
                    " channels, got ", f_out.c());
        TensorT<S> c = f_out;
        for (auto& u : cls_tower_) c = u->forward(std::move(c), j, mode, oc);
        TensorT<S> r = f_out;
        for (auto& u : reg_tower_) r = u->forward(std::move(r), j, mode, oc);

        HeadOutT<S> out;
        out.cls_logits = conv2d(c, cls_w_->tensor, cls_b_->tensor, 1, 0, oc);
        out.box_logits = conv2d(r, reg_w_->tensor, reg_b_->tensor, 1, 0, oc);
        out.box_deltas = out.box_logits;
        for (auto& v : out.box_deltas.data) v = std::exp(v);
        count_flops(oc, out.box_deltas.numel());  // exp, counted as an activation
        if (mode == Mode::train) {
            cls_feat_ = std::move(c);
            cls_feat_.zero_grad();
            reg_feat_ = std::move(r);
            reg_feat_.zero_grad();
        }
        return out;
    }

    // Returns d(loss)/d(f_out) given gradients on the two logit maps.
    TensorT<S> backward(const TensorT<S>& d_cls_logits, const TensorT<S>& d_box_logits) {
        conv2d_backward(cls_feat_, cls_w_->tensor, cls_b_->tensor, d_cls_logits, 1, 0);
        conv2d_backward(reg_feat_, reg_w_->tensor, reg_b_->tensor, d_box_logits, 1, 0);
        TensorT<S> gc = cls_feat_;
        gc.data.swap(gc.grad);
        for (auto it = cls_tower_.rbegin(); it != cls_tower_.rend(); ++it)
            gc = (*it)->backward(gc);
        TensorT<S> gr = reg_feat_;
        gr.data.swap(gr.grad);
        for (auto it = reg_tower_.rbegin(); it != reg_tower_.rend(); ++it)
            gr = (*it)->backward(gr);
        for (size_t i = 0; i < gc.numel(); ++i) gc.data[i] += gr.data[i];
        return gc;
    }

    void release_cache() {
        for (auto& u : cls_tower_) u->release_cache();
        for (auto& u : reg_tower_) u->release_cache();
        cls_feat_ = TensorT<S>();
        reg_feat_ = TensorT<S>();
    }

    uint64_t flops(int h, int w) const {
        uint64_t f = 0;
        for (int t = 0; t < cfg_.tower_convs; ++t) {
            f += 2ull * ConvUnitT<S>::flops(cfg_.in_channels, cfg_.in_channels, h, w, 3, 1);
        }
        const uint64_t plane = static_cast<uint64_t>(h) * w;
        f += 2ull * cfg_.in_channels * cfg_.num_classes * plane + cfg_.num_classes * plane;
        f += 2ull * cfg_.in_channels * 4 * plane + 4 * plane;
        f += 4ull * plane;  // exp on the deltas
        return f;
    }

private:
    HeadConfig cfg_;
    std::vector<std::unique_ptr<ConvUnitT<S>>> cls_tower_;
    std::vector<std::unique_ptr<ConvUnitT<S>>> reg_tower_;
    ParamT<S>* cls_w_;
    ParamT<S>* cls_b_;
    ParamT<S>* reg_w_;
    ParamT<S>* reg_b_;
    TensorT<S> cls_feat_, reg_feat_;
};

using Head = HeadT<float>;

// ---------------------------------------------------------------------------
// Target assignment: a cell is positive iff its center falls strictly inside
// at least one ground-truth box, ties going to the smallest box area. The
// regression target is the four center-to-side distances in stride units.
// ---------------------------------------------------------------------------
struct Assignment {
    int h = 0, w = 0;
    int num_pos = 0;
    std::vector<int> target_class;               // -1 for background
    std::vector<std::array<double, 4>> targets;  // (l,t,r,b)/stride for positives
};

inline Assignment assign_targets(int h, int w, double stride_y, double stride_x,
                                 const GtAnnotation& gts) {
    Assignment out;
    out.h = h;
    out.w = w;
    out.target_class.assign(static_cast<size_t>(h) * w, -1);
    out.targets.assign(static_cast<size_t>(h) * w, {0, 0, 0, 0});
    for (int cy = 0; cy < h; ++cy) {
        for (int cx = 0; cx < w; ++cx) {
            const double px = (cx + 0.5) * stride_x;
            const double py = (cy + 0.5) * stride_y;
            int best = -1;
            double best_area = 0.0;
            for (size_t g = 0; g < gts.size(); ++g) {
                if (!gts.boxes[g].contains(px, py)) continue;
                const double area = gts.boxes[g].area();
                if (best < 0 || area < best_area) {
                    best = static_cast<int>(g);
                    best_area = area;
                }
            }
            if (best < 0) continue;
            const size_t cell = static_cast<size_t>(cy) * w + cx;
            const Box& bb = gts.boxes[best];
            out.target_class[cell] = gts.labels[best];
            out.targets[cell] = {(px - bb.x1) / stride_x, (py - bb.y1) / stride_y,
                                 (bb.x2 - px) / stride_x, (bb.y2 - py) / stride_y};
            ++out.num_pos;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Detection loss: per-cell multi-label BCE on class logits averaged over
// cells, plus mean smooth L1 (beta = 1/9) between the box logits and the
// log-space targets of positive cells. total = cls + alpha * reg.
// ---------------------------------------------------------------------------
struct DetectionLoss {
    double cls = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

constexpr double kRegBeta = 1.0 / 9.0;
// Floor on stride-normalized distances before the log; keeps targets finite
// for centers arbitrarily close to a box edge.
constexpr double kMinDelta = 1e-4;

template <typename S>
DetectionLoss detection_loss(const HeadOutT<S>& out, const std::vector<Assignment>& per_image,
                             double alpha, TensorT<S>* d_cls = nullptr,
                             TensorT<S>* d_box = nullptr) {
    const int n = out.cls_logits.n();
    const int ncls = out.cls_logits.c();
    const int h = out.cls_logits.h(), w = out.cls_logits.w();
    DPNET_CHECK(static_cast<size_t>(n) == per_image.size(),
                "detection_loss: got ", per_image.size(), " assignments for batch of ", n);
    const size_t cells = static_cast<size_t>(h) * w;
    for (const Assignment& a : per_image) {
        DPNET_CHECK(a.h == h && a.w == w, "detection_loss: assignment grid ", a.h, "x", a.w,
                    " does not match head output ", h, "x", w);
    }

    if (d_cls) {
        d_cls->resize(n, ncls, h, w);
        d_box->resize(n, 4, h, w);
    }

    // classification: sum BCE over classes per cell, mean over all cells
    double cls_loss = 0.0;
    const double inv_cells = 1.0 / static_cast<double>(cells * n);
    std::vector<S> reg_pred, reg_target;
    for (int img = 0; img < n; ++img) {
        const Assignment& asg = per_image[img];
        for (size_t cell = 0; cell < cells; ++cell) {
            const int tc = asg.target_class[cell];
            for (int c = 0; c < ncls; ++c) {
                const double z = out.cls_logits.data[out.cls_logits.index(
                    img, c, static_cast<int>(cell) / w, static_cast<int>(cell) % w)];
                const double y = (tc == c) ? 1.0 : 0.0;
                cls_loss += std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * y;
                if (d_cls) {
                    d_cls->data[d_cls->index(img, c, static_cast<int>(cell) / w,
                                             static_cast<int>(cell) % w)] =
                        static_cast<S>((1.0 / (1.0 + std::exp(-z)) - y) * inv_cells);
                }
            }
            if (tc >= 0) {
                for (int k = 0; k < 4; ++k) {
                    reg_pred.push_back(out.box_logits.data[out.box_logits.index(
                        img, k, static_cast<int>(cell) / w, static_cast<int>(cell) % w)]);
                    reg_target.push_back(static_cast<S>(
                        std::log(std::max(asg.targets[cell][k], kMinDelta))));
                }
            }
        }
    }
    cls_loss *= inv_cells;

    std::vector<S> dreg;
    const double reg_loss = smooth_l1(reg_pred, reg_target, kRegBeta, d_box ? &dreg : nullptr);
    if (d_box) {
        size_t pi = 0;
        for (int img = 0; img < n; ++img) {
            const Assignment& asg = per_image[img];
            for (size_t cell = 0; cell < cells; ++cell) {
                if (asg.target_class[cell] < 0) continue;
                for (int k = 0; k < 4; ++k) {
                    d_box->data[d_box->index(img, k, static_cast<int>(cell) / w,
                                             static_cast<int>(cell) % w)] =
                        static_cast<S>(alpha * dreg[pi++]);
                }
            }
        }
    }

    DetectionLoss dl;
    dl.cls = cls_loss;
    dl.reg = reg_loss;
    dl.total = cls_loss + alpha * reg_loss;
    return dl;
}

// ---------------------------------------------------------------------------
// Decode: sigmoid scores, threshold, distances to box corners, clip to the
// image, class-wise NMS, top max_dets by score.
// ---------------------------------------------------------------------------
struct DecodeConfig {
    double score_thr = 0.05;
    double nms_thr = 0.5;
    int max_dets = 100;
};

template <typename S>
std::vector<Detection> decode(const HeadOutT<S>& out, int img, double stride_y, double stride_x,
                              int image_h, int image_w, const DecodeConfig& cfg = {}) {
    DPNET_CHECK(cfg.score_thr > 0.0 && cfg.score_thr < 1.0 && cfg.nms_thr > 0.0 &&
                    cfg.nms_thr < 1.0,
                "decode: thresholds must be in (0,1)");
    const int ncls = out.cls_logits.c();
    const int h = out.cls_logits.h(), w = out.cls_logits.w();
    std::vector<Detection> dets;
    for (int cy = 0; cy < h; ++cy) {
        for (int cx = 0; cx < w; ++cx) {
            const double px = (cx + 0.5) * stride_x;
            const double py = (cy + 0.5) * stride_y;
            for (int c = 0; c < ncls; ++c) {
                const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(
                                                out.cls_logits.at(img, c, cy, cx))));
                if (score < cfg.score_thr) continue;
                Detection d;
                d.score = score;
                d.cls = c;
                d.cell = cy * w + cx;
                d.box.x1 = std::max(0.0, px - out.box_deltas.at(img, 0, cy, cx) * stride_x);
                d.box.y1 = std::max(0.0, py - out.box_deltas.at(img, 1, cy, cx) * stride_y);
                d.box.x2 = std::min(static_cast<double>(image_w),
                                    px + out.box_deltas.at(img, 2, cy, cx) * stride_x);
                d.box.y2 = std::min(static_cast<double>(image_h),
                                    py + out.box_deltas.at(img, 3, cy, cx) * stride_y);
                dets.push_back(d);
            }
        }
    }
    dets = nms(std::move(dets), cfg.nms_thr);
    if (static_cast<int>(dets.size()) > cfg.max_dets) dets.resize(cfg.max_dets);
    return dets;
}

}  // namespace dpnet
