#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "dpnet/head.hpp"
#include "dpnet/layers.hpp"

namespace dpnet {

// Probabilities over the df candidates, one independent sigmoid per entry
// (multi-label form), plus the argmax with lowest-index tie-break.
struct DfDistribution {
    std::vector<double> p;
    int argmax = 0;
};

inline int select_df(const DfDistribution& d) {
    DPNET_CHECK(!d.p.empty(), "select_df: empty distribution");
    int best = 0;
    for (int j = 1; j < static_cast<int>(d.p.size()); ++j) {
        if (d.p[j] > d.p[best]) best = j;
    }
    return best;
}

// Regression target of the statistic branch: log1p of object count and of the
// mean/min/max object size, size = sqrt(w*h) in input pixels. All zeros for
// an empty image.
struct StatTarget {
    std::array<double, 4> v{0, 0, 0, 0};
};

inline StatTarget statistic_target(const GtAnnotation& gts, int image_h, int image_w) {
    StatTarget t;
    if (gts.size() == 0) return t;
    double mn = 1e30, mx = 0.0, sum = 0.0;
    for (const Box& b : gts.boxes) {
        DPNET_CHECK(b.x1 >= 0 && b.y1 >= 0 && b.x2 <= image_w && b.y2 <= image_h,
                    "statistic_target: box outside image");
        const double size = std::sqrt(b.area());
        mn = std::min(mn, size);
        mx = std::max(mx, size);
        sum += size;
    }
    t.v = {std::log1p(static_cast<double>(gts.size())), std::log1p(sum / gts.size()),
           std::log1p(mn), std::log1p(mx)};
    return t;
}

// y_j = 1 iff L^(j) / min_k L^(k) <= T.
inline std::vector<int> df_labels(const std::vector<double>& losses, double T) {
    DPNET_CHECK(T >= 1.0, "df_labels: T must be >= 1, got ", T);
    DPNET_CHECK(!losses.empty(), "df_labels: empty loss vector");
    double mn = 1e300;
    for (double l : losses) {
        DPNET_CHECK(std::isfinite(l) && l > 0.0, "df_labels: losses must be finite and > 0, got ",
                    l);
        mn = std::min(mn, l);
    }
    std::vector<int> y(losses.size());
    for (size_t j = 0; j < losses.size(); ++j) y[j] = (losses[j] / mn <= T) ? 1 : 0;
    return y;
}

// Per-image labeling artifact: the guidance loss at every df candidate plus
// the thresholded labels. Serialized one-per-line in the label cache.
struct GuidanceLossRecord {
    int image_id = 0;
    std::vector<double> losses;
    std::vector<int> labels;
    double threshold = 1.1;
};

// L_P = L_sta + lambda * L_df  (statistic smooth L1 plus df classification BCE).
inline double dfp_loss(const std::vector<double>& p, const std::array<double, 4>& v_hat,
                       const std::vector<int>& labels, const std::array<double, 4>& v,
                       double lambda) {
    DPNET_CHECK(p.size() == labels.size(), "dfp_loss: p/labels length mismatch");
    DPNET_CHECK(lambda >= 0.0, "dfp_loss: lambda must be >= 0");
    std::vector<double> pv(p.begin(), p.end());
    std::vector<double> yv(labels.begin(), labels.end());
    std::vector<double> vh(v_hat.begin(), v_hat.end());
    std::vector<double> vt(v.begin(), v.end());
    return smooth_l1(vh, vt, kRegBeta) + lambda * bce_loss(pv, yv);
}

// Batched training form of the DFP objective, evaluated on logits so the
// gradient of the classification term is sigmoid(z) - y. Losses and gradients
// are averaged over the batch.
template <typename S>
double dfp_loss_batch(const TensorT<S>& df_logits, const TensorT<S>& v_hat,
                      const std::vector<std::vector<int>>& labels,
                      const std::vector<std::array<double, 4>>& targets, double lambda,
                      TensorT<S>* d_logits = nullptr, TensorT<S>* d_vhat = nullptr) {
    const int n = df_logits.n();
    const int m = df_logits.c();
    DPNET_CHECK(labels.size() == static_cast<size_t>(n) && targets.size() == labels.size(),
                "dfp_loss_batch: batch size mismatch");
    if (d_logits) {
        d_logits->resize(n, m, 1, 1);
        d_vhat->resize(n, 4, 1, 1);
    }
    const double inv_n = 1.0 / std::max(1, n);
    double total = 0.0;
    for (int img = 0; img < n; ++img) {
        std::vector<S> z(m), y(m);
        for (int j = 0; j < m; ++j) {
            z[j] = df_logits.at(img, j, 0, 0);
            y[j] = static_cast<S>(labels[img][j]);
        }
        std::vector<S> dz;
        total += lambda * bce_with_logits(z, y, d_logits ? &dz : nullptr) * inv_n;
        if (d_logits) {
            for (int j = 0; j < m; ++j) {
                d_logits->at(img, j, 0, 0) = static_cast<S>(lambda * dz[j] * inv_n);
            }
        }
        std::vector<S> vh(4), vt(4);
        for (int k = 0; k < 4; ++k) {
            vh[k] = v_hat.at(img, k, 0, 0);
            vt[k] = static_cast<S>(targets[img][k]);
        }
        std::vector<S> dv;
        total += smooth_l1(vh, vt, kRegBeta, d_vhat ? &dv : nullptr) * inv_n;
        if (d_vhat) {
            for (int k = 0; k < 4; ++k) {
                d_vhat->at(img, k, 0, 0) = static_cast<S>(dv[k] * inv_n);
            }
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Guidance loss: measures how well a frozen detector served one image at one
// df, from its decoded detections.
//   pos  = detections with IoU >= 0.5 against some ground-truth box
//   neg  = the rest, suppressed by NMS and sorted by score
//   keep the best-IoU positive per ground truth, then the top-k negatives
//   L = sum of per-detection multi-label BCE (positives against their matched
//       class, negatives against all-background) + mean smooth L1 over the
//       kept positives' log-space box targets + a fixed -log(1e-7) penalty
//       per ground truth no positive overlaps at all.
// The miss penalty keeps an empty detection set from scoring well.
// ---------------------------------------------------------------------------
struct GuidanceConfig {
    double pos_iou = 0.5;
    double nms_thr = 0.5;
};

template <typename S>
double guidance_loss_from_detections(const std::vector<Detection>& dets,
                                     const HeadOutT<S>& out, int img,
                                     const GtAnnotation& gts, double stride_y, double stride_x,
                                     const GuidanceConfig& cfg = {}) {
    DPNET_CHECK(gts.size() > 0, "guidance_loss: image has no ground truth");
    const int ncls = out.cls_logits.c();
    const int w = out.cls_logits.w();

    std::vector<Detection> pos, neg;
    for (const Detection& d : dets) {
        double best = 0.0;
        for (const Box& g : gts.boxes) best = std::max(best, iou(d.box, g));
        (best >= cfg.pos_iou ? pos : neg).push_back(d);
    }
    neg = nms(std::move(neg), cfg.nms_thr);
    std::sort(neg.begin(), neg.end(), detection_order);

    // per ground truth, the single best-overlapping positive (union semantics:
    // one detection can serve several ground truths but is kept once, with the
    // class of its highest-IoU selector)
    std::map<int, std::pair<int, double>> kept;  // det index -> (gt index, iou)
    int missed = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
        int best_det = -1;
        double best_iou = 0.0;
        for (size_t d = 0; d < pos.size(); ++d) {
            const double v = iou(pos[d].box, gts.boxes[g]);
            if (v > best_iou) {
                best_iou = v;
                best_det = static_cast<int>(d);
            }
        }
        if (best_det < 0) {
            ++missed;
            continue;
        }
        auto it = kept.find(best_det);
        if (it == kept.end() || best_iou > it->second.second) {
            kept[best_det] = {static_cast<int>(g), best_iou};
        }
    }

    const int k = static_cast<int>(kept.size());
    if (static_cast<int>(neg.size()) > k) neg.resize(k);

    double cls_loss = 0.0;
    std::vector<S> reg_pred, reg_target;
    for (const auto& [det_idx, match] : kept) {
        const Detection& d = pos[det_idx];
        const int gt_idx = match.first;
        std::vector<S> probs(ncls), y(ncls, S(0));
        for (int c = 0; c < ncls; ++c) {
            probs[c] = sigmoid_scalar(
                out.cls_logits.at(img, c, d.cell / w, d.cell % w));
        }
        y[gts.labels[gt_idx]] = S(1);
        cls_loss += bce_loss(probs, y);

        const Box& gb = gts.boxes[gt_idx];
        const double px = (d.cell % w + 0.5) * stride_x;
        const double py = (d.cell / w + 0.5) * stride_y;
        const double t[4] = {(px - gb.x1) / stride_x, (py - gb.y1) / stride_y,
                             (gb.x2 - px) / stride_x, (gb.y2 - py) / stride_y};
        for (int kk = 0; kk < 4; ++kk) {
            reg_pred.push_back(out.box_logits.at(img, kk, d.cell / w, d.cell % w));
            reg_target.push_back(static_cast<S>(std::log(std::max(t[kk], kMinDelta))));
        }
    }
    for (const Detection& d : neg) {
        std::vector<S> probs(ncls), y(ncls, S(0));
        for (int c = 0; c < ncls; ++c) {
            probs[c] = sigmoid_scalar(
                out.cls_logits.at(img, c, d.cell / w, d.cell % w));
        }
        cls_loss += bce_loss(probs, y);
    }

    const double reg_loss = smooth_l1(reg_pred, reg_target, kRegBeta);
    const double miss_loss = -std::log(kProbClamp) * missed;
    return cls_loss + reg_loss + miss_loss;
}

// ---------------------------------------------------------------------------
// The down-sampling factor predictor. Entry 2x2 average pool, then four basic
// blocks of two conv+norm+relu units (first conv of each block stride 2,
// plain single-copy normalization since the DFP runs before a df is chosen),
// global average pooling, and two fully-connected heads: m df logits and the
// 4-value statistic estimate. The df-head bias starts at zero so a fresh
// predictor emits p = 0.5 everywhere.
// ---------------------------------------------------------------------------
struct DfpConfig {
    std::vector<int> channels = {8, 16, 32, 32};
};

template <typename S>
struct DfpOutT {
    DfDistribution dist;
    TensorT<S> df_logits;  // N x m x 1 x 1
    TensorT<S> v_hat;      // N x 4 x 1 x 1
};

template <typename S>
class DfpNetT {
public:
    DfpNetT(ParamRegistryT<S>& reg, const DfpConfig& cfg, int in_channels, int m, RngState& rng)
        : cfg_(cfg), in_channels_(in_channels), m_(m) {
        DPNET_CHECK(cfg.channels.size() == 4, "dfp: expected 4 blocks, got ",
                    cfg.channels.size());
        int c = in_channels;
        for (int b = 0; b < 4; ++b) {
            const int cout = cfg.channels[b];
            units_.push_back(std::make_unique<ConvUnitT<S>>(
                reg, format_msg("dfp.b", b, ".c1"), c, cout, 3, 2, 1, rng,
                /*input_grad=*/b != 0));
            units_.push_back(std::make_unique<ConvUnitT<S>>(reg, format_msg("dfp.b", b, ".c2"),
                                                            cout, cout, 3, 1, 1, rng));
            c = cout;
        }
        df_w_ = reg.add_param("dfp.df.w", m, c, 1, 1);
        df_w_->tensor.fill_normal(rng, std::sqrt(1.0 / c));
        df_b_ = reg.add_param("dfp.df.b", 1, m, 1, 1);
        stat_w_ = reg.add_param("dfp.stat.w", 4, c, 1, 1);
        stat_w_->tensor.fill_normal(rng, std::sqrt(1.0 / c));
        stat_b_ = reg.add_param("dfp.stat.b", 1, 4, 1, 1);
    }

    int num_candidates() const { return m_; }

    DfpOutT<S> forward(const TensorT<S>& f1, Mode mode, OpCounter* oc = nullptr) {
        DPNET_CHECK(f1.c() == in_channels_, "dfp: expected ", in_channels_, " channels, got ",
                    f1.c());
        TensorT<S> x = avg_pool2(f1, oc);
        for (auto& u : units_) x = u->forward(std::move(x), 0, mode, oc);
        TensorT<S> pooled = global_avg_pool(x, oc);
        DfpOutT<S> out;
        out.df_logits = fully_connected(pooled, df_w_->tensor, df_b_->tensor, oc);
        out.v_hat = fully_connected(pooled, stat_w_->tensor, stat_b_->tensor, oc);
        out.dist.p.resize(m_);
        for (int j = 0; j < m_; ++j) {
            out.dist.p[j] = 1.0 / (1.0 + std::exp(-static_cast<double>(
                                       out.df_logits.at(0, j, 0, 0))));
        }
        out.dist.argmax = select_df(out.dist);
        if (mode == Mode::train) {
            gap_in_ = std::move(x);
            gap_in_.zero_grad();
            pooled_ = std::move(pooled);
            pooled_.zero_grad();
        }
        return out;
    }

    // Accumulates parameter gradients; gradients stop at f1.
    void backward(const TensorT<S>& d_df_logits, const TensorT<S>& d_vhat) {
        fully_connected_backward(pooled_, df_w_->tensor, df_b_->tensor, d_df_logits);
        fully_connected_backward(pooled_, stat_w_->tensor, stat_b_->tensor, d_vhat);
        TensorT<S> pg = pooled_;
        pg.data.swap(pg.grad);
        global_avg_pool_backward(gap_in_, pg);
        TensorT<S> g = gap_in_;
        g.data.swap(g.grad);
        for (auto it = units_.rbegin(); it != units_.rend(); ++it) g = (*it)->backward(g);
    }

    void release_cache() {
        for (auto& u : units_) u->release_cache();
        gap_in_ = TensorT<S>();
        pooled_ = TensorT<S>();
    }

    // Closed-form forward flops for one image with an (h, w) pre-dynamic
    // feature map; matches the OpCounter conventions.
    uint64_t flops(int h, int w) const {
        uint64_t f = 0;
        int ph = h / 2, pw = w / 2;
        f += 4ull * in_channels_ * ph * pw;  // entry pool
        int c = in_channels_;
        for (int b = 0; b < 4; ++b) {
            const int cout = cfg_.channels[b];
            f += ConvUnitT<S>::flops(c, cout, ph, pw, 3, 2);
            ph = conv_out_dim(ph, 3, 2, 1);
            pw = conv_out_dim(pw, 3, 2, 1);
            f += ConvUnitT<S>::flops(cout, cout, ph, pw, 3, 1);
            c = cout;
        }
        f += static_cast<uint64_t>(c) * ph * pw + c;            // global average pool
        f += 2ull * c * m_ + m_;                                // df head
        f += 2ull * c * 4 + 4;                                  // statistic head
        return f;
    }

private:
    DfpConfig cfg_;
    int in_channels_;
    int m_;
    std::vector<std::unique_ptr<ConvUnitT<S>>> units_;
    ParamT<S>* df_w_;
    ParamT<S>* df_b_;
    ParamT<S>* stat_w_;
    ParamT<S>* stat_b_;
    TensorT<S> gap_in_, pooled_;
};

using DfpNet = DfpNetT<float>;

}  // namespace dpnet
