#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpnet/data.hpp"
#include "dpnet/model.hpp"

namespace dpnet {

// Size buckets by sqrt of box area, in input pixels.
enum class SizeBucketId { all = -1, tiny = 0, small = 1, other = 2 };

inline int size_bucket_of(const Box& b) {
    const double s = std::sqrt(b.area());
    if (s <= 16.0) return 0;
    if (s <= 32.0) return 1;
    return 2;
}

constexpr const char* kBucketNames[3] = {"tiny", "small", "other"};

// ---------------------------------------------------------------------------
// Average precision: greedy score-descending matching (each ground truth
// matched once, the highest-IoU eligible one wins), all-point interpolation
// (exact area under the precision envelope). Classes without ground truth
// are skipped; the result is the macro average, absent when no class has
// any ground truth.
//
// With a size bucket: out-of-bucket ground truths are "ignored" - detections
// matching them drop out of the curve instead of counting as false positives.
// ---------------------------------------------------------------------------
inline std::optional<double> average_precision(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const std::vector<GtAnnotation>& gts_per_image, double iou_thr, int num_classes,
    int bucket = -1) {
    DPNET_CHECK(dets_per_image.size() == gts_per_image.size(),
                "average_precision: image count mismatch");
    double ap_sum = 0.0;
    int classes_with_gt = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        int gt_count = 0;
        for (const auto& g : gts_per_image) {
            for (size_t k = 0; k < g.size(); ++k) {
                if (g.labels[k] == cls && (bucket < 0 || size_bucket_of(g.boxes[k]) == bucket)) {
                    ++gt_count;
                }
            }
        }
        if (gt_count == 0) continue;
        ++classes_with_gt;

        struct Entry {
            int image;
            const Detection* det;
        };
        std::vector<Entry> entries;
        for (size_t img = 0; img < dets_per_image.size(); ++img) {
            for (const Detection& d : dets_per_image[img]) {
                if (d.cls == cls) entries.push_back({static_cast<int>(img), &d});
            }
        }
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            if (a.det->score != b.det->score) return a.det->score > b.det->score;
            if (a.image != b.image) return a.image < b.image;
            return a.det->box.key() < b.det->box.key();
        });

        std::vector<std::vector<bool>> used(gts_per_image.size());
        for (size_t img = 0; img < gts_per_image.size(); ++img) {
            used[img].assign(gts_per_image[img].size(), false);
        }
        std::vector<int> flags;  // 1 = TP, 0 = FP, -1 = ignored
        for (const Entry& e : entries) {
            const GtAnnotation& g = gts_per_image[e.image];
            int best = -1;
            double best_iou = 0.0;
            for (size_t k = 0; k < g.size(); ++k) {
                if (g.labels[k] != cls || used[e.image][k]) continue;
                const double v = iou(e.det->box, g.boxes[k]);
                if (v >= iou_thr && v > best_iou) {
                    best_iou = v;
                    best = static_cast<int>(k);
                }
            }
            if (best < 0) {
                flags.push_back(0);
            } else {
                used[e.image][best] = true;
                flags.push_back(
                    (bucket < 0 || size_bucket_of(g.boxes[best]) == bucket) ? 1 : -1);
            }
        }

        // precision/recall curve over the kept detections
        std::vector<double> precision, recall;
        int tp = 0, fp = 0;
        for (int f : flags) {
            if (f < 0) continue;
            (f == 1 ? tp : fp) += 1;
            precision.push_back(static_cast<double>(tp) / (tp + fp));
            recall.push_back(static_cast<double>(tp) / gt_count);
        }
        double ap = 0.0;
        double env = 0.0;
        double prev_recall = recall.empty() ? 0.0 : recall.back();
        // walk right to left under the precision envelope
        for (size_t i = precision.size(); i-- > 0;) {
            env = std::max(env, precision[i]);
            const double r_lo = (i == 0) ? 0.0 : recall[i - 1];
            ap += env * (recall[i] - r_lo);
        }
        (void)prev_recall;
        ap_sum += ap;
    }
    if (classes_with_gt == 0) return std::nullopt;
    return ap_sum / classes_with_gt;
}

// Expected flops under a df selection histogram.
inline double weighted_flops(const std::vector<int64_t>& histogram,
                             const std::vector<uint64_t>& per_df_flops) {
    DPNET_CHECK(histogram.size() == per_df_flops.size(),
                "weighted_flops: histogram and flops lengths differ");
    int64_t total = 0;
    for (int64_t c : histogram) {
        DPNET_CHECK(c >= 0, "weighted_flops: negative count");
        total += c;
    }
    DPNET_CHECK(total > 0, "weighted_flops: all-zero histogram");
    double acc = 0.0;
    for (size_t j = 0; j < histogram.size(); ++j) {
        acc += (static_cast<double>(histogram[j]) / static_cast<double>(total)) *
               static_cast<double>(per_df_flops[j]);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Policy evaluation.
// ---------------------------------------------------------------------------
struct EvalPolicy {
    enum class Kind { dfp, fixed, permuted_random };
    Kind kind = Kind::dfp;
    int fixed_j = 0;
    uint64_t seed = 0;

    std::string name() const {
        switch (kind) {
            case Kind::dfp:
                return "dfp";
            case Kind::fixed:
                return format_msg("fixed_j", fixed_j);
            default:
                return format_msg("random_s", seed);
        }
    }
};

struct EvalReport {
    std::string policy;
    int num_images = 0;
    std::vector<double> iou_thresholds;
    std::vector<std::optional<double>> ap_by_thr;
    std::vector<std::array<std::optional<double>, 3>> ap_by_thr_bucket;
    std::optional<double> map;  // mean over thresholds of the all-size AP
    std::vector<int64_t> df_histogram;
    std::vector<int> selections;  // chosen df index per image, image order
    double weighted_gflops = 0.0;
    double fixed_half_gflops = 0.0;  // constant df = candidate 0
    double savings_vs_fixed_half_pct = 0.0;
    double dfp_gflops = 0.0;  // predictor cost, reported separately
    int avg_input_h = 0, avg_input_w = 0;
};

// Per-image df selections of the dfp policy, shared by the dfp and
// permuted-random evaluations.
inline std::vector<int> dfp_selections(const Dataset& val, Detector& det, DfpModel& dfp) {
    std::vector<int> sel(val.size());
    for (size_t i = 0; i < val.size(); ++i) {
        Tensor image = to_tensor(val, {static_cast<int>(i)});
        Tensor f1 = det.backbone().forward_f1(image, 0, Mode::eval);
        auto out = dfp.net().forward(f1, Mode::eval);
        sel[i] = out.dist.argmax;
    }
    return sel;
}

inline EvalReport evaluate(const Dataset& val, Detector& det, DfpModel* dfp,
                           const EvalPolicy& policy, const DecodeConfig& dc = {},
                           const std::vector<double>& thresholds = {0.25, 0.5, 0.75}) {
    DPNET_CHECK(val.size() > 0, "evaluate: empty dataset");
    const int m = det.num_candidates();

    std::vector<int> selections;
    switch (policy.kind) {
        case EvalPolicy::Kind::fixed:
            DPNET_CHECK(policy.fixed_j >= 0 && policy.fixed_j < m, "evaluate: fixed df index ",
                        policy.fixed_j, " out of range");
            selections.assign(val.size(), policy.fixed_j);
            break;
        case EvalPolicy::Kind::dfp:
            DPNET_CHECK(dfp != nullptr, "evaluate: dfp policy needs a predictor");
            selections = dfp_selections(val, det, *dfp);
            break;
        case EvalPolicy::Kind::permuted_random: {
            DPNET_CHECK(dfp != nullptr, "evaluate: permuted-random policy needs a predictor");
            selections = dfp_selections(val, det, *dfp);
            RngState rng(policy.seed);
            rng.shuffle(selections);
            break;
        }
    }

    EvalReport rep;
    rep.policy = policy.name();
    rep.num_images = static_cast<int>(val.size());
    rep.iou_thresholds = thresholds;
    rep.selections = selections;
    rep.df_histogram.assign(m, 0);

    std::vector<std::vector<Detection>> dets(val.size());
    double sum_h = 0.0, sum_w = 0.0;
    for (size_t i = 0; i < val.size(); ++i) {
        ++rep.df_histogram[selections[i]];
        Tensor image = to_tensor(val, {static_cast<int>(i)});
        auto fwd = det.forward(image, selections[i], Mode::eval);
        dets[i] = det.decode_image(fwd, 0, image.h(), image.w(), dc);
        sum_h += val.images[i].h;
        sum_w += val.images[i].w;
    }

    const int ncls = det.num_classes();
    double map_acc = 0.0;
    int map_n = 0;
    for (double thr : thresholds) {
        const auto ap = average_precision(dets, val.annotations, thr, ncls);
        rep.ap_by_thr.push_back(ap);
        if (ap) {
            map_acc += *ap;
            ++map_n;
        }
        std::array<std::optional<double>, 3> buckets;
        for (int b = 0; b < 3; ++b) {
            buckets[b] = average_precision(dets, val.annotations, thr, ncls, b);
        }
        rep.ap_by_thr_bucket.push_back(buckets);
    }
    if (map_n > 0) rep.map = map_acc / map_n;

    rep.avg_input_h = static_cast<int>(std::lround(sum_h / val.size()));
    rep.avg_input_w = static_cast<int>(std::lround(sum_w / val.size()));
    std::vector<uint64_t> per_df;
    for (int j = 0; j < m; ++j) {
        per_df.push_back(det.flops(rep.avg_input_h, rep.avg_input_w, j, true));
    }
    rep.weighted_gflops = weighted_flops(rep.df_histogram, per_df) / 1e9;
    rep.fixed_half_gflops = static_cast<double>(per_df[0]) / 1e9;
    rep.savings_vs_fixed_half_pct =
        100.0 * (1.0 - rep.weighted_gflops / rep.fixed_half_gflops);
    if (dfp) {
        const auto ws = det.backbone().walk_shapes(rep.avg_input_h, rep.avg_input_w, 0);
        rep.dfp_gflops = static_cast<double>(dfp->net().flops(ws.f1_h, ws.f1_w)) / 1e9;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report files: canonical JSON (sorted keys, deterministic float formatting)
// plus a CSV with one row per (iou threshold, size bucket).
// ---------------------------------------------------------------------------
inline nlohmann::json report_to_json(const EvalReport& rep) {
    nlohmann::json j;
    j["policy"] = rep.policy;
    j["num_images"] = rep.num_images;
    auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    auto& aps = j["ap"] = nlohmann::json::object();
    for (size_t t = 0; t < rep.iou_thresholds.size(); ++t) {
        nlohmann::json entry;
        entry["all"] = opt(rep.ap_by_thr[t]);
        for (int b = 0; b < 3; ++b) entry[kBucketNames[b]] = opt(rep.ap_by_thr_bucket[t][b]);
        aps[format_msg("iou_", rep.iou_thresholds[t])] = entry;
    }
    j["map"] = opt(rep.map);
    j["df_histogram"] = rep.df_histogram;
    j["weighted_gflops"] = rep.weighted_gflops;
    j["fixed_half_gflops"] = rep.fixed_half_gflops;
    j["savings_vs_fixed_half_pct"] = rep.savings_vs_fixed_half_pct;
    j["dfp_gflops"] = rep.dfp_gflops;
    j["avg_input_hw"] = {rep.avg_input_h, rep.avg_input_w};
    return j;
}

inline void emit_report(const EvalReport& rep, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir / "report.json", std::ios::binary);
        DPNET_CHECK(f.good(), "cannot write report.json");
        f << report_to_json(rep).dump(2) << "\n";
    }
    std::ofstream csv(dir / "report.csv", std::ios::binary);
    DPNET_CHECK(csv.good(), "cannot write report.csv");
    csv << "iou_thr,bucket,ap\n";
    for (size_t t = 0; t < rep.iou_thresholds.size(); ++t) {
        for (int b = 0; b < 3; ++b) {
            csv << rep.iou_thresholds[t] << "," << kBucketNames[b] << ",";
            if (rep.ap_by_thr_bucket[t][b]) {
                csv << *rep.ap_by_thr_bucket[t][b];
            }
            csv << "\n";
        }
    }
}

}  // namespace dpnet
