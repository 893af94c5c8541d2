#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dpnet/eval.hpp"

using namespace dpnet;
namespace fs = std::filesystem;

namespace {

// Brute-force AP: for every top-k prefix of the score-sorted detections,
// re-run greedy matching from scratch, take the (recall, precision) point,
// and integrate the exact precision envelope.
std::optional<double> ap_reference(const std::vector<std::vector<Detection>>& dets_per_image,
                                   const std::vector<GtAnnotation>& gts_per_image,
                                   double iou_thr, int num_classes) {
    auto overlap = [](const Box& a, const Box& b) {
        const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
        const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
        const double inter = ix * iy;
        const double uni = a.area() + b.area() - inter;
        return uni > 0 ? inter / uni : 0.0;
    };
    double ap_sum = 0.0;
    int with_gt = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        int gt_count = 0;
        for (const auto& g : gts_per_image) {
            for (size_t k = 0; k < g.size(); ++k) gt_count += g.labels[k] == cls;
        }
        if (gt_count == 0) continue;
        ++with_gt;

        struct E {
            int image;
            Detection det;
        };
        std::vector<E> entries;
        for (size_t img = 0; img < dets_per_image.size(); ++img) {
            for (const auto& d : dets_per_image[img]) {
                if (d.cls == cls) entries.push_back({static_cast<int>(img), d});
            }
        }
        std::sort(entries.begin(), entries.end(), [](const E& a, const E& b) {
            if (a.det.score != b.det.score) return a.det.score > b.det.score;
            if (a.image != b.image) return a.image < b.image;
            return a.det.box.key() < b.det.box.key();
        });

        std::vector<double> precision, recall;
        for (size_t k = 1; k <= entries.size(); ++k) {
            // match the top-k prefix from scratch
            std::map<std::pair<int, int>, bool> used;
            int tp = 0;
            for (size_t i = 0; i < k; ++i) {
                const E& e = entries[i];
                const auto& g = gts_per_image[e.image];
                int best = -1;
                double best_iou = 0.0;
                for (size_t gi = 0; gi < g.size(); ++gi) {
                    if (g.labels[gi] != cls) continue;
                    if (used.count({e.image, static_cast<int>(gi)})) continue;
                    const double v = overlap(e.det.box, g.boxes[gi]);
                    if (v >= iou_thr && v > best_iou) {
                        best_iou = v;
                        best = static_cast<int>(gi);
                    }
                }
                if (best >= 0) {
                    used[{e.image, best}] = true;
                    ++tp;
                }
            }
            precision.push_back(static_cast<double>(tp) / k);
            recall.push_back(static_cast<double>(tp) / gt_count);
        }
        double ap = 0.0, env = 0.0;
        for (size_t i = precision.size(); i-- > 0;) {
            env = std::max(env, precision[i]);
            const double r_lo = (i == 0) ? 0.0 : recall[i - 1];
            ap += env * (recall[i] - r_lo);
        }
        ap_sum += ap;
    }
    if (with_gt == 0) return std::nullopt;
    return ap_sum / with_gt;
}

Detection make_det(double x1, double y1, double x2, double y2, double score, int cls) {
    Detection d;
    d.box = {x1, y1, x2, y2};
    d.score = score;
    d.cls = cls;
    return d;
}

}  // namespace

TEST_CASE("average precision pinned cases") {
    // one ground truth, one matching detection
    std::vector<GtAnnotation> gts(1);
    gts[0].boxes = {{10, 10, 30, 30}};
    gts[0].labels = {0};
    std::vector<std::vector<Detection>> dets(1);
    dets[0] = {make_det(11, 11, 30, 29, 0.8, 0)};
    REQUIRE(average_precision(dets, gts, 0.5, 1).value() == Catch::Approx(1.0));

    // high-scoring false positive above a low-scoring true positive: AP 0.5
    dets[0] = {make_det(60, 60, 80, 80, 0.9, 0), make_det(10, 10, 30, 30, 0.3, 0)};
    REQUIRE(average_precision(dets, gts, 0.5, 1).value() == Catch::Approx(0.5));

    // no ground truth at all: undefined
    std::vector<GtAnnotation> none(1);
    REQUIRE(!average_precision(dets, none, 0.5, 1).has_value());

    // detections with no overlap: zero
    dets[0] = {make_det(60, 60, 80, 80, 0.9, 0)};
    REQUIRE(average_precision(dets, gts, 0.5, 1).value() == 0.0);
}

TEST_CASE("average precision equals the brute-force reference on 1000 instances") {
    RngState rng(555);
    for (int inst = 0; inst < 1000; ++inst) {
        const int nimg = 1 + static_cast<int>(rng.randint(0, 1));
        std::vector<GtAnnotation> gts(nimg);
        std::vector<std::vector<Detection>> dets(nimg);
        for (int img = 0; img < nimg; ++img) {
            const int ng = static_cast<int>(rng.randint(0, 3));
            for (int g = 0; g < ng; ++g) {
                const double x1 = rng.uniform(0, 70), y1 = rng.uniform(0, 70);
                gts[img].boxes.push_back({x1, y1, x1 + rng.uniform(5, 30), y1 + rng.uniform(5, 30)});
                gts[img].labels.push_back(static_cast<int>(rng.randint(0, 1)));
            }
            const int nd = static_cast<int>(rng.randint(0, 5));
            for (int d = 0; d < nd; ++d) {
                if (ng > 0 && rng.uniform() < 0.6) {
                    // jittered copy of a ground truth so matches actually occur
                    const int g = static_cast<int>(rng.randint(0, ng - 1));
                    const Box& b = gts[img].boxes[g];
                    const double jx = rng.uniform(-4, 4), jy = rng.uniform(-4, 4);
                    dets[img].push_back(make_det(b.x1 + jx, b.y1 + jy, b.x2 + jx, b.y2 + jy,
                                                 rng.uniform(0.05, 1.0),
                                                 gts[img].labels[g]));
                } else {
                    const double x1 = rng.uniform(0, 70), y1 = rng.uniform(0, 70);
                    dets[img].push_back(make_det(x1, y1, x1 + rng.uniform(5, 30),
                                                 y1 + rng.uniform(5, 30), rng.uniform(0.05, 1.0),
                                                 static_cast<int>(rng.randint(0, 1))));
                }
            }
        }
        const double thr = rng.uniform(0.2, 0.8);
        const auto fast = average_precision(dets, gts, thr, 2);
        const auto ref = ap_reference(dets, gts, thr, 2);
        REQUIRE(fast.has_value() == ref.has_value());
        if (fast) {
            CAPTURE(inst, thr, *fast, *ref);
            REQUIRE(*fast == Catch::Approx(*ref).margin(1e-9));
        }
    }
}

TEST_CASE("average precision is invariant under monotone score transforms") {
    RngState rng(777);
    std::vector<GtAnnotation> gts(2);
    std::vector<std::vector<Detection>> dets(2);
    for (int img = 0; img < 2; ++img) {
        for (int g = 0; g < 3; ++g) {
            const double x1 = rng.uniform(0, 60), y1 = rng.uniform(0, 60);
            gts[img].boxes.push_back({x1, y1, x1 + 20, y1 + 20});
            gts[img].labels.push_back(0);
            dets[img].push_back(
                make_det(x1 + rng.uniform(-3, 3), y1 + rng.uniform(-3, 3), x1 + 20, y1 + 20,
                         rng.uniform(0.1, 0.9), 0));
        }
    }
    const double base = average_precision(dets, gts, 0.5, 1).value();
    for (auto& dd : dets) {
        for (auto& d : dd) d.score = 0.1 + 0.5 * d.score * d.score;  // strictly increasing
    }
    REQUIRE(average_precision(dets, gts, 0.5, 1).value() == Catch::Approx(base).margin(1e-12));
}

TEST_CASE("weighted_flops pinned values and properties") {
    REQUIRE(weighted_flops({5, 3, 2}, {100, 80, 60}) == Catch::Approx(86.0));
    REQUIRE(weighted_flops({0, 7, 0}, {100, 80, 60}) == Catch::Approx(80.0));
    REQUIRE(weighted_flops({4, 4, 4}, {100, 80, 60}) == Catch::Approx(80.0).margin(1e-9));
    REQUIRE_THROWS_AS(weighted_flops({0, 0, 0}, {100, 80, 60}), value_error);
    REQUIRE_THROWS_AS(weighted_flops({1, 2}, {100, 80, 60}), value_error);

    RngState rng(9);
    for (int t = 0; t < 50; ++t) {
        std::vector<int64_t> hist = {rng.randint(0, 50), rng.randint(0, 50), rng.randint(1, 50)};
        std::vector<uint64_t> fl = {300, 200, 100};
        const double v = weighted_flops(hist, fl);
        REQUIRE(v >= 100.0);
        REQUIRE(v <= 300.0);
    }
}

TEST_CASE("evaluate: policies, histogram, and flops accounting") {
    DatasetConfig dcfg;
    dcfg.num_images = 8;
    dcfg.image_h = dcfg.image_w = 64;
    dcfg.size_mixture = {{1.0, 8, 20}};
    dcfg.seed = 5;
    Dataset val = generate_dataset(dcfg);

    Detector det(BackboneConfig{}, 3, 17);
    DfpModel dfp(DfpConfig{}, 16, 3, 19);

    // fixed policy needs no predictor at all
    EvalPolicy fixed;
    fixed.kind = EvalPolicy::Kind::fixed;
    fixed.fixed_j = 0;
    EvalReport fr = evaluate(val, det, nullptr, fixed);
    REQUIRE(fr.df_histogram == std::vector<int64_t>{8, 0, 0});
    REQUIRE(fr.weighted_gflops == Catch::Approx(fr.fixed_half_gflops));
    REQUIRE(fr.savings_vs_fixed_half_pct == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(fr.num_images == 8);

    EvalPolicy dp;
    dp.kind = EvalPolicy::Kind::dfp;
    EvalReport dr = evaluate(val, det, &dfp, dp);
    int64_t total = 0;
    for (int64_t c : dr.df_histogram) total += c;
    REQUIRE(total == 8);

    EvalPolicy rp;
    rp.kind = EvalPolicy::Kind::permuted_random;
    rp.seed = 3;
    EvalReport rr = evaluate(val, det, &dfp, rp);
    // histogram-preserving permutation: identical histogram, bitwise-equal flops
    REQUIRE(rr.df_histogram == dr.df_histogram);
    REQUIRE(rr.weighted_gflops == dr.weighted_gflops);
    // and the selections really are a permutation
    std::vector<int> a = dr.selections, b = rr.selections;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    REQUIRE(a == b);
}

TEST_CASE("report emission: canonical json and csv schema") {
    EvalReport rep;
    rep.policy = "fixed_j0";
    rep.num_images = 4;
    rep.iou_thresholds = {0.25, 0.5, 0.75};
    rep.ap_by_thr = {0.5, 0.4, 0.3};
    rep.ap_by_thr_bucket.resize(3);
    for (auto& row : rep.ap_by_thr_bucket) row = {0.1, 0.2, std::nullopt};
    rep.map = 0.4;
    rep.df_histogram = {4, 0, 0};
    rep.weighted_gflops = 1.5;
    rep.fixed_half_gflops = 1.5;

    auto dir = fs::temp_directory_path() / "dpnet_report_test";
    fs::remove_all(dir);
    emit_report(rep, dir);
    emit_report(rep, dir / "again");

    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    // byte-stable across emissions
    REQUIRE(slurp(dir / "report.json") == slurp(dir / "again/report.json"));

    // round-trips to an equal object
    nlohmann::json back = nlohmann::json::parse(slurp(dir / "report.json"));
    REQUIRE(back == report_to_json(rep));
    REQUIRE(back["map"].get<double>() == 0.4);
    REQUIRE(back["ap"]["iou_0.5"]["other"].is_null());

    // csv: header plus thresholds x buckets rows
    const std::string csv = slurp(dir / "report.csv");
    const size_t rows = std::count(csv.begin(), csv.end(), '\n');
    REQUIRE(rows == 1 + 3 * 3);
}
