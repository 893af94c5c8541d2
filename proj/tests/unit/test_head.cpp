#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dpnet/gradcheck.hpp"
#include "dpnet/head.hpp"

using namespace dpnet;

namespace {

// Literal transcription of the greedy suppression definition, kept separate
// from the library implementation.
std::vector<Detection> nms_reference(std::vector<Detection> in, double thr) {
    std::vector<Detection> out;
    std::vector<bool> removed(in.size(), false);
    for (;;) {
        int best = -1;
        for (size_t i = 0; i < in.size(); ++i) {
            if (removed[i]) continue;
            if (best < 0 || detection_order(in[i], in[best])) best = static_cast<int>(i);
        }
        if (best < 0) break;
        out.push_back(in[best]);
        removed[best] = true;
        for (size_t i = 0; i < in.size(); ++i) {
            if (removed[i] || in[i].cls != in[best].cls) continue;
            const Box& a = in[i].box;
            const Box& b = in[best].box;
            const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
            const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
            const double inter = ix * iy;
            const double uni = a.area() + b.area() - inter;
            if (uni > 0 && inter / uni > thr) removed[i] = true;
        }
    }
    return out;
}

Detection random_det(RngState& rng, int max_cls) {
    Detection d;
    d.box.x1 = rng.uniform(0, 80);
    d.box.y1 = rng.uniform(0, 80);
    d.box.x2 = d.box.x1 + rng.uniform(1, 40);
    d.box.y2 = d.box.y1 + rng.uniform(1, 40);
    d.score = rng.uniform(0.01, 1.0);
    d.cls = static_cast<int>(rng.randint(0, max_cls));
    return d;
}

}  // namespace

TEST_CASE("iou pinned values and properties") {
    Box a{0, 0, 10, 10};
    REQUIRE(iou(a, a) == 1.0);
    REQUIRE(iou(a, Box{20, 20, 30, 30}) == 0.0);
    REQUIRE(iou(a, Box{5, 0, 15, 10}) == Catch::Approx(1.0 / 3.0).margin(1e-12));
    REQUIRE(iou(a, Box{3, 3, 3, 9}) == 0.0);  // degenerate
    RngState rng(8);
    for (int t = 0; t < 200; ++t) {
        Detection p = random_det(rng, 1), q = random_det(rng, 1);
        REQUIRE(iou(p.box, q.box) == iou(q.box, p.box));
        REQUIRE(iou(p.box, q.box) >= 0.0);
        REQUIRE(iou(p.box, q.box) <= 1.0);
    }
}

TEST_CASE("nms basics") {
    Detection a, b;
    a.box = b.box = {0, 0, 10, 10};
    a.score = 0.9;
    b.score = 0.8;
    auto kept = nms({a, b}, 0.5);
    REQUIRE(kept.size() == 1);
    REQUIRE(kept[0].score == 0.9);

    b.box = {50, 50, 60, 60};
    kept = nms({a, b}, 0.5);
    REQUIRE(kept.size() == 2);

    // different classes never suppress each other
    b.box = a.box;
    b.cls = 1;
    kept = nms({a, b}, 0.5);
    REQUIRE(kept.size() == 2);

    REQUIRE(nms({}, 0.5).empty());
    REQUIRE_THROWS_AS(nms({a}, 1.5), value_error);
}

TEST_CASE("nms matches the brute-force reference on 1000 random instances") {
    RngState rng(1234);
    for (int inst = 0; inst < 1000; ++inst) {
        const int n = static_cast<int>(rng.randint(0, 5));
        std::vector<Detection> dets;
        for (int i = 0; i < n; ++i) dets.push_back(random_det(rng, 2));
        const double thr = rng.uniform(0.1, 0.9);
        auto fast = nms(dets, thr);
        auto ref = nms_reference(dets, thr);
        REQUIRE(fast.size() == ref.size());
        for (size_t i = 0; i < fast.size(); ++i) {
            REQUIRE(fast[i].box == ref[i].box);
            REQUIRE(fast[i].score == ref[i].score);
            REQUIRE(fast[i].cls == ref[i].cls);
        }
        // kept scores non-increasing, no same-class pair above thr
        for (size_t i = 1; i < fast.size(); ++i) REQUIRE(fast[i - 1].score >= fast[i].score);
        for (size_t i = 0; i < fast.size(); ++i) {
            for (size_t k = i + 1; k < fast.size(); ++k) {
                if (fast[i].cls == fast[k].cls) {
                    REQUIRE(iou(fast[i].box, fast[k].box) <= thr);
                }
            }
        }
    }
}

TEST_CASE("assign_targets center rule and tie-break") {
    GtAnnotation whole;
    whole.boxes = {{0, 0, 64, 64}};
    whole.labels = {1};
    auto a = assign_targets(8, 8, 8.0, 8.0, whole);
    REQUIRE(a.num_pos == 64);
    for (int c : a.target_class) REQUIRE(c == 1);

    auto empty = assign_targets(8, 8, 8.0, 8.0, GtAnnotation{});
    REQUIRE(empty.num_pos == 0);

    // nested boxes: the smaller one wins the shared center
    GtAnnotation nested;
    nested.boxes = {{0, 0, 64, 64}, {24, 24, 40, 40}};
    nested.labels = {0, 2};
    auto n = assign_targets(8, 8, 8.0, 8.0, nested);
    // cell (4,4) has center (36, 36), inside both
    REQUIRE(n.target_class[4 * 8 + 4] == 2);
    REQUIRE(n.target_class[0] == 0);

    // every positive center lies inside its assigned box
    for (int cy = 0; cy < 8; ++cy) {
        for (int cx = 0; cx < 8; ++cx) {
            const int tc = n.target_class[cy * 8 + cx];
            if (tc < 0) continue;
            const auto& t = n.targets[cy * 8 + cx];
            for (double v : t) REQUIRE(v > 0.0);
        }
    }
}

TEST_CASE("head output shapes, positive deltas") {
    ParamRegistry reg;
    RngState rng(3);
    HeadConfig hc;
    hc.in_channels = 8;
    hc.num_classes = 3;
    Head head(reg, hc, 3, rng);
    Tensor f(2, 8, 5, 7);
    f.fill_normal(rng, 1.0);
    auto out = head.forward(f, 1, Mode::eval);
    REQUIRE(out.cls_logits.shape == std::array<int, 4>{2, 3, 5, 7});
    REQUIRE(out.box_logits.shape == std::array<int, 4>{2, 4, 5, 7});
    for (float v : out.box_deltas.data) REQUIRE(v > 0.0f);
}

TEST_CASE("head gradients match finite differences") {
    using S = double;
    ParamRegistryT<S> reg;
    RngState rng(5);
    HeadConfig hc;
    hc.in_channels = 6;
    hc.num_classes = 2;
    HeadT<S> head(reg, hc, 2, rng);
    TensorT<S> f(1, 6, 5, 5);
    f.fill_normal(rng, 0.8);

    GtAnnotation gts;
    gts.boxes = {{4, 4, 28, 30}};
    gts.labels = {1};
    const auto asg = assign_targets(5, 5, 8.0, 8.0, gts);

    auto loss = [&] {
        auto out = head.forward(f, 0, Mode::train);
        return detection_loss(out, {asg}, 1.0).total;
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
    const auto res = grad_check<S>(loss, grad, checked, 1e-4, 30);
    CAPTURE(res.max_rel_error);
    REQUIRE(res.max_rel_error < 1e-3);
}

TEST_CASE("detection_loss saturated correctness and conventions") {
    GtAnnotation gts;
    gts.boxes = {{8, 8, 40, 40}};
    gts.labels = {1};
    const int h = 6, w = 6;
    const auto asg = assign_targets(h, w, 8.0, 8.0, gts);
    REQUIRE(asg.num_pos > 0);

    HeadOut out;
    out.cls_logits.resize(1, 3, h, w);
    out.box_logits.resize(1, 4, h, w);
    out.cls_logits.fill(-30.0f);
    for (size_t cell = 0; cell < static_cast<size_t>(h) * w; ++cell) {
        if (asg.target_class[cell] < 0) continue;
        out.cls_logits.at(0, asg.target_class[cell], static_cast<int>(cell) / w,
                          static_cast<int>(cell) % w) = 30.0f;
        for (int k = 0; k < 4; ++k) {
            out.box_logits.at(0, k, static_cast<int>(cell) / w, static_cast<int>(cell) % w) =
                static_cast<float>(std::log(std::max(asg.targets[cell][k], kMinDelta)));
        }
    }
    out.box_deltas = out.box_logits;
    for (auto& v : out.box_deltas.data) v = std::exp(v);

    auto dl = detection_loss(out, {asg}, 1.0);
    REQUIRE(dl.total < 1e-3);

    // no positives: reg contributes nothing
    auto empty_asg = assign_targets(h, w, 8.0, 8.0, GtAnnotation{});
    auto dl2 = detection_loss(out, {empty_asg}, 1.0);
    REQUIRE(dl2.reg == 0.0);
    REQUIRE(dl2.total == dl2.cls);

    // alpha = 0 drops the regression term exactly
    auto dl3 = detection_loss(out, {asg}, 0.0);
    REQUIRE(dl3.total == dl3.cls);

    // corrupting a correct logit strictly increases the classification loss
    HeadOut corrupted = out;
    corrupted.cls_logits.at(0, 1, 2, 2) = -30.0f;
    REQUIRE(detection_loss(corrupted, {asg}, 1.0).cls > dl.cls);
}

TEST_CASE("decode basics and round-trip") {
    const int h = 4, w = 4;
    HeadOut out;
    out.cls_logits.resize(1, 2, h, w);
    out.box_logits.resize(1, 4, h, w);
    out.cls_logits.fill(-100.0f);
    out.box_deltas = out.box_logits;
    for (auto& v : out.box_deltas.data) v = std::exp(v);
    REQUIRE(decode(out, 0, 8.0, 8.0, 32, 32).empty());

    // one saturated cell with unit deltas: box = center +- stride
    out.cls_logits.at(0, 1, 2, 1) = 100.0f;
    out.box_logits.fill(0.0f);
    out.box_deltas.fill(1.0f);
    auto dets = decode(out, 0, 8.0, 8.0, 32, 32);
    REQUIRE(dets.size() == 1);
    REQUIRE(dets[0].cls == 1);
    REQUIRE(dets[0].box.x1 == Catch::Approx(12.0 - 8.0));
    REQUIRE(dets[0].box.y1 == Catch::Approx(20.0 - 8.0));
    REQUIRE(dets[0].box.x2 == Catch::Approx(12.0 + 8.0));
    REQUIRE(dets[0].box.y2 == Catch::Approx(20.0 + 8.0));

    // encode-decode round trip on assigned positives
    GtAnnotation gts;
    gts.boxes = {{5, 3, 27, 22}};
    gts.labels = {0};
    auto asg = assign_targets(h, w, 8.0, 8.0, gts);
    REQUIRE(asg.num_pos > 0);
    HeadOut enc;
    enc.cls_logits.resize(1, 2, h, w);
    enc.box_logits.resize(1, 4, h, w);
    enc.cls_logits.fill(-100.0f);
    for (size_t cell = 0; cell < static_cast<size_t>(h) * w; ++cell) {
        if (asg.target_class[cell] < 0) continue;
        enc.cls_logits.at(0, 0, static_cast<int>(cell) / w, static_cast<int>(cell) % w) = 100.0f;
        for (int k = 0; k < 4; ++k) {
            enc.box_logits.at(0, k, static_cast<int>(cell) / w, static_cast<int>(cell) % w) =
                static_cast<float>(std::log(std::max(asg.targets[cell][k], kMinDelta)));
        }
    }
    enc.box_deltas = enc.box_logits;
    for (auto& v : enc.box_deltas.data) v = std::exp(v);
    DecodeConfig dc;
    dc.nms_thr = 0.99;  // keep all positives
    auto rt = decode(enc, 0, 8.0, 8.0, 32, 32, dc);
    REQUIRE(!rt.empty());
    for (const auto& d : rt) {
        REQUIRE(d.box.x1 == Catch::Approx(5.0).margin(0.5));
        REQUIRE(d.box.y1 == Catch::Approx(3.0).margin(0.5));
        REQUIRE(d.box.x2 == Catch::Approx(27.0).margin(0.5));
        REQUIRE(d.box.y2 == Catch::Approx(22.0).margin(0.5));
    }
}

TEST_CASE("decode output stays inside the image with positive area") {
    RngState rng(77);
    const int h = 6, w = 6;
    for (int trial = 0; trial < 20; ++trial) {
        HeadOut out;
        out.cls_logits.resize(1, 3, h, w);
        out.box_logits.resize(1, 4, h, w);
        out.cls_logits.fill_normal(rng, 3.0);
        out.box_logits.fill_normal(rng, 1.5);
        out.box_deltas = out.box_logits;
        for (auto& v : out.box_deltas.data) v = std::exp(v);
        for (const auto& d : decode(out, 0, 8.0, 8.0, 48, 48)) {
            REQUIRE(d.box.x1 >= 0.0);
            REQUIRE(d.box.y1 >= 0.0);
            REQUIRE(d.box.x2 <= 48.0);
            REQUIRE(d.box.y2 <= 48.0);
            REQUIRE(d.box.area() > 0.0);
            REQUIRE(d.score >= 0.05);
            REQUIRE(d.score <= 1.0);
        }
    }
}
