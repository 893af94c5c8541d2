#pragma once

#include <algorithm>
#include <tuple>
#include <vector>

#include "dpnet/common.hpp"

namespace dpnet {

// Axis-aligned box in continuous image pixels, x2 > x1, y2 > y1.
struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }

    bool contains(double x, double y) const { return x > x1 && x < x2 && y > y1 && y < y2; }

    auto key() const { return std::tie(x1, y1, x2, y2); }
    bool operator==(const Box& o) const { return key() == o.key(); }
};

struct GtAnnotation {
    int image_id = 0;
    std::vector<Box> boxes;
    std::vector<int> labels;

    size_t size() const { return boxes.size(); }
};

struct Detection {
    Box box;
    double score = 0.0;
    int cls = 0;
    // Flat index of the producing head cell; lets the guidance loss read the
    // full per-class probabilities back out of the head output. Not serialized.
    int cell = -1;
};

// Intersection over union; any degenerate box gives 0 by convention.
inline double iou(const Box& a, const Box& b) {
    const double ax = a.area(), bx = b.area();
    if (ax <= 0.0 || bx <= 0.0) return 0.0;
    const double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
    const double iw = ix2 - ix1, ih = iy2 - iy1;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    return inter / (ax + bx - inter);
}

inline bool detection_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (!(a.box == b.box)) return a.box.key() < b.box.key();
    return a.cls < b.cls;
}

// Greedy class-wise suppression: repeatedly keep the best remaining detection
// and drop same-class detections overlapping it above iou_thr. Ties are
// broken by (score desc, box lexicographic, class) so the result is stable.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thr) {
    DPNET_CHECK(iou_thr > 0.0 && iou_thr < 1.0, "nms: iou_thr must be in (0,1), got ", iou_thr);
    std::sort(dets.begin(), dets.end(), detection_order);
    std::vector<Detection> kept;
    std::vector<bool> dead(dets.size(), false);
    for (size_t i = 0; i < dets.size(); ++i) {
        if (dead[i]) continue;
        kept.push_back(dets[i]);
        for (size_t k = i + 1; k < dets.size(); ++k) {
            if (dead[k] || dets[k].cls != dets[i].cls) continue;
            if (iou(dets[k].box, dets[i].box) > iou_thr) dead[k] = true;
        }
    }
    return kept;
}

}  // namespace dpnet
