#pragma once

#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpnet/data.hpp"
#include "dpnet/model.hpp"

namespace dpnet {

struct TrainConfig {
    int epochs = 12;
    int dfp_epochs = 12;
    int batch_size = 16;
    double lr = 0.02;
    double dfp_lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<int> lr_decay_epochs = {8, 11};
    uint64_t seed = 0;
    double alpha = 1.0;      // detection loss: cls + alpha * reg
    double lambda = 1.0;     // predictor loss: sta + lambda * df
    double threshold = 1.1;  // guidance label ratio T

    void validate() const {
        DPNET_CHECK(epochs >= 0 && dfp_epochs >= 0, "train: negative epoch count");
        DPNET_CHECK(batch_size >= 1, "train: batch_size must be >= 1");
        DPNET_CHECK(lr >= 0 && dfp_lr >= 0 && momentum >= 0 && weight_decay >= 0,
                    "train: negative hyperparameter");
        DPNET_CHECK(alpha >= 0 && lambda >= 0, "train: negative loss weight");
        DPNET_CHECK(threshold >= 1.0, "train: threshold T must be >= 1");
        for (int d : lr_decay_epochs) {
            DPNET_CHECK(d >= 0 && d < std::max(epochs, 1), "train: decay epoch ", d,
                        " outside [0, epochs)");
        }
    }

    double lr_at(int epoch) const {
        double v = lr;
        for (int d : lr_decay_epochs) {
            if (epoch >= d) v *= 0.1;
        }
        return v;
    }
};

// One line per (step, df index), written as JSON lines. Timestamps stay out
// of this file so identical runs produce identical logs.
class TrainLog {
public:
    explicit TrainLog(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        DPNET_CHECK(out_.good(), "cannot open train log '", path.string(), "'");
    }
    TrainLog() = default;

    void step(int epoch, int step, int j, const DetectionLoss& dl) {
        if (!out_.is_open()) return;
        nlohmann::json line = {{"epoch", epoch}, {"step", step},   {"j", j},
                               {"L_cls", dl.cls}, {"L_reg", dl.reg}, {"L_MST", dl.total}};
        out_ << line.dump() << "\n";
    }

    void note(const std::string& key, const nlohmann::json& value) {
        if (!out_.is_open()) return;
        nlohmann::json line = {{key, value}};
        out_ << line.dump() << "\n";
    }

private:
    std::ofstream out_;
};

namespace detail {

inline std::vector<Assignment> batch_assignments(const Dataset& ds,
                                                 const std::vector<int>& ids,
                                                 const BackboneOutput& bb) {
    std::vector<Assignment> asg;
    asg.reserve(ids.size());
    for (int id : ids) {
        asg.push_back(assign_targets(bb.f_out.h(), bb.f_out.w(), bb.stride_y, bb.stride_x,
                                     ds.annotations[id]));
    }
    return asg;
}

}  // namespace detail

// Phase 1, mixed down-sampling-factor training: each minibatch is forwarded
// once per df candidate (normalization copy switched along), the per-factor
// detection losses are summed, and one SGD step consumes the accumulated
// gradient. Gradients accumulate in ascending j, so the step equals a single
// backward through the summed loss.
inline void train_detector_mst(const Dataset& train, Detector& det, const TrainConfig& cfg,
                               TrainLog* log = nullptr) {
    cfg.validate();
    DPNET_CHECK(train.size() > 0, "train_detector_mst: empty dataset");
    const int m = det.num_candidates();
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        RngState shuffle_rng = RngState(cfg.seed).fork(0xe90c + epoch);
        shuffle_rng.shuffle(order);
        const double lr = cfg.lr_at(epoch);
        int step = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::vector<int> ids(order.begin() + start, order.begin() + end);
            Tensor images = to_tensor(train, ids);
            double batch_total = 0.0;
            for (int j = 0; j < m; ++j) {
                auto fwd = det.forward(images, j, Mode::train);
                const auto asg = detail::batch_assignments(train, ids, fwd.bb);
                Tensor d_cls, d_box;
                const DetectionLoss dl = detection_loss(fwd.head, asg, cfg.alpha, &d_cls, &d_box);
                DPNET_CHECK(std::isfinite(dl.total), "train: non-finite loss at epoch ", epoch,
                            " step ", step, " j ", j, " (first image id ", ids[0], ")");
                det.backward(d_cls, d_box, j);
                batch_total += dl.total;
                if (log) log->step(epoch, step, j, dl);
            }
            (void)batch_total;
            sgd_step(det.registry(), lr, cfg.momentum, cfg.weight_decay);
        }
    }
    det.release_cache();
}

// ---------------------------------------------------------------------------
// Guidance labeling (phase 1.5): run the frozen detector on every training
// image at every df candidate, score each run with the guidance loss, and
// threshold the per-image loss vector into df labels. Images without ground
// truth are flagged and excluded.
// ---------------------------------------------------------------------------
struct LabelCacheSummary {
    std::vector<GuidanceLossRecord> records;
    std::vector<int> skipped_no_gt;
    std::vector<int> positives_per_df;
};

inline LabelCacheSummary build_guidance_labels(const Dataset& ds, Detector& det, double T,
                                               const DecodeConfig& dc = {}) {
    const int m = det.num_candidates();
    LabelCacheSummary out;
    out.positives_per_df.assign(m, 0);
    for (size_t id = 0; id < ds.size(); ++id) {
        if (ds.annotations[id].size() == 0) {
            out.skipped_no_gt.push_back(static_cast<int>(id));
            continue;
        }
        Tensor image = to_tensor(ds, {static_cast<int>(id)});
        GuidanceLossRecord rec;
        rec.image_id = static_cast<int>(id);
        rec.threshold = T;
        for (int j = 0; j < m; ++j) {
            auto fwd = det.forward(image, j, Mode::eval);
            const auto dets = det.decode_image(fwd, 0, image.h(), image.w(), dc);
            rec.losses.push_back(guidance_loss_from_detections(
                dets, fwd.head, 0, ds.annotations[id], fwd.bb.stride_y, fwd.bb.stride_x));
        }
        rec.labels = df_labels(rec.losses, T);
        for (int j = 0; j < m; ++j) out.positives_per_df[j] += rec.labels[j];
        out.records.push_back(std::move(rec));
    }
    return out;
}

// JSON-lines cache: a header line carrying the detector's config hash, then
// one record per labeled image, then one line per skipped image.
inline void save_label_cache(const std::filesystem::path& path, const LabelCacheSummary& cache,
                             const std::string& detector_config_hash) {
    std::ofstream f(path, std::ios::binary);
    DPNET_CHECK(f.good(), "cannot write label cache '", path.string(), "'");
    nlohmann::json header = {{"type", "header"},
                             {"detector_config_hash", detector_config_hash},
                             {"positives_per_df", cache.positives_per_df}};
    f << header.dump() << "\n";
    for (const auto& r : cache.records) {
        nlohmann::json line = {{"image_id", r.image_id},
                               {"losses", r.losses},
                               {"labels", r.labels},
                               {"T", r.threshold}};
        f << line.dump() << "\n";
    }
    for (int id : cache.skipped_no_gt) {
        nlohmann::json line = {{"image_id", id}, {"skipped", "no_gt"}};
        f << line.dump() << "\n";
    }
}

inline LabelCacheSummary load_label_cache(const std::filesystem::path& path,
                                          const std::string& expect_config_hash) {
    std::ifstream f(path, std::ios::binary);
    DPNET_CHECK(f.good(), "cannot open label cache '", path.string(), "'");
    LabelCacheSummary out;
    std::string line;
    bool have_header = false;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail("label cache line ", lineno, ": invalid JSON: ", e.what());
        }
        if (!have_header) {
            DPNET_CHECK(j.value("type", "") == "header", "label cache: missing header line");
            const std::string hash = j.at("detector_config_hash").get<std::string>();
            DPNET_CHECK(expect_config_hash.empty() || hash == expect_config_hash,
                        "label cache was built for config ", hash,
                        ", refusing to mix with config ", expect_config_hash);
            if (j.contains("positives_per_df")) {
                out.positives_per_df = j["positives_per_df"].get<std::vector<int>>();
            }
            have_header = true;
            continue;
        }
        if (j.contains("skipped")) {
            out.skipped_no_gt.push_back(j.at("image_id").get<int>());
            continue;
        }
        GuidanceLossRecord rec;
        rec.image_id = j.at("image_id").get<int>();
        rec.losses = j.at("losses").get<std::vector<double>>();
        rec.labels = j.at("labels").get<std::vector<int>>();
        rec.threshold = j.at("T").get<double>();
        out.records.push_back(std::move(rec));
    }
    DPNET_CHECK(have_header, "label cache: empty file");
    DPNET_CHECK(!out.records.empty(), "label cache: no records");
    return out;
}

// Phase 2: train the predictor against the cached labels while the detector
// stays frozen (asserted bitwise via its registry digest). The pre-dynamic
// feature map is produced by the frozen detector in eval mode with
// normalization copy 0, matching what the predictor sees at inference.
inline void train_dfp(const Dataset& train, const LabelCacheSummary& cache, Detector& det,
                      DfpModel& dfp, const TrainConfig& cfg, TrainLog* log = nullptr) {
    cfg.validate();
    DPNET_CHECK(!cache.records.empty(), "train_dfp: empty label cache");
    const std::string frozen = registry_digest(det.registry());

    std::vector<int> order(cache.records.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.dfp_epochs; ++epoch) {
        RngState shuffle_rng = RngState(cfg.seed).fork(0xdf9 + epoch);
        shuffle_rng.shuffle(order);
        int step = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<int> ids;
            std::vector<std::vector<int>> labels;
            std::vector<std::array<double, 4>> targets;
            for (size_t i = start; i < end; ++i) {
                const GuidanceLossRecord& rec = cache.records[order[i]];
                ids.push_back(rec.image_id);
                labels.push_back(rec.labels);
                const auto& ann = train.annotations[rec.image_id];
                targets.push_back(
                    statistic_target(ann, train.images[rec.image_id].h,
                                     train.images[rec.image_id].w).v);
            }
            Tensor images = to_tensor(train, ids);
            Tensor f1 = det.backbone().forward_f1(images, 0, Mode::eval);
            auto out = dfp.net().forward(f1, Mode::train);
            Tensor d_logits, d_vhat;
            const double loss = dfp_loss_batch(out.df_logits, out.v_hat, labels, targets,
                                               cfg.lambda, &d_logits, &d_vhat);
            DPNET_CHECK(std::isfinite(loss), "train_dfp: non-finite loss at epoch ", epoch,
                        " step ", step);
            dfp.net().backward(d_logits, d_vhat);
            sgd_step(dfp.registry(), cfg.dfp_lr, cfg.momentum, cfg.weight_decay);
            if (log) {
                log->note("dfp_step", {{"epoch", epoch}, {"step", step}, {"L_P", loss}});
            }
        }
    }
    dfp.net().release_cache();
    DPNET_CHECK(registry_digest(det.registry()) == frozen,
                "train_dfp: detector parameters changed during predictor training");
}

}  // namespace dpnet
