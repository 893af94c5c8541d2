#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpnet/data.hpp"
#include "dpnet/dfp.hpp"
#include "dpnet/eval.hpp"
#include "dpnet/train.hpp"

namespace dpnet {

// CLI and config files carry df values as decimals (0.5 / 0.33 / 0.25);
// internally they are exact rationals. 0.33 maps to 1/3.
inline Rational decimal_to_rational(double v) {
    DPNET_CHECK(v > 0.0 && v <= 1.0, "df value ", v, " outside (0, 1]");
    Rational best{1, 1};
    double best_err = std::abs(v - 1.0);
    for (int den = 1; den <= 16; ++den) {
        const int num = std::max(1, static_cast<int>(std::lround(v * den)));
        if (num > den) continue;
        const double err = std::abs(v - static_cast<double>(num) / den);
        if (err < best_err - 1e-12) {
            best = {num, den};
            best_err = err;
        }
    }
    DPNET_CHECK(best_err < 0.005, "df value ", v, " is not close to a small rational");
    return best;
}

inline std::string df_display(Rational df) {
    if (df == Rational{1, 3}) return "0.33";
    std::ostringstream oss;
    oss << df.value();
    return oss.str();
}

struct EvalConfig {
    DecodeConfig decode;
    std::vector<double> iou_thresholds = {0.25, 0.5, 0.75};
    std::vector<uint64_t> random_seeds = {1, 2, 3};

    void validate() const {
        DPNET_CHECK(!iou_thresholds.empty(), "eval: no IoU thresholds");
        for (double t : iou_thresholds) {
            DPNET_CHECK(t > 0.0 && t < 1.0, "eval: IoU threshold ", t, " outside (0,1)");
        }
        DPNET_CHECK(!random_seeds.empty(), "eval: need at least one random baseline seed");
    }
};

struct RunConfig {
    int schema_version = 1;
    uint64_t seed = 0;
    int num_train = 2000;
    int num_val = 500;
    DatasetConfig dataset;  // num_images/seed filled per split
    BackboneConfig backbone;
    DfpConfig dfp;
    TrainConfig train;
    EvalConfig eval;

    DatasetConfig split_config(bool validation) const {
        DatasetConfig d = dataset;
        d.num_images = validation ? num_val : num_train;
        d.seed = validation ? (seed ^ 0x76616c5f73706c69ull) : seed;
        return d;
    }

    void validate() const {
        DPNET_CHECK(schema_version == 1, "config: unsupported schema_version ", schema_version);
        DPNET_CHECK(num_train > 0 && num_val > 0, "config: split sizes must be positive");
        DatasetConfig d = dataset;
        d.num_images = num_train;
        d.validate();
        backbone.validate();
        train.validate();
        eval.validate();
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& where) {
    DPNET_CHECK(j.is_object(), "config: '", where, "' must be an object");
    for (const auto& [key, _] : j.items()) {
        DPNET_CHECK(known.count(key) > 0, "config: unknown key '", key, "' in ", where);
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig cfg;
    detail::reject_unknown_keys(
        j, {"schema_version", "seed", "dataset", "backbone", "dfp", "train", "eval"}, "root");
    cfg.schema_version = j.value("schema_version", 1);
    cfg.seed = j.value("seed", 0ull);

    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        detail::reject_unknown_keys(d,
                                    {"num_train", "num_val", "image_hw", "classes",
                                     "size_mixture", "objects_per_image", "noise_sigma"},
                                    "dataset");
        cfg.num_train = d.value("num_train", cfg.num_train);
        cfg.num_val = d.value("num_val", cfg.num_val);
        if (d.contains("image_hw")) {
            const auto hw = d["image_hw"].get<std::vector<int>>();
            DPNET_CHECK(hw.size() == 2, "config: dataset.image_hw needs [h, w]");
            cfg.dataset.image_h = hw[0];
            cfg.dataset.image_w = hw[1];
        }
        if (d.contains("classes")) {
            cfg.dataset.class_names = d["classes"].get<std::vector<std::string>>();
        }
        if (d.contains("size_mixture")) {
            cfg.dataset.size_mixture.clear();
            for (const auto& row : d["size_mixture"]) {
                const auto v = row.get<std::vector<double>>();
                DPNET_CHECK(v.size() == 3, "config: size_mixture rows are [weight, lo, hi]");
                cfg.dataset.size_mixture.push_back({v[0], v[1], v[2]});
            }
        }
        if (d.contains("objects_per_image")) {
            const auto v = d["objects_per_image"].get<std::vector<int>>();
            DPNET_CHECK(v.size() == 2, "config: objects_per_image needs [min, max]");
            cfg.dataset.objects_min = v[0];
            cfg.dataset.objects_max = v[1];
        }
        cfg.dataset.noise_sigma = d.value("noise_sigma", cfg.dataset.noise_sigma);
    }

    if (j.contains("backbone")) {
        const auto& b = j["backbone"];
        detail::reject_unknown_keys(
            b, {"stem_channels", "stage_channels", "blocks_per_stage", "df_candidates", "norm"},
            "backbone");
        cfg.backbone.stem_channels = b.value("stem_channels", cfg.backbone.stem_channels);
        if (b.contains("stage_channels")) {
            cfg.backbone.stage_channels = b["stage_channels"].get<std::vector<int>>();
        }
        cfg.backbone.blocks_per_stage = b.value("blocks_per_stage", cfg.backbone.blocks_per_stage);
        if (b.contains("df_candidates")) {
            cfg.backbone.df_candidates.clear();
            for (double v : b["df_candidates"].get<std::vector<double>>()) {
                cfg.backbone.df_candidates.push_back(decimal_to_rational(v));
            }
        }
        if (b.contains("norm")) {
            const std::string norm = b["norm"].get<std::string>();
            DPNET_CHECK(norm == "anm" || norm == "shared", "config: backbone.norm must be 'anm' or 'shared'");
            cfg.backbone.shared_norm = (norm == "shared");
        }
    }

    if (j.contains("dfp")) {
        detail::reject_unknown_keys(j["dfp"], {"channels"}, "dfp");
        if (j["dfp"].contains("channels")) {
            cfg.dfp.channels = j["dfp"]["channels"].get<std::vector<int>>();
        }
    }

    if (j.contains("train")) {
        const auto& t = j["train"];
        detail::reject_unknown_keys(t,
                                    {"epochs", "dfp_epochs", "batch_size", "lr", "dfp_lr",
                                     "momentum", "weight_decay", "lr_decay_epochs", "alpha",
                                     "lambda", "T"},
                                    "train");
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.dfp_epochs = t.value("dfp_epochs", cfg.train.dfp_epochs);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.lr = t.value("lr", cfg.train.lr);
        cfg.train.dfp_lr = t.value("dfp_lr", cfg.train.dfp_lr);
        cfg.train.momentum = t.value("momentum", cfg.train.momentum);
        cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
        if (t.contains("lr_decay_epochs")) {
            cfg.train.lr_decay_epochs = t["lr_decay_epochs"].get<std::vector<int>>();
        }
        cfg.train.alpha = t.value("alpha", cfg.train.alpha);
        cfg.train.lambda = t.value("lambda", cfg.train.lambda);
        cfg.train.threshold = t.value("T", cfg.train.threshold);
    }

    if (j.contains("eval")) {
        const auto& e = j["eval"];
        detail::reject_unknown_keys(
            e, {"score_thr", "nms_thr", "max_dets", "iou_thresholds", "random_seeds"}, "eval");
        cfg.eval.decode.score_thr = e.value("score_thr", cfg.eval.decode.score_thr);
        cfg.eval.decode.nms_thr = e.value("nms_thr", cfg.eval.decode.nms_thr);
        cfg.eval.decode.max_dets = e.value("max_dets", cfg.eval.decode.max_dets);
        if (e.contains("iou_thresholds")) {
            cfg.eval.iou_thresholds = e["iou_thresholds"].get<std::vector<double>>();
        }
        if (e.contains("random_seeds")) {
            cfg.eval.random_seeds = e["random_seeds"].get<std::vector<uint64_t>>();
        }
    }

    cfg.train.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["schema_version"] = cfg.schema_version;
    j["seed"] = cfg.seed;
    auto& d = j["dataset"];
    d["num_train"] = cfg.num_train;
    d["num_val"] = cfg.num_val;
    d["image_hw"] = {cfg.dataset.image_h, cfg.dataset.image_w};
    d["classes"] = cfg.dataset.class_names;
    auto& mix = d["size_mixture"] = nlohmann::json::array();
    for (const auto& b : cfg.dataset.size_mixture) mix.push_back({b.weight, b.lo, b.hi});
    d["objects_per_image"] = {cfg.dataset.objects_min, cfg.dataset.objects_max};
    d["noise_sigma"] = cfg.dataset.noise_sigma;

    auto& b = j["backbone"];
    b["stem_channels"] = cfg.backbone.stem_channels;
    b["stage_channels"] = cfg.backbone.stage_channels;
    b["blocks_per_stage"] = cfg.backbone.blocks_per_stage;
    auto& dfs = b["df_candidates"] = nlohmann::json::array();
    for (const Rational& r : cfg.backbone.df_candidates) {
        dfs.push_back(std::stod(df_display(r)));
    }
    b["norm"] = cfg.backbone.shared_norm ? "shared" : "anm";

    j["dfp"]["channels"] = cfg.dfp.channels;

    auto& t = j["train"];
    t["epochs"] = cfg.train.epochs;
    t["dfp_epochs"] = cfg.train.dfp_epochs;
    t["batch_size"] = cfg.train.batch_size;
    t["lr"] = cfg.train.lr;
    t["dfp_lr"] = cfg.train.dfp_lr;
    t["momentum"] = cfg.train.momentum;
    t["weight_decay"] = cfg.train.weight_decay;
    t["lr_decay_epochs"] = cfg.train.lr_decay_epochs;
    t["alpha"] = cfg.train.alpha;
    t["lambda"] = cfg.train.lambda;
    t["T"] = cfg.train.threshold;

    auto& e = j["eval"];
    e["score_thr"] = cfg.eval.decode.score_thr;
    e["nms_thr"] = cfg.eval.decode.nms_thr;
    e["max_dets"] = cfg.eval.decode.max_dets;
    e["iou_thresholds"] = cfg.eval.iou_thresholds;
    e["random_seeds"] = cfg.eval.random_seeds;
    return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    DPNET_CHECK(f.good(), "cannot open config '", path.string(), "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("config '", path.string(), "': invalid JSON: ", e.what());
    }
    return parse_run_config(j);
}

// Hash over the canonical semantic config; paths and output locations never
// enter it, so checkpoints stay byte-identical across working directories.
inline std::string run_config_hash(const RunConfig& cfg) {
    return hex64(fnv1a(run_config_to_json(cfg).dump()));
}

}  // namespace dpnet
