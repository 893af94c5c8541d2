#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dpnet/config.hpp"
#include "dpnet/gradsuite.hpp"
#include "dpnet/model.hpp"

namespace dpnet {

// Stage entry points shared by the CLI and the acceptance suite. Every stage
// reads and writes only under `out`; all state passes through files, so each
// subcommand can run in a fresh process. Timestamps are confined to run.log.
class Pipeline {
public:
    Pipeline(RunConfig cfg, std::filesystem::path out, bool quiet = false)
        : cfg_(std::move(cfg)), out_(std::move(out)), quiet_(quiet) {
        std::filesystem::create_directories(out_);
        config_hash_ = run_config_hash(cfg_);
        write_resolved_config();
    }

    const RunConfig& config() const { return cfg_; }
    const std::string& config_hash() const { return config_hash_; }
    const std::filesystem::path& out() const { return out_; }

    std::filesystem::path train_dir() const { return out_ / "dataset/train"; }
    std::filesystem::path val_dir() const { return out_ / "dataset/val"; }
    std::filesystem::path detector_ckpt_dir() const { return out_ / "ckpt_detector"; }
    std::filesystem::path dfp_ckpt_dir() const { return out_ / "ckpt_dfp"; }
    std::filesystem::path labels_path() const { return out_ / "labels.jsonl"; }

    void gen_data() {
        log("generating dataset");
        Dataset train = generate_dataset(cfg_.split_config(false));
        DatasetConfig tc = cfg_.split_config(false);
        save_dataset(train, train_dir(), &tc);
        Dataset val = generate_dataset(cfg_.split_config(true));
        DatasetConfig vc = cfg_.split_config(true);
        save_dataset(val, val_dir(), &vc);
        log(format_msg("wrote ", train.size(), " train / ", val.size(), " val images"));
    }

    std::unique_ptr<Detector> build_detector() const {
        return std::make_unique<Detector>(cfg_.backbone,
                                          static_cast<int>(cfg_.dataset.class_names.size()),
                                          cfg_.seed ^ 0xde7ec70full);
    }

    std::unique_ptr<DfpModel> build_dfp() const {
        return std::make_unique<DfpModel>(cfg_.dfp, cfg_.backbone.stage_channels[0],
                                          cfg_.backbone.m(), cfg_.seed ^ 0xdf9a11ull);
    }

    void train() {
        Dataset train_set = load_dataset(train_dir());
        auto det = build_detector();
        TrainLog tlog(out_ / "train_log.jsonl");
        log("phase 1: mixed down-sampling-factor training");
        train_detector_mst(train_set, *det, cfg_.train, &tlog);
        save_checkpoint(det->registry(), detector_ckpt_dir(), {config_hash_, cfg_.seed, 0});
        log("saved detector checkpoint");
    }

    std::unique_ptr<Detector> load_detector() const {
        auto det = build_detector();
        load_checkpoint(det->registry(), detector_ckpt_dir(), config_hash_);
        return det;
    }

    void labels() {
        Dataset train_set = load_dataset(train_dir());
        auto det = load_detector();
        log("building guidance labels");
        auto cache = build_guidance_labels(train_set, *det, cfg_.train.threshold,
                                           cfg_.eval.decode);
        save_label_cache(labels_path(), cache, config_hash_);
        std::string hist = "label positives per df:";
        for (size_t j = 0; j < cache.positives_per_df.size(); ++j) {
            hist += format_msg(" ", df_display(cfg_.backbone.df_candidates[j]), "=",
                               cache.positives_per_df[j]);
        }
        log(hist + format_msg(" (", cache.records.size(), " labeled, ",
                              cache.skipped_no_gt.size(), " skipped)"));
    }

    void train_dfp_stage() {
        Dataset train_set = load_dataset(train_dir());
        auto det = load_detector();
        auto cache = load_label_cache(labels_path(), config_hash_);
        auto dfp = build_dfp();
        TrainLog tlog(out_ / "dfp_log.jsonl");
        log("phase 2: predictor training against the label cache");
        train_dfp(train_set, cache, *det, *dfp, cfg_.train, &tlog);
        save_checkpoint(dfp->registry(), dfp_ckpt_dir(), {config_hash_, cfg_.seed, 0});
        log("saved predictor checkpoint");
    }

    std::unique_ptr<DfpModel> load_dfp() const {
        auto dfp = build_dfp();
        load_checkpoint(dfp->registry(), dfp_ckpt_dir(), config_hash_);
        return dfp;
    }

    static EvalPolicy parse_policy(const std::string& text, const BackboneConfig& bcfg) {
        EvalPolicy p;
        if (text == "dfp") {
            p.kind = EvalPolicy::Kind::dfp;
            return p;
        }
        if (text.rfind("fixed:", 0) == 0) {
            p.kind = EvalPolicy::Kind::fixed;
            const Rational df = decimal_to_rational(std::stod(text.substr(6)));
            for (int j = 0; j < bcfg.m(); ++j) {
                if (bcfg.df_candidates[j] == df) {
                    p.fixed_j = j;
                    return p;
                }
            }
            fail("policy '", text, "': ", df.num, "/", df.den, " is not a df candidate");
        }
        if (text.rfind("random:", 0) == 0) {
            p.kind = EvalPolicy::Kind::permuted_random;
            p.seed = std::stoull(text.substr(7));
            return p;
        }
        fail("unknown policy '", text, "' (want dfp, fixed:<df> or random:<seed>)");
    }

    EvalReport eval_policy(const std::string& policy_text) {
        Dataset val = load_dataset(val_dir());
        auto det = load_detector();
        const EvalPolicy policy = parse_policy(policy_text, cfg_.backbone);
        std::unique_ptr<DfpModel> dfp;
        if (policy.kind != EvalPolicy::Kind::fixed) dfp = load_dfp();
        log(format_msg("evaluating policy ", policy.name()));
        EvalReport rep =
            evaluate(val, *det, dfp.get(), policy, cfg_.eval.decode, cfg_.eval.iou_thresholds);
        emit_report(rep, out_ / ("eval_" + rep.policy));
        return rep;
    }

    // Runs the dfp policy, every fixed df, and the permuted-random baselines;
    // writes the combined report.json and the accuracy/flops curve.
    nlohmann::json full_report() {
        Dataset val = load_dataset(val_dir());
        auto det = load_detector();
        auto dfp = load_dfp();

        nlohmann::json combined;
        combined["config_hash"] = config_hash_;
        auto& policies = combined["policies"];

        EvalPolicy p;
        p.kind = EvalPolicy::Kind::dfp;
        log("evaluating policy dfp");
        EvalReport dfp_rep =
            evaluate(val, *det, dfp.get(), p, cfg_.eval.decode, cfg_.eval.iou_thresholds);
        emit_report(dfp_rep, out_ / "eval_dfp");
        policies["dfp"] = report_to_json(dfp_rep);

        std::vector<EvalReport> fixed_reps;
        for (int j = 0; j < cfg_.backbone.m(); ++j) {
            EvalPolicy fp;
            fp.kind = EvalPolicy::Kind::fixed;
            fp.fixed_j = j;
            log(format_msg("evaluating policy fixed_j", j));
            fixed_reps.push_back(
                evaluate(val, *det, nullptr, fp, cfg_.eval.decode, cfg_.eval.iou_thresholds));
            emit_report(fixed_reps.back(), out_ / ("eval_" + fixed_reps.back().policy));
            policies["fixed_" + df_display(cfg_.backbone.df_candidates[j])] =
                report_to_json(fixed_reps.back());
        }

        double rmean = 0.0, rmin = 1e30, rmax = -1e30;
        double r50mean = 0.0;
        int rn = 0;
        for (uint64_t seed : cfg_.eval.random_seeds) {
            EvalPolicy rp;
            rp.kind = EvalPolicy::Kind::permuted_random;
            rp.seed = seed;
            log(format_msg("evaluating policy random_s", seed));
            EvalReport rr =
                evaluate(val, *det, dfp.get(), rp, cfg_.eval.decode, cfg_.eval.iou_thresholds);
            emit_report(rr, out_ / ("eval_" + rr.policy));
            policies[rr.policy] = report_to_json(rr);
            if (rr.map) {
                rmean += *rr.map;
                rmin = std::min(rmin, *rr.map);
                rmax = std::max(rmax, *rr.map);
                ++rn;
            }
            if (rr.ap_by_thr.size() > 1 && rr.ap_by_thr[1]) r50mean += *rr.ap_by_thr[1];
        }
        if (rn > 0) {
            combined["random_summary"] = {{"map_mean", rmean / rn},
                                          {"map_min", rmin},
                                          {"map_max", rmax},
                                          {"ap50_mean", r50mean / rn},
                                          {"runs", rn}};
        }

        // headline comparison: predictor vs constant df = candidate 0
        const EvalReport& fixed_half = fixed_reps[0];
        auto ap50 = [](const EvalReport& r) {
            return (r.ap_by_thr.size() > 1 && r.ap_by_thr[1]) ? *r.ap_by_thr[1] : 0.0;
        };
        nlohmann::json cmp;
        cmp["weighted_gflops_dfp"] = dfp_rep.weighted_gflops;
        cmp["weighted_gflops_fixed_half"] = fixed_half.weighted_gflops;
        cmp["flops_savings_pct"] = dfp_rep.savings_vs_fixed_half_pct;
        cmp["map50_dfp"] = ap50(dfp_rep);
        cmp["map50_fixed_half"] = ap50(fixed_half);
        cmp["map50_drop_points"] = 100.0 * (ap50(fixed_half) - ap50(dfp_rep));
        cmp["map_dfp"] = dfp_rep.map ? *dfp_rep.map : 0.0;
        if (rn > 0) cmp["random_map_mean"] = rmean / rn;
        combined["comparison"] = cmp;

        {
            std::ofstream f(out_ / "report.json", std::ios::binary);
            DPNET_CHECK(f.good(), "cannot write report.json");
            f << combined.dump(2) << "\n";
        }
        {
            std::ofstream csv(out_ / "curves.csv", std::ios::binary);
            csv << "policy,df,weighted_gflops,map,ap50\n";
            for (int j = 0; j < cfg_.backbone.m(); ++j) {
                const EvalReport& r = fixed_reps[j];
                csv << r.policy << "," << df_display(cfg_.backbone.df_candidates[j]) << ","
                    << r.weighted_gflops << "," << (r.map ? *r.map : 0.0) << "," << ap50(r)
                    << "\n";
            }
            csv << "dfp,adaptive," << dfp_rep.weighted_gflops << ","
                << (dfp_rep.map ? *dfp_rep.map : 0.0) << "," << ap50(dfp_rep) << "\n";
        }
        return combined;
    }

    nlohmann::json flops_table() const {
        auto det = build_detector();
        DfpModel dfp(cfg_.dfp, cfg_.backbone.stage_channels[0], cfg_.backbone.m(), 0);
        const int h = cfg_.dataset.image_h, w = cfg_.dataset.image_w;
        nlohmann::json out;
        out["input_hw"] = {h, w};
        auto& per_df = out["per_df"] = nlohmann::json::array();
        for (int j = 0; j < cfg_.backbone.m(); ++j) {
            per_df.push_back({{"df", df_display(cfg_.backbone.df_candidates[j])},
                              {"backbone_flops", det->flops(h, w, j, false)},
                              {"backbone_head_flops", det->flops(h, w, j, true)}});
        }
        const auto ws = det->backbone().walk_shapes(h, w, 0);
        out["dfp_flops"] = dfp.net().flops(ws.f1_h, ws.f1_w);
        out["dfp_over_backbone_half"] =
            static_cast<double>(dfp.net().flops(ws.f1_h, ws.f1_w)) / det->flops(h, w, 0, false);
        out["detector_params"] = det->registry().param_count();
        out["dfp_params"] = dfp.registry().param_count();
        return out;
    }

    void log(const std::string& msg) const {
        std::ofstream f(out_ / "run.log", std::ios::app);
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char stamp[32];
        std::strftime(stamp, sizeof(stamp), "%F %T", std::localtime(&now));
        f << "[" << stamp << "] " << msg << "\n";
        if (!quiet_) std::cout << msg << std::endl;
    }

private:
    void write_resolved_config() const {
        nlohmann::json j = run_config_to_json(cfg_);
        j["config_hash"] = config_hash_;
        std::ofstream f(out_ / "resolved_config.json", std::ios::binary);
        DPNET_CHECK(f.good(), "cannot write resolved_config.json");
        f << j.dump(2) << "\n";
    }

    RunConfig cfg_;
    std::filesystem::path out_;
    bool quiet_;
    std::string config_hash_;
};

}  // namespace dpnet
