// dpnet: train and evaluate a detector whose backbone down-samples its
// feature map by an input-dependent factor chosen by a lightweight predictor.
//
// Typical run:
//   dpnet gen-data  --config configs/toy.json --out out
//   dpnet train     --config configs/toy.json --out out
//   dpnet labels    --config configs/toy.json --out out
//   dpnet train-dfp --config configs/toy.json --out out
//   dpnet eval      --config configs/toy.json --out out --policy dfp
//   dpnet report    --config configs/toy.json --out out

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "dpnet/pipeline.hpp"

namespace {

struct GlobalOpts {
    std::string config_path;
    std::string out_dir = "out";
    bool quiet = false;
    bool has_seed = false;
    uint64_t seed = 0;
};

dpnet::Pipeline make_pipeline(const GlobalOpts& g) {
    DPNET_CHECK(!g.config_path.empty(), "--config is required");
    dpnet::RunConfig cfg = dpnet::load_run_config(g.config_path);
    if (g.has_seed) {
        cfg.seed = g.seed;
        cfg.train.seed = g.seed;
    }
    return dpnet::Pipeline(cfg, g.out_dir, g.quiet);
}

int run_gradcheck(const GlobalOpts& g) {
    const auto entries = dpnet::run_gradient_suite();
    bool ok = true;
    for (const auto& e : entries) {
        ok = ok && e.max_rel_error < 1e-3;
        if (!g.quiet || e.max_rel_error >= 1e-3) {
            std::printf("%-24s max_rel_error %.3e over %zu coords  %s\n", e.name.c_str(),
                        e.max_rel_error, e.checked, e.max_rel_error < 1e-3 ? "ok" : "FAIL");
        }
    }
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic down-sampling detector"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--config", g.config_path, "run config JSON")->envname("DPNET_CONFIG");
    app.add_option("--out", g.out_dir, "output directory (default: out)");
    app.add_flag("--quiet", g.quiet, "suppress progress output");
    auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/val datasets");
    auto* train = app.add_subcommand("train", "phase 1: mixed down-sampling-factor training");
    auto* labels = app.add_subcommand("labels", "build the guidance-loss label cache");
    auto* traindfp = app.add_subcommand("train-dfp", "phase 2: train the factor predictor");
    auto* eval = app.add_subcommand("eval", "evaluate one policy on the validation split");
    std::string policy = "dfp";
    eval->add_option("--policy", policy, "dfp | fixed:<df> | random:<seed>");
    auto* flops = app.add_subcommand("flops", "print the per-df flop accounting");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    auto* report = app.add_subcommand("report", "evaluate all policies and write report.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    g.has_seed = seed_opt->count() > 0;

    try {
        if (gradcheck->parsed()) return run_gradcheck(g);

        dpnet::Pipeline pipe = make_pipeline(g);
        if (gen->parsed()) {
            pipe.gen_data();
        } else if (train->parsed()) {
            pipe.train();
        } else if (labels->parsed()) {
            pipe.labels();
        } else if (traindfp->parsed()) {
            pipe.train_dfp_stage();
        } else if (eval->parsed()) {
            const dpnet::EvalReport rep = pipe.eval_policy(policy);
            if (!g.quiet) {
                std::printf("policy %s: map %s, weighted %.4f GFLOPs (%.1f%% vs fixed %s)\n",
                            rep.policy.c_str(),
                            rep.map ? dpnet::format_msg(*rep.map).c_str() : "n/a",
                            rep.weighted_gflops, rep.savings_vs_fixed_half_pct,
                            dpnet::df_display(pipe.config().backbone.df_candidates[0]).c_str());
            }
        } else if (flops->parsed()) {
            const nlohmann::json table = pipe.flops_table();
            std::ofstream f(pipe.out() / "flops.json", std::ios::binary);
            f << table.dump(2) << "\n";
            std::cout << table.dump(2) << std::endl;
        } else if (report->parsed()) {
            const nlohmann::json combined = pipe.full_report();
            if (!g.quiet) std::cout << combined["comparison"].dump(2) << std::endl;
        }
    } catch (const dpnet::value_error& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}
