#include <catch2/catch_amalgamated.hpp>

#include "dpnet/config.hpp"

using namespace dpnet;

TEST_CASE("decimal df values map to exact rationals") {
    REQUIRE(decimal_to_rational(0.5) == Rational{1, 2});
    REQUIRE(decimal_to_rational(0.33) == Rational{1, 3});
    REQUIRE(decimal_to_rational(0.25) == Rational{1, 4});
    REQUIRE(decimal_to_rational(1.0) == Rational{1, 1});
    REQUIRE_THROWS_AS(decimal_to_rational(0.0), value_error);
    REQUIRE_THROWS_AS(decimal_to_rational(1.5), value_error);
    REQUIRE(df_display({1, 3}) == "0.33");
    REQUIRE(df_display({1, 2}) == "0.5");
}

TEST_CASE("run config parses, validates, round-trips") {
    nlohmann::json j = {
        {"schema_version", 1},
        {"seed", 7},
        {"dataset",
         {{"num_train", 50},
          {"num_val", 10},
          {"image_hw", {64, 64}},
          {"size_mixture", {{0.6, 6, 10}, {0.4, 20, 30}}}}},
        {"backbone", {{"df_candidates", {0.5, 0.33, 0.25}}, {"norm", "shared"}}},
        {"train", {{"epochs", 2}, {"batch_size", 4}, {"lr", 0.01}, {"lr_decay_epochs", nlohmann::json::array()}}},
    };
    RunConfig cfg = parse_run_config(j);
    REQUIRE(cfg.seed == 7);
    REQUIRE(cfg.num_train == 50);
    REQUIRE(cfg.dataset.image_h == 64);
    REQUIRE(cfg.backbone.shared_norm);
    REQUIRE(cfg.backbone.df_candidates[1] == Rational{1, 3});
    REQUIRE(cfg.train.seed == 7);

    // serialization is stable under a parse cycle
    const auto dumped = run_config_to_json(cfg);
    RunConfig back = parse_run_config(dumped);
    REQUIRE(run_config_to_json(back) == dumped);
    REQUIRE(run_config_hash(back) == run_config_hash(cfg));
}

TEST_CASE("unknown config keys are rejected") {
    nlohmann::json j = {{"schema_version", 1}, {"sedd", 7}};
    REQUIRE_THROWS_WITH(parse_run_config(j), Catch::Matchers::ContainsSubstring("unknown key"));

    nlohmann::json j2 = {{"train", {{"learning_rate", 0.1}}}};
    REQUIRE_THROWS_WITH(parse_run_config(j2),
                        Catch::Matchers::ContainsSubstring("unknown key 'learning_rate'"));

    nlohmann::json j3 = {{"schema_version", 2}};
    REQUIRE_THROWS_WITH(parse_run_config(j3),
                        Catch::Matchers::ContainsSubstring("schema_version"));
}

TEST_CASE("config hash tracks semantic changes only") {
    RunConfig a = parse_run_config(nlohmann::json::object());
    RunConfig b = a;
    REQUIRE(run_config_hash(a) == run_config_hash(b));
    b.train.lr *= 2;
    REQUIRE(run_config_hash(a) != run_config_hash(b));
    RunConfig c = a;
    c.backbone.shared_norm = true;
    REQUIRE(run_config_hash(a) != run_config_hash(c));
}

TEST_CASE("committed preset configs parse") {
    for (const char* name : {"configs/toy.json", "configs/paper.json", "configs/mini.json"}) {
        std::filesystem::path p = std::filesystem::path(DPNET_SOURCE_DIR) / name;
        REQUIRE_NOTHROW(load_run_config(p));
    }
    RunConfig toy =
        load_run_config(std::filesystem::path(DPNET_SOURCE_DIR) / "configs/toy.json");
    REQUIRE(toy.num_train == 2000);
    REQUIRE(toy.num_val == 500);
    REQUIRE(toy.train.threshold == 1.1);
    REQUIRE(toy.backbone.df_candidates.size() == 3);

    RunConfig paper =
        load_run_config(std::filesystem::path(DPNET_SOURCE_DIR) / "configs/paper.json");
    REQUIRE(paper.train.lr == 0.02);
    REQUIRE(paper.train.batch_size == 16);
    REQUIRE(paper.train.lr_decay_epochs == std::vector<int>{8, 11});
}
