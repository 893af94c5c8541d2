#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dpnet/data.hpp"

using namespace dpnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("dpnet_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("generator is deterministic per seed") {
    DatasetConfig cfg;
    cfg.num_images = 6;
    cfg.seed = 99;
    Dataset a = generate_dataset(cfg);
    Dataset b = generate_dataset(cfg);
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a.images[i].rgb == b.images[i].rgb);
        REQUIRE(a.annotations[i].boxes == b.annotations[i].boxes);
        REQUIRE(a.annotations[i].labels == b.annotations[i].labels);
    }
    // and the files round it out byte-identically
    auto d1 = temp_dir("det1"), d2 = temp_dir("det2");
    save_dataset(a, d1);
    save_dataset(b, d2);
    REQUIRE(slurp(d1 / "annotations.json") == slurp(d2 / "annotations.json"));
    REQUIRE(slurp(d1 / "images/img_000000.ppm") == slurp(d2 / "images/img_000000.ppm"));
    REQUIRE(slurp(d1 / "dataset_manifest.json") == slurp(d2 / "dataset_manifest.json"));

    cfg.seed = 100;
    Dataset c = generate_dataset(cfg);
    REQUIRE(c.images[0].rgb != a.images[0].rgb);
}

TEST_CASE("zero objects per image is a valid dataset") {
    DatasetConfig cfg;
    cfg.num_images = 3;
    cfg.objects_min = 0;
    cfg.objects_max = 0;
    Dataset ds = generate_dataset(cfg);
    for (const auto& a : ds.annotations) REQUIRE(a.size() == 0);
    auto dir = temp_dir("empty");
    save_dataset(ds, dir);
    Dataset back = load_dataset(dir);
    REQUIRE(back.size() == 3);
}

TEST_CASE("box size histogram matches the mixture weights within 2%") {
    DatasetConfig cfg;
    cfg.num_images = 2900;  // ~10k boxes at 3.5 objects/image
    cfg.seed = 7;
    Dataset ds = generate_dataset(cfg);
    size_t counts[3] = {0, 0, 0};
    size_t total = 0;
    for (const auto& a : ds.annotations) {
        for (const Box& b : a.boxes) {
            const double size = std::sqrt(b.area());
            // mixture ranges [6,12], [14,24], [28,48]; split the gaps
            const int bucket = size < 13.0 ? 0 : (size < 26.0 ? 1 : 2);
            ++counts[bucket];
            ++total;
        }
    }
    REQUIRE(total > 9000);
    const double expected[3] = {0.5, 0.3, 0.2};
    for (int i = 0; i < 3; ++i) {
        const double frac = static_cast<double>(counts[i]) / total;
        CAPTURE(i, frac, expected[i]);
        REQUIRE(std::abs(frac - expected[i]) < 0.02);
    }
}

TEST_CASE("annotation boxes tightly bound the rendered silhouettes") {
    DatasetConfig cfg;
    cfg.seed = 21;
    for (int id = 0; id < 40; ++id) {
        GeneratedImage g = generate_image(cfg, id);
        const int w = g.image.w;
        for (size_t obj = 0; obj < g.annotation.size(); ++obj) {
            const Box& box = g.annotation.boxes[obj];
            bool touch_left = false, touch_right = false, touch_top = false, touch_bot = false;
            for (int p : g.object_pixels[obj]) {
                const double px = p % w, py = p / w;
                // pixel [px, px+1) x [py, py+1) inside the box
                REQUIRE(px >= box.x1);
                REQUIRE(px + 1 <= box.x2);
                REQUIRE(py >= box.y1);
                REQUIRE(py + 1 <= box.y2);
                touch_left |= px == box.x1;
                touch_right |= px + 1 == box.x2;
                touch_top |= py == box.y1;
                touch_bot |= py + 1 == box.y2;
            }
            REQUIRE(touch_left);
            REQUIRE(touch_right);
            REQUIRE(touch_top);
            REQUIRE(touch_bot);
        }
    }
}

TEST_CASE("objects keep a contrast margin against their local background") {
    DatasetConfig cfg;
    cfg.seed = 33;
    cfg.num_images = 20;
    for (int id = 0; id < cfg.num_images; ++id) {
        GeneratedImage g = generate_image(cfg, id);
        for (size_t obj = 0; obj < g.annotation.size(); ++obj) {
            REQUIRE(!g.object_pixels[obj].empty());
        }
    }
}

TEST_CASE("dataset round-trips through disk") {
    DatasetConfig cfg;
    cfg.num_images = 4;
    cfg.seed = 3;
    Dataset ds = generate_dataset(cfg);
    auto dir = temp_dir("roundtrip");
    save_dataset(ds, dir, &cfg);
    Dataset back = load_dataset(dir);
    REQUIRE(back.size() == ds.size());
    REQUIRE(back.class_names == ds.class_names);
    for (size_t i = 0; i < ds.size(); ++i) {
        REQUIRE(back.images[i].rgb == ds.images[i].rgb);
        REQUIRE(back.annotations[i].boxes == ds.annotations[i].boxes);
        REQUIRE(back.annotations[i].labels == ds.annotations[i].labels);
    }
}

TEST_CASE("loader rejects malformed inputs with distinct diagnostics") {
    DatasetConfig cfg;
    cfg.num_images = 2;
    cfg.seed = 5;
    Dataset ds = generate_dataset(cfg);

    // bbox with x2 <= x1, naming the annotation index
    {
        auto dir = temp_dir("badbox");
        save_dataset(ds, dir);
        nlohmann::json root;
        std::ifstream(dir / "annotations.json") >> root;
        root["annotations"][0]["bbox"] = {50.0, 10.0, 40.0, 20.0};
        std::ofstream(dir / "annotations.json") << root.dump();
        try {
            load_dataset(dir);
            FAIL("expected rejection");
        } catch (const value_error& e) {
            REQUIRE(std::string(e.what()).find("annotation #0") != std::string::npos);
            REQUIRE(std::string(e.what()).find("degenerate") != std::string::npos);
        }
    }
    // dangling image id
    {
        auto dir = temp_dir("dangling");
        save_dataset(ds, dir);
        nlohmann::json root;
        std::ifstream(dir / "annotations.json") >> root;
        root["annotations"][0]["image_id"] = 500;
        std::ofstream(dir / "annotations.json") << root.dump();
        try {
            load_dataset(dir);
            FAIL("expected rejection");
        } catch (const value_error& e) {
            REQUIRE(std::string(e.what()).find("dangling image_id") != std::string::npos);
        }
    }
    // PPM with wrong maxval
    {
        auto dir = temp_dir("maxval");
        save_dataset(ds, dir);
        auto img0 = dir / "images/img_000000.ppm";
        std::string bytes = slurp(img0);
        const auto pos = bytes.find("255");
        bytes.replace(pos, 3, "127");
        std::ofstream(img0, std::ios::binary) << bytes;
        try {
            load_dataset(dir);
            FAIL("expected rejection");
        } catch (const value_error& e) {
            REQUIRE(std::string(e.what()).find("maxval") != std::string::npos);
        }
    }
    // bad magic
    {
        auto dir = temp_dir("magic");
        save_dataset(ds, dir);
        auto img0 = dir / "images/img_000000.ppm";
        std::string bytes = slurp(img0);
        bytes[1] = '5';
        std::ofstream(img0, std::ios::binary) << bytes;
        try {
            load_dataset(dir);
            FAIL("expected rejection");
        } catch (const value_error& e) {
            REQUIRE(std::string(e.what()).find("magic") != std::string::npos);
        }
    }
    // truncated payload
    {
        auto dir = temp_dir("trunc");
        save_dataset(ds, dir);
        auto img0 = dir / "images/img_000000.ppm";
        std::string bytes = slurp(img0);
        bytes.resize(bytes.size() - 100);
        std::ofstream(img0, std::ios::binary) << bytes;
        REQUIRE_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("truncated"));
    }
}

TEST_CASE("dataset config validation") {
    DatasetConfig cfg;
    cfg.size_mixture = {{0.7, 6, 12}, {0.2, 14, 24}};  // weights sum to 0.9
    REQUIRE_THROWS_AS(cfg.validate(), value_error);
    cfg = DatasetConfig{};
    cfg.objects_min = 5;
    cfg.objects_max = 2;
    REQUIRE_THROWS_AS(cfg.validate(), value_error);
    REQUIRE_NOTHROW(DatasetConfig{}.validate());
}

TEST_CASE("to_tensor normalizes into [-0.5, 0.5]") {
    DatasetConfig cfg;
    cfg.num_images = 2;
    cfg.seed = 17;
    Dataset ds = generate_dataset(cfg);
    Tensor t = to_tensor(ds, {0, 1});
    REQUIRE(t.shape == std::array<int, 4>{2, 3, 128, 128});
    for (float v : t.data) {
        REQUIRE(v >= -0.5f);
        REQUIRE(v <= 0.5f);
    }
}
