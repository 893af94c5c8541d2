#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpnet/boxes.hpp"
#include "dpnet/common.hpp"
#include "dpnet/rng.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

struct SizeBucket {
    double weight = 1.0;
    double lo = 6.0;
    double hi = 12.0;
};

struct DatasetConfig {
    int num_images = 2000;
    int image_h = 128;
    int image_w = 128;
    std::vector<std::string> class_names = {"rectangle", "ellipse", "cross"};
    // Every image draws one bucket; all of its objects take sizes from that
    // bucket. Object size, not scene clutter, is what decides how much
    // resolution an image needs, so the buckets split the dataset into
    // images that genuinely require different down-sampling factors.
    std::vector<SizeBucket> size_mixture = {{0.5, 6, 12}, {0.3, 14, 24}, {0.2, 28, 48}};
    int objects_min = 1;
    int objects_max = 6;
    double noise_sigma = 0.05;
    uint64_t seed = 0;

    void validate() const {
        DPNET_CHECK(num_images >= 0, "dataset: num_images < 0");
        DPNET_CHECK(image_h >= 32 && image_w >= 32, "dataset: image size below 32");
        DPNET_CHECK(!class_names.empty(), "dataset: no classes");
        DPNET_CHECK(!size_mixture.empty(), "dataset: empty size mixture");
        double wsum = 0.0;
        for (const auto& b : size_mixture) {
            DPNET_CHECK(b.weight >= 0 && b.lo > 0 && b.hi >= b.lo && b.hi < std::min(image_h, image_w),
                        "dataset: bad size bucket");
            wsum += b.weight;
        }
        DPNET_CHECK(std::abs(wsum - 1.0) < 1e-9, "dataset: bucket weights must sum to 1, got ",
                    wsum);
        DPNET_CHECK(objects_min >= 0 && objects_max >= objects_min, "dataset: bad object count");
        DPNET_CHECK(noise_sigma >= 0.0, "dataset: negative noise sigma");
    }
};

struct Image {
    int h = 0, w = 0;
    std::vector<uint8_t> rgb;  // interleaved, row-major

    size_t idx(int y, int x, int c) const {
        return (static_cast<size_t>(y) * w + x) * 3 + c;
    }
};

struct Dataset {
    std::vector<Image> images;
    std::vector<GtAnnotation> annotations;  // index-aligned with images
    std::vector<std::string> class_names;

    size_t size() const { return images.size(); }
};

// Batch of images as a normalized float tensor in [-0.5, 0.5].
inline Tensor to_tensor(const Dataset& ds, const std::vector<int>& ids) {
    DPNET_CHECK(!ids.empty(), "to_tensor: empty batch");
    const Image& first = ds.images[ids[0]];
    Tensor t(static_cast<int>(ids.size()), 3, first.h, first.w);
    for (size_t b = 0; b < ids.size(); ++b) {
        const Image& im = ds.images[ids[b]];
        DPNET_CHECK(im.h == first.h && im.w == first.w, "to_tensor: mixed image sizes");
        for (int y = 0; y < im.h; ++y) {
            for (int x = 0; x < im.w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    t.at(static_cast<int>(b), c, y, x) =
                        static_cast<float>(im.rgb[im.idx(y, x, c)]) / 255.0f - 0.5f;
                }
            }
        }
    }
    return t;
}

namespace detail {

// Smooth low-frequency background plus per-pixel gaussian noise, in [0,1].
inline std::vector<float> textured_background(int h, int w, double sigma, RngState& rng) {
    const int cell = 16;
    const int gh = h / cell + 2, gw = w / cell + 2;
    std::vector<float> grid(static_cast<size_t>(gh) * gw * 3);
    for (auto& v : grid) v = static_cast<float>(rng.uniform(0.25, 0.75));
    std::vector<float> img(static_cast<size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y) {
        const double gy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(gy);
        const double fy = gy - y0;
        for (int x = 0; x < w; ++x) {
            const double gx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(gx);
            const double fx = gx - x0;
            for (int c = 0; c < 3; ++c) {
                auto g = [&](int yy, int xx) {
                    return grid[(static_cast<size_t>(yy) * gw + xx) * 3 + c];
                };
                const double v = (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x0 + 1)) +
                                 fy * ((1 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1));
                img[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<float>(std::clamp(v + sigma * rng.normal(), 0.0, 1.0));
            }
        }
    }
    return img;
}

struct Silhouette {
    int cls = 0;
    double cx = 0, cy = 0, half_w = 0, half_h = 0;

    bool covers(double px, double py) const {
        const double dx = px - cx, dy = py - cy;
        if (std::abs(dx) > half_w || std::abs(dy) > half_h) return false;
        switch (cls) {
            case 0:  // rectangle
                return true;
            case 1:  // ellipse
                return (dx / half_w) * (dx / half_w) + (dy / half_h) * (dy / half_h) <= 1.0;
            default:  // cross of two bars, each a third of the extent
                return std::abs(dx) <= half_w / 3.0 || std::abs(dy) <= half_h / 3.0;
        }
    }

    Box bounds() const { return {cx - half_w, cy - half_h, cx + half_w, cy + half_h}; }
};

}  // namespace detail

struct GeneratedImage {
    Image image;
    GtAnnotation annotation;
    // per-object painted pixels (flat y*w+x), for the tight-box checks
    std::vector<std::vector<int>> object_pixels;
    int skipped_placements = 0;
};

// Deterministic per-image generation: stream `fork(image_id)` of the dataset
// seed. Objects are placed mutually disjoint, at least 60% inside the frame,
// with a mean-channel contrast of at least 0.3 against the local background.
inline GeneratedImage generate_image(const DatasetConfig& cfg, int image_id) {
    RngState rng = RngState(cfg.seed).fork(static_cast<uint64_t>(image_id));
    const int h = cfg.image_h, w = cfg.image_w;
    GeneratedImage out;
    out.annotation.image_id = image_id;
    std::vector<float> canvas = detail::textured_background(h, w, cfg.noise_sigma, rng);

    // one size bucket per image
    const double pick = rng.uniform();
    size_t bucket = 0;
    double acc = 0.0;
    for (size_t i = 0; i < cfg.size_mixture.size(); ++i) {
        acc += cfg.size_mixture[i].weight;
        if (pick < acc) {
            bucket = i;
            break;
        }
        bucket = i;
    }
    const SizeBucket& sb = cfg.size_mixture[bucket];

    const int count = static_cast<int>(rng.randint(cfg.objects_min, cfg.objects_max));
    std::vector<Box> placed;
    for (int obj = 0; obj < count; ++obj) {
        const int cls = static_cast<int>(rng.randint(0, static_cast<int>(cfg.class_names.size()) - 1));
        const double size = rng.uniform(sb.lo, sb.hi);
        const double aspect = std::sqrt(rng.uniform(0.75, 1.0 / 0.75));
        detail::Silhouette sil;
        sil.cls = cls;
        sil.half_w = size * aspect / 2.0;
        sil.half_h = size / aspect / 2.0;

        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            sil.cx = rng.uniform(0, w);
            sil.cy = rng.uniform(0, h);
            const Box b = sil.bounds();
            const Box clipped{std::max(0.0, b.x1), std::max(0.0, b.y1),
                              std::min<double>(w, b.x2), std::min<double>(h, b.y2)};
            if (clipped.area() < 0.6 * b.area()) continue;
            bool overlaps = false;
            const Box inflated{b.x1 - 1, b.y1 - 1, b.x2 + 1, b.y2 + 1};
            for (const Box& p : placed) {
                if (iou(inflated, p) > 0.0) {
                    overlaps = true;
                    break;
                }
            }
            ok = !overlaps;
        }
        if (!ok) {
            ++out.skipped_placements;
            continue;
        }

        // local background mean over the (clipped) silhouette box
        const Box b = sil.bounds();
        const int x1 = std::max(0, static_cast<int>(b.x1)), y1 = std::max(0, static_cast<int>(b.y1));
        const int x2 = std::min(w, static_cast<int>(std::ceil(b.x2)));
        const int y2 = std::min(h, static_cast<int>(std::ceil(b.y2)));
        double bg_mean = 0.0;
        int bg_n = 0;
        for (int y = y1; y < y2; ++y) {
            for (int x = x1; x < x2; ++x) {
                for (int c = 0; c < 3; ++c) bg_mean += canvas[(static_cast<size_t>(y) * w + x) * 3 + c];
                ++bg_n;
            }
        }
        bg_mean /= std::max(1, bg_n) * 3.0;

        float color[3];
        bool contrast_ok = false;
        for (int attempt = 0; attempt < 20 && !contrast_ok; ++attempt) {
            double mean = 0.0;
            for (float& c : color) {
                c = static_cast<float>(rng.uniform());
                mean += c;
            }
            contrast_ok = std::abs(mean / 3.0 - bg_mean) >= 0.3;
        }
        if (!contrast_ok) {
            const float forced =
                static_cast<float>(std::clamp(bg_mean + (bg_mean < 0.5 ? 0.35 : -0.35), 0.0, 1.0));
            for (float& c : color) c = forced;
        }

        std::vector<int> pixels;
        for (int y = std::max(0, y1); y < y2; ++y) {
            for (int x = std::max(0, x1); x < x2; ++x) {
                if (!sil.covers(x + 0.5, y + 0.5)) continue;
                pixels.push_back(y * w + x);
                for (int c = 0; c < 3; ++c) canvas[(static_cast<size_t>(y) * w + x) * 3 + c] = color[c];
            }
        }
        if (pixels.empty()) {
            ++out.skipped_placements;
            continue;
        }
        int mnx = w, mny = h, mxx = -1, mxy = -1;
        for (int p : pixels) {
            mnx = std::min(mnx, p % w);
            mxx = std::max(mxx, p % w);
            mny = std::min(mny, p / w);
            mxy = std::max(mxy, p / w);
        }
        placed.push_back(b);
        out.annotation.boxes.push_back({static_cast<double>(mnx), static_cast<double>(mny),
                                        static_cast<double>(mxx + 1), static_cast<double>(mxy + 1)});
        out.annotation.labels.push_back(cls);
        out.object_pixels.push_back(std::move(pixels));
    }

    out.image.h = h;
    out.image.w = w;
    out.image.rgb.resize(static_cast<size_t>(h) * w * 3);
    for (size_t i = 0; i < out.image.rgb.size(); ++i) {
        out.image.rgb[i] = static_cast<uint8_t>(std::lround(canvas[i] * 255.0));
    }
    return out;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.class_names = cfg.class_names;
    ds.images.resize(cfg.num_images);
    ds.annotations.resize(cfg.num_images);
    parallel_for(cfg.num_images, [&](int64_t i) {
        GeneratedImage g = generate_image(cfg, static_cast<int>(i));
        ds.images[i] = std::move(g.image);
        ds.annotations[i] = std::move(g.annotation);
    });
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk format: binary PPM (P6, maxval 255) per image plus one
// annotations.json: {classes, images:[{id,file,h,w}], annotations:[{image_id,
// bbox:[x1,y1,x2,y2], class}]}. dataset_manifest.json echoes the generator
// config with a content hash.
// ---------------------------------------------------------------------------
namespace detail {

inline std::string image_filename(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%06d.ppm", id);
    return buf;
}

inline void write_ppm(const std::filesystem::path& path, const Image& im) {
    std::ofstream f(path, std::ios::binary);
    DPNET_CHECK(f.good(), "cannot open '", path.string(), "' for writing");
    f << "P6\n" << im.w << " " << im.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(im.rgb.data()),
            static_cast<std::streamsize>(im.rgb.size()));
    DPNET_CHECK(f.good(), "short write to '", path.string(), "'");
}

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    DPNET_CHECK(f.good(), "cannot open image '", path.string(), "'");
    std::string magic;
    f >> magic;
    DPNET_CHECK(magic == "P6", "'", path.string(), "': bad PPM magic '", magic, "'");
    int w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    DPNET_CHECK(w > 0 && h > 0, "'", path.string(), "': bad PPM dimensions ", w, "x", h);
    DPNET_CHECK(maxval == 255, "'", path.string(), "': PPM maxval must be 255, got ", maxval);
    f.get();  // single whitespace after header
    Image im;
    im.w = w;
    im.h = h;
    im.rgb.resize(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()));
    DPNET_CHECK(f.gcount() == static_cast<std::streamsize>(im.rgb.size()), "'", path.string(),
                "': truncated pixel payload");
    return im;
}

}  // namespace detail

inline uint64_t dataset_content_hash(const Dataset& ds, const std::string& ann_json) {
    uint64_t hash = fnv1a(ann_json);
    for (const Image& im : ds.images) hash = fnv1a_bytes(im.rgb.data(), im.rgb.size(), hash);
    return hash;
}

inline std::string annotations_to_json(const Dataset& ds) {
    nlohmann::json root;
    root["classes"] = ds.class_names;
    auto& images = root["images"] = nlohmann::json::array();
    auto& anns = root["annotations"] = nlohmann::json::array();
    for (size_t i = 0; i < ds.images.size(); ++i) {
        images.push_back({{"id", i},
                          {"file", detail::image_filename(static_cast<int>(i))},
                          {"h", ds.images[i].h},
                          {"w", ds.images[i].w}});
        const GtAnnotation& a = ds.annotations[i];
        for (size_t k = 0; k < a.size(); ++k) {
            anns.push_back({{"image_id", i},
                            {"bbox", {a.boxes[k].x1, a.boxes[k].y1, a.boxes[k].x2, a.boxes[k].y2}},
                            {"class", a.labels[k]}});
        }
    }
    return root.dump(2) + "\n";
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                         const DatasetConfig* cfg_echo = nullptr) {
    std::filesystem::create_directories(dir / "images");
    for (size_t i = 0; i < ds.images.size(); ++i) {
        detail::write_ppm(dir / "images" / detail::image_filename(static_cast<int>(i)),
                          ds.images[i]);
    }
    const std::string ann = annotations_to_json(ds);
    {
        std::ofstream f(dir / "annotations.json", std::ios::binary);
        f << ann;
    }
    nlohmann::json manifest;
    manifest["content_hash"] = hex64(dataset_content_hash(ds, ann));
    manifest["num_images"] = ds.images.size();
    if (cfg_echo) {
        nlohmann::json c;
        c["num_images"] = cfg_echo->num_images;
        c["image_hw"] = {cfg_echo->image_h, cfg_echo->image_w};
        c["classes"] = cfg_echo->class_names;
        c["objects_per_image"] = {cfg_echo->objects_min, cfg_echo->objects_max};
        c["noise_sigma"] = cfg_echo->noise_sigma;
        c["seed"] = cfg_echo->seed;
        auto& mix = c["size_mixture"] = nlohmann::json::array();
        for (const auto& b : cfg_echo->size_mixture) mix.push_back({b.weight, b.lo, b.hi});
        manifest["config"] = c;
    }
    std::ofstream mf(dir / "dataset_manifest.json", std::ios::binary);
    mf << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto ann_path = dir / "annotations.json";
    std::ifstream f(ann_path, std::ios::binary);
    DPNET_CHECK(f.good(), "cannot open '", ann_path.string(), "'");
    nlohmann::json root;
    try {
        f >> root;
    } catch (const nlohmann::json::exception& e) {
        fail("'", ann_path.string(), "': invalid JSON: ", e.what());
    }
    DPNET_CHECK(root.contains("classes") && root.contains("images") &&
                    root.contains("annotations"),
                "'", ann_path.string(), "': missing classes/images/annotations");

    Dataset ds;
    ds.class_names = root["classes"].get<std::vector<std::string>>();
    const auto& images = root["images"];
    ds.images.resize(images.size());
    ds.annotations.resize(images.size());
    std::vector<int> ids;
    for (const auto& ji : images) {
        const int id = ji.at("id").get<int>();
        DPNET_CHECK(id >= 0 && id < static_cast<int>(images.size()),
                    "annotations: image id ", id, " out of range");
        ds.images[id] = detail::read_ppm(dir / "images" / ji.at("file").get<std::string>());
        DPNET_CHECK(ds.images[id].h == ji.at("h").get<int>() &&
                        ds.images[id].w == ji.at("w").get<int>(),
                    "image ", id, ": PPM size differs from the annotation record");
        ds.annotations[id].image_id = id;
    }
    size_t index = 0;
    for (const auto& ja : root["annotations"]) {
        const int id = ja.at("image_id").get<int>();
        DPNET_CHECK(id >= 0 && id < static_cast<int>(ds.images.size()), "annotation #", index,
                    ": dangling image_id ", id);
        const auto bb = ja.at("bbox").get<std::vector<double>>();
        DPNET_CHECK(bb.size() == 4, "annotation #", index, ": bbox must have 4 entries");
        Box box{bb[0], bb[1], bb[2], bb[3]};
        DPNET_CHECK(box.x2 > box.x1 && box.y2 > box.y1, "annotation #", index,
                    ": degenerate bbox (x2 <= x1 or y2 <= y1)");
        DPNET_CHECK(box.x1 >= 0 && box.y1 >= 0 && box.x2 <= ds.images[id].w &&
                        box.y2 <= ds.images[id].h,
                    "annotation #", index, ": bbox outside image bounds");
        const int cls = ja.at("class").get<int>();
        DPNET_CHECK(cls >= 0 && cls < static_cast<int>(ds.class_names.size()), "annotation #",
                    index, ": class ", cls, " out of range");
        ds.annotations[id].boxes.push_back(box);
        ds.annotations[id].labels.push_back(cls);
        ++index;
    }
    return ds;
}

}  // namespace dpnet
