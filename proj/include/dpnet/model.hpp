#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpnet/backbone.hpp"
#include "dpnet/dfp.hpp"
#include "dpnet/head.hpp"

namespace dpnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float32");

// Backbone plus dense head behind one registry. The DFP lives in its own
// model (and registry) so phase-2 training cannot touch detector weights.
class Detector {
public:
    Detector(const BackboneConfig& bcfg, int num_classes, uint64_t init_seed)
        : init_rng_(init_seed) {
        backbone_ = std::make_unique<Backbone>(reg_, bcfg, init_rng_);
        HeadConfig hc;
        hc.in_channels = backbone_->out_channels();
        hc.num_classes = num_classes;
        const int copies = bcfg.shared_norm ? 1 : bcfg.m();
        head_ = std::make_unique<Head>(reg_, hc, copies, init_rng_);
    }

    ParamRegistry& registry() { return reg_; }
    const ParamRegistry& registry() const { return reg_; }
    Backbone& backbone() { return *backbone_; }
    Head& head() { return *head_; }
    int num_classes() const { return head_->config().num_classes; }
    int num_candidates() const { return backbone_->config().m(); }

    struct Forward {
        BackboneOutput bb;
        HeadOut head;
    };

    Forward forward(const Tensor& images, int j, Mode mode, OpCounter* oc = nullptr) {
        Forward f;
        f.bb = backbone_->forward(images, j, mode, oc);
        f.head = head_->forward(f.bb.f_out, j, mode, oc);
        return f;
    }

    void backward(const Tensor& d_cls, const Tensor& d_box, int j) {
        Tensor d_fout = head_->backward(d_cls, d_box);
        backbone_->backward(d_fout, j);
    }

    void release_cache() {
        backbone_->release_cache();
        head_->release_cache();
    }

    std::vector<Detection> decode_image(const Forward& f, int img, int image_h, int image_w,
                                        const DecodeConfig& dc = {}) const {
        return decode(f.head, img, f.bb.stride_y, f.bb.stride_x, image_h, image_w, dc);
    }

    uint64_t flops(int h, int w, int j, bool include_head = true) const {
        uint64_t f = backbone_->flops(h, w, j);
        if (include_head) {
            const auto ws = backbone_->walk_shapes(h, w, j);
            f += head_->flops(ws.out_h, ws.out_w);
        }
        return f;
    }

private:
    RngState init_rng_;
    ParamRegistry reg_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<Head> head_;
};

class DfpModel {
public:
    DfpModel(const DfpConfig& cfg, int in_channels, int m, uint64_t init_seed)
        : init_rng_(init_seed) {
        net_ = std::make_unique<DfpNet>(reg_, cfg, in_channels, m, init_rng_);
    }

    ParamRegistry& registry() { return reg_; }
    const ParamRegistry& registry() const { return reg_; }
    DfpNet& net() { return *net_; }

private:
    RngState init_rng_;
    ParamRegistry reg_;
    std::unique_ptr<DfpNet> net_;
};

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + weights.bin. The blob is the little-endian
// float32 concatenation of all parameters then all buffers in registry
// order; the manifest pins that order with a name hash so any external
// reordering is rejected on load.
// ---------------------------------------------------------------------------
struct CheckpointMeta {
    std::string config_hash;
    uint64_t rng_seed = 0;
    uint64_t rng_counter = 0;
};

namespace detail {

inline uint64_t name_order_hash(const std::vector<std::string>& names) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& n : names) {
        h = fnv1a(n + "\n", h);
    }
    return h;
}

}  // namespace detail

inline void save_checkpoint(const ParamRegistry& reg, const std::filesystem::path& dir,
                            const CheckpointMeta& meta) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["config_hash"] = meta.config_hash;
    manifest["rng"] = {{"seed", meta.rng_seed}, {"counter", meta.rng_counter}};

    std::vector<std::string> names;
    auto& tensors = manifest["tensors"] = nlohmann::json::array();
    std::ofstream blob(dir / "weights.bin", std::ios::binary);
    DPNET_CHECK(blob.good(), "cannot write '", (dir / "weights.bin").string(), "'");
    auto emit = [&](const std::string& name, const Tensor& t, const char* kind) {
        names.push_back(name);
        tensors.push_back({{"name", name},
                           {"shape", t.shape},
                           {"dtype", "f32"},
                           {"kind", kind}});
        blob.write(reinterpret_cast<const char*>(t.data.data()),
                   static_cast<std::streamsize>(t.numel() * sizeof(float)));
    };
    for (const auto& p : reg.params()) emit(p->name, p->tensor, "param");
    for (const auto& b : reg.buffers()) emit(b->name, b->tensor, "buffer");
    DPNET_CHECK(blob.good(), "short write to weights.bin");
    blob.close();

    manifest["name_order_hash"] = hex64(detail::name_order_hash(names));
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    mf << manifest.dump(2) << "\n";
    DPNET_CHECK(mf.good(), "cannot write '", (dir / "manifest.json").string(), "'");
}

// Loads into an already-built registry; shapes and names must line up with
// the manifest exactly. Returns the stored meta. When expect_config_hash is
// non-empty a differing stored hash is rejected.
inline CheckpointMeta load_checkpoint(ParamRegistry& reg, const std::filesystem::path& dir,
                                      const std::string& expect_config_hash = "") {
    std::ifstream mf(dir / "manifest.json");
    DPNET_CHECK(mf.good(), "cannot open '", (dir / "manifest.json").string(), "'");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        fail("manifest.json: invalid JSON: ", e.what());
    }
    CheckpointMeta meta;
    meta.config_hash = manifest.at("config_hash").get<std::string>();
    meta.rng_seed = manifest.at("rng").at("seed").get<uint64_t>();
    meta.rng_counter = manifest.at("rng").at("counter").get<uint64_t>();
    if (!expect_config_hash.empty()) {
        DPNET_CHECK(meta.config_hash == expect_config_hash,
                    "checkpoint config hash ", meta.config_hash,
                    " does not match the active config ", expect_config_hash);
    }

    std::vector<std::string> names;
    for (const auto& jt : manifest.at("tensors")) {
        names.push_back(jt.at("name").get<std::string>());
    }
    const std::string stored = manifest.at("name_order_hash").get<std::string>();
    DPNET_CHECK(stored == hex64(detail::name_order_hash(names)),
                "manifest tensor order was modified (name-order hash mismatch)");

    std::unordered_map<std::string, Tensor*> by_name;
    for (const auto& p : reg.params()) by_name[p->name] = &p->tensor;
    for (const auto& b : reg.buffers()) by_name[b->name] = &b->tensor;
    DPNET_CHECK(by_name.size() == names.size(), "checkpoint has ", names.size(),
                " tensors, model expects ", by_name.size());

    std::ifstream blob(dir / "weights.bin", std::ios::binary);
    DPNET_CHECK(blob.good(), "cannot open '", (dir / "weights.bin").string(), "'");
    blob.seekg(0, std::ios::end);
    const auto blob_len = static_cast<size_t>(blob.tellg());
    blob.seekg(0);
    size_t expected_len = 0;
    for (const auto& jt : manifest.at("tensors")) {
        const auto shape = jt.at("shape").get<std::array<int, 4>>();
        expected_len += static_cast<size_t>(shape[0]) * shape[1] * shape[2] * shape[3] *
                        sizeof(float);
    }
    DPNET_CHECK(blob_len == expected_len, "weights.bin holds ", blob_len, " bytes, manifest sums to ",
                expected_len);

    for (const auto& jt : manifest.at("tensors")) {
        const auto name = jt.at("name").get<std::string>();
        const auto shape = jt.at("shape").get<std::array<int, 4>>();
        DPNET_CHECK(jt.at("dtype").get<std::string>() == "f32", "tensor '", name,
                    "': unsupported dtype");
        auto it = by_name.find(name);
        DPNET_CHECK(it != by_name.end(), "checkpoint tensor '", name, "' unknown to this model");
        Tensor& t = *it->second;
        DPNET_CHECK(t.shape == shape, "tensor '", name, "': checkpoint shape mismatch");
        blob.read(reinterpret_cast<char*>(t.data.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
        DPNET_CHECK(blob.gcount() == static_cast<std::streamsize>(t.numel() * sizeof(float)),
                    "weights.bin truncated while reading '", name, "'");
    }
    return meta;
}

// Digest over every parameter and buffer byte; used for freeze assertions.
inline std::string registry_digest(const ParamRegistry& reg) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : reg.params()) {
        h = fnv1a(p->name, h);
        h = fnv1a_bytes(p->tensor.data.data(), p->tensor.numel() * sizeof(float), h);
    }
    for (const auto& b : reg.buffers()) {
        h = fnv1a(b->name, h);
        h = fnv1a_bytes(b->tensor.data.data(), b->tensor.numel() * sizeof(float), h);
    }
    return hex64(h);
}

}  // namespace dpnet
