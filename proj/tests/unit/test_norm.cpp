#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dpnet/gradcheck.hpp"
#include "dpnet/norm.hpp"
#include "dpnet/rng.hpp"

using namespace dpnet;

namespace {

Tensor random_input(int n, int c, int h, int w, uint64_t seed, float mean = 0.0f) {
    RngState rng(seed);
    Tensor x(n, c, h, w);
    x.fill_normal(rng, 1.0f);
    for (auto& v : x.data) v += mean;
    return x;
}

}  // namespace

TEST_CASE("anm fresh state per copy") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 4, 3);
    for (int j = 0; j < 3; ++j) {
        const auto s = anm.state_of(j);
        for (int c = 0; c < 4; ++c) {
            REQUIRE(s.gamma.data[c] == 1.0f);
            REQUIRE(s.beta.data[c] == 0.0f);
            REQUIRE(s.running_mean.data[c] == 0.0f);
            REQUIRE(s.running_var.data[c] == 1.0f);
        }
    }
    REQUIRE_THROWS_AS(anm.state_of(3), value_error);
}

TEST_CASE("anm train forward normalizes to zero mean unit variance") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 3, 3);
    Tensor x = random_input(4, 3, 6, 6, 77, 2.5f);
    Tensor y = anm.forward(x, 1, Mode::train);
    const size_t plane = 36;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int n = 0; n < 4; ++n) {
            const float* p = y.data.data() + y.index(n, c, 0, 0);
            for (size_t i = 0; i < plane; ++i) {
                sum += p[i];
                sq += static_cast<double>(p[i]) * p[i];
            }
        }
        const double cnt = 4.0 * plane;
        REQUIRE(std::abs(sum / cnt) < 1e-5);
        REQUIRE(sq / cnt == Catch::Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("anm running stats update rule") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 1, 2);
    Tensor x(2, 1, 2, 2);
    x.data = {1, 2, 3, 4, 5, 6, 7, 8};
    anm.forward(x, 0, Mode::train);
    const double batch_mean = 4.5;
    double var = 0.0;
    for (float v : x.data) var += (v - batch_mean) * (v - batch_mean);
    const double unbiased = var / 7.0;
    const auto s = anm.state_of(0);
    REQUIRE(s.running_mean.data[0] == Catch::Approx(0.1 * batch_mean).margin(1e-6));
    REQUIRE(s.running_var.data[0] == Catch::Approx(0.9 * 1.0 + 0.1 * unbiased).margin(1e-6));
}

TEST_CASE("anm copies are private") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 2, 3);
    Tensor a = random_input(2, 2, 4, 4, 1);
    Tensor b = random_input(2, 2, 4, 4, 2);

    anm.forward(a, 0, Mode::train);
    const auto before1 = anm.state_of(1);
    const std::vector<float> rm1 = before1.running_mean.data;
    const std::vector<float> rv1 = before1.running_var.data;
    anm.forward(b, 0, Mode::train);
    REQUIRE(anm.state_of(1).running_mean.data == rm1);
    REQUIRE(anm.state_of(1).running_var.data == rv1);

    // several passes at j=2 leave copies 0 and 1 untouched
    ParamRegistry reg2;
    AnmLayer anm2(reg2, "norm", 2, 3);
    for (int k = 0; k < 4; ++k) anm2.forward(a, 2, Mode::train);
    for (int j : {0, 1}) {
        const auto s = anm2.state_of(j);
        for (int c = 0; c < 2; ++c) {
            REQUIRE(s.running_mean.data[c] == 0.0f);
            REQUIRE(s.running_var.data[c] == 1.0f);
        }
    }
}

TEST_CASE("anm eval forward is batch-size independent") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 2, 2);
    Tensor warm = random_input(4, 2, 4, 4, 5);
    anm.forward(warm, 1, Mode::train);

    Tensor batch = random_input(3, 2, 4, 4, 6);
    Tensor batched = anm.forward(batch, 1, Mode::eval);
    for (int n = 0; n < 3; ++n) {
        Tensor single(1, 2, 4, 4);
        std::copy(batch.data.begin() + n * 32, batch.data.begin() + (n + 1) * 32,
                  single.data.begin());
        Tensor out = anm.forward(single, 1, Mode::eval);
        for (size_t i = 0; i < out.numel(); ++i) {
            REQUIRE(out.data[i] == batched.data[n * 32 + i]);
        }
    }
}

TEST_CASE("anm train and eval agree when running stats equal batch stats") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 1, 1);
    Tensor x = random_input(4, 1, 4, 4, 8);
    // push running stats to the batch stats: mean over many passes converges,
    // so instead compute and inject them directly
    double sum = 0.0, sq = 0.0;
    for (float v : x.data) {
        sum += v;
        sq += static_cast<double>(v) * v;
    }
    const double cnt = static_cast<double>(x.numel());
    const double mean = sum / cnt;
    const double biased = sq / cnt - mean * mean;

    Tensor train_out = anm.forward(x, 0, Mode::train);

    // what an eval pass computes when its running stats equal the batch stats
    for (size_t i = 0; i < x.numel(); ++i) {
        const double eval_out = (x.data[i] - mean) / std::sqrt(biased + 1e-5);
        REQUIRE(train_out.data[i] == Catch::Approx(eval_out).margin(1e-5));
    }
}

TEST_CASE("anm rejects bad indices and degenerate batches") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 2, 3);
    Tensor x = random_input(2, 2, 3, 3, 9);
    REQUIRE_THROWS_AS(anm.forward(x, 3, Mode::eval), value_error);
    Tensor tiny(1, 2, 1, 1);
    REQUIRE_THROWS_AS(anm.forward(tiny, 0, Mode::train), value_error);
    REQUIRE_NOTHROW(anm.forward(tiny, 0, Mode::eval));
}

template <typename S>
static double anm_fd_error(uint64_t seed, Mode mode, double eps) {
    ParamRegistryT<S> reg;
    AnmLayerT<S> anm(reg, "norm", 2, 2);
    ParamT<S>* gamma = reg.params()[0].get();
    ParamT<S>* beta = reg.params()[1].get();
    RngState rr(seed);
    gamma->tensor.data = {static_cast<S>(rr.uniform(0.5, 1.5)),
                          static_cast<S>(rr.uniform(0.5, 1.5))};
    beta->tensor.data = {static_cast<S>(rr.normal()), static_cast<S>(rr.normal())};
    RngState xr(seed + 50);
    TensorT<S> x(2, 2, 3, 3);
    x.fill_normal(xr, 1.0);
    RngState pr(seed + 99);
    std::vector<double> proj(x.numel());
    for (auto& v : proj) v = pr.uniform(-1.0, 1.0);

    auto loss = [&] {
        TensorT<S> y = anm.forward(x, 0, mode);
        double acc = 0.0;
        for (size_t i = 0; i < y.numel(); ++i) acc += static_cast<double>(y.data[i]) * proj[i];
        return acc;
    };
    auto grad = [&] {
        TensorT<S> y = anm.forward(x, 0, mode);
        TensorT<S> og = y;
        for (size_t i = 0; i < og.numel(); ++i) og.data[i] = static_cast<S>(proj[i]);
        anm.backward(x, og);
    };
    return grad_check<S>(loss, grad, {&x, &gamma->tensor, &beta->tensor}, eps).max_rel_error;
}

TEST_CASE("anm gradients match finite differences in both modes") {
    for (uint64_t seed : {31ull, 32ull, 33ull, 34ull, 35ull}) {
        for (Mode mode : {Mode::train, Mode::eval}) {
            const double e64 = anm_fd_error<double>(seed, mode, 1e-3);
            const double e32 = anm_fd_error<float>(seed, mode, 1e-2);
            CAPTURE(seed, static_cast<int>(mode), e64, e32);
            REQUIRE(e64 < 1e-3);
            REQUIRE(e32 < 1e-3);
        }
    }
}

TEST_CASE("anm switching isolation is bitwise") {
    ParamRegistry reg;
    AnmLayer anm(reg, "norm", 2, 3);
    Tensor x = random_input(2, 2, 4, 4, 13);
    // snapshot all state
    auto snap = [&] {
        std::vector<std::vector<float>> s;
        for (const auto& p : reg.params()) s.push_back(p->tensor.data);
        for (const auto& b : reg.buffers()) s.push_back(b->tensor.data);
        return s;
    };
    const auto before = snap();
    anm.forward(x, 1, Mode::train);
    const auto after = snap();
    // only copy 1 entries may differ: params ordered gamma0,beta0,gamma1,...
    size_t idx = 0;
    for (const auto& p : reg.params()) {
        const bool is_j1 = p->name.find(".j1.") != std::string::npos;
        if (!is_j1) REQUIRE(after[idx] == before[idx]);
        ++idx;
    }
    for (const auto& b : reg.buffers()) {
        const bool is_j1 = b->name.find(".j1.") != std::string::npos;
        if (!is_j1) REQUIRE(after[idx] == before[idx]);
        ++idx;
    }
}
