#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "dpnet/common.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

// A learnable tensor plus its SGD momentum buffer. Names are unique within a
// registry and double as checkpoint keys.
template <typename S>
struct ParamT {
    std::string name;
    TensorT<S> tensor;
    std::vector<S> momentum;

    ParamT() = default;
    ParamT(std::string name_, int n, int c, int h, int w) : name(std::move(name_)) {
        tensor.resize(n, c, h, w);
        momentum.assign(tensor.numel(), S(0));
    }
};

// Non-learnable state that still belongs in checkpoints (running statistics).
template <typename S>
struct BufferT {
    std::string name;
    TensorT<S> tensor;

    BufferT() = default;
    BufferT(std::string name_, int n, int c, int h, int w) : name(std::move(name_)) {
        tensor.resize(n, c, h, w);
    }
};

template <typename S>
class ParamRegistryT {
public:
    ParamT<S>* add_param(std::unique_ptr<ParamT<S>> p) {
        DPNET_CHECK(names_.insert(p->name).second, "duplicate parameter name '", p->name, "'");
        params_.push_back(std::move(p));
        return params_.back().get();
    }

    ParamT<S>* add_param(const std::string& name, int n, int c, int h, int w) {
        return add_param(std::make_unique<ParamT<S>>(name, n, c, h, w));
    }

    BufferT<S>* add_buffer(const std::string& name, int n, int c, int h, int w) {
        DPNET_CHECK(names_.insert(name).second, "duplicate buffer name '", name, "'");
        buffers_.push_back(std::make_unique<BufferT<S>>(name, n, c, h, w));
        return buffers_.back().get();
    }

    const std::vector<std::unique_ptr<ParamT<S>>>& params() const { return params_; }
    const std::vector<std::unique_ptr<BufferT<S>>>& buffers() const { return buffers_; }

    void zero_grad() {
        for (auto& p : params_) p->tensor.zero_grad();
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += p->tensor.numel();
        return n;
    }

private:
    std::vector<std::unique_ptr<ParamT<S>>> params_;
    std::vector<std::unique_ptr<BufferT<S>>> buffers_;
    std::unordered_set<std::string> names_;
};

using Param = ParamT<float>;
using Buffer = BufferT<float>;
using ParamRegistry = ParamRegistryT<float>;

// v <- momentum*v + grad + weight_decay*w; w <- w - lr*v; grads zeroed after.
// A non-finite gradient aborts before any parameter is touched.
template <typename S>
void sgd_step(ParamRegistryT<S>& reg, double lr, double momentum, double weight_decay) {
    DPNET_CHECK(lr >= 0.0, "sgd_step: lr must be >= 0, got ", lr);
    for (const auto& p : reg.params()) {
        for (S g : p->tensor.grad) {
            DPNET_CHECK(std::isfinite(static_cast<double>(g)),
                        "sgd_step: non-finite gradient in parameter '", p->name, "'");
        }
    }
    for (const auto& p : reg.params()) {
        TensorT<S>& t = p->tensor;
        for (size_t i = 0; i < t.numel(); ++i) {
            const S v = static_cast<S>(momentum) * p->momentum[i] + t.grad[i] +
                        static_cast<S>(weight_decay) * t.data[i];
            p->momentum[i] = v;
            t.data[i] -= static_cast<S>(lr) * v;
        }
        t.zero_grad();
    }
}

}  // namespace dpnet
