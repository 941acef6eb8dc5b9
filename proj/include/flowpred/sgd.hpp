#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "flowpred/error.hpp"
#include "flowpred/net.hpp"

namespace flowpred {

struct SgdConfig {
    double base_lr = 1e-4;
    int stepsize = 50000;   // iterations between learning-rate decays
    double gamma = 0.1;
    int batch = 16;
    int max_iters = 10000;
    std::uint64_t seed = 1;
    // Off by default; the verified core is plain SGD.
    double momentum = 0.0;
    double weight_decay = 0.0;

    void validate() const {
        if (base_lr <= 0.0) throw DataError("base_lr must be > 0");
        if (stepsize < 1) throw DataError("stepsize must be >= 1");
        if (gamma <= 0.0 || gamma > 1.0) throw DataError("gamma must be in (0, 1]");
        if (batch < 1) throw DataError("batch must be >= 1");
        if (max_iters < 1) throw DataError("max_iters must be >= 1");
    }
};

inline double learning_rate(const SgdConfig& cfg, std::uint64_t iter) {
    return cfg.base_lr * std::pow(cfg.gamma, static_cast<double>(iter / cfg.stepsize));
}

// theta <- theta - lr(iter) * g, then the iteration counter advances. With
// momentum m: v <- m*v + g + wd*theta; theta <- theta - lr*v.
inline void sgd_step(NetworkParams& params, const Gradients& grads, const SgdConfig& cfg,
                     Gradients* velocity = nullptr) {
    if (grads.tensors.size() != params.tensors.size())
        throw ShapeError("gradient count does not match parameter count");
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
        if (!(grads.tensors[i].dims == params.tensors[i].dims))
            throw ShapeError("gradient shape " + grads.tensors[i].dims.str() +
                             " does not match parameter " + params.names[i]);
    const double lr = learning_rate(cfg, params.iteration);
    const bool fancy = cfg.momentum != 0.0 || cfg.weight_decay != 0.0;
    if (fancy && !velocity)
        throw DataError("momentum/weight decay need a velocity buffer");
    if (fancy) velocity->ensure_like(params);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        auto& theta = params.tensors[i].v;
        const auto& g = grads.tensors[i].v;
        if (!fancy) {
            for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= lr * g[k];
        } else {
            auto& vel = velocity->tensors[i].v;
            for (std::size_t k = 0; k < theta.size(); ++k) {
                vel[k] = cfg.momentum * vel[k] + g[k] + cfg.weight_decay * theta[k];
                theta[k] -= lr * vel[k];
            }
        }
    }
    ++params.iteration;
}

}  // namespace flowpred
