// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <cmath>
#include <vector>

#include "spprobe/errors.hpp"
#include "spprobe/tensor.hpp"

namespace spprobe {

/// Step-decay schedule: lr0 * 0.1^floor(epoch/10).
inline double lr_schedule(int epoch, double initial_lr) {
    if (epoch < 0) throw ParameterError("lr_schedule: epoch must be >= 0");
    return initial_lr * std::pow(0.1, epoch / 10);
}

/// Classic (heavy-ball) momentum update:
///   v <- momentum * v + g
///   p <- p - lr * v
/// Velocity buffers are owned by the state and allocated on first use.
struct SgdState {
    std::vector<std::vector<double>> velocity;
};

inline void sgd_step(const std::vector<Tensor*>& params, double lr, double momentum,
                     SgdState& state) {
    if (!(lr > 0.0)) throw ParameterError("sgd_step: learning rate must be positive");
    if (state.velocity.empty()) state.velocity.resize(params.size());
    if (state.velocity.size() != params.size())
        throw UsageError("sgd_step: velocity state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor* p = params[i];
        if (!p->has_grad())
            throw UsageError("sgd_step: parameter " + std::to_string(i) +
                             " has no gradient; run backward first");
        auto& v = state.velocity[i];
        if (v.size() != p->numel()) v.assign(p->numel(), 0.0);
        for (std::size_t j = 0; j < p->numel(); ++j) {
            v[j] = momentum * v[j] + p->grad[j];
            p->data[j] -= lr * v[j];
        }
    }
}

} // namespace spprobe
