// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "avf/tensor.hpp"

namespace avf::harness {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

struct AdamWState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;

    static AdamWState like(const std::vector<Tensor>& params);
};

/// Decoupled-weight-decay update with bias-corrected moments:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
/// Non-finite gradients raise an error naming the parameter.
void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamWState& state,
                double lr, const AdamWConfig& cfg, const std::vector<std::string>* names = nullptr);

/// lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi epoch / total)).
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr_max, double lr_min);

} // namespace avf::harness
