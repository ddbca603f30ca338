// SPDX-License-Identifier: Apache-2.0
#include "avf/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace avf::harness {

AdamWState AdamWState::like(const std::vector<Tensor>& params) {
    AdamWState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor& p : params) {
        s.m.emplace_back(p.shape());
        s.v.emplace_back(p.shape());
    }
    return s;
}

void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamWState& state,
                double lr, const AdamWConfig& cfg, const std::vector<std::string>* names) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw std::invalid_argument("adamw_step: parameter/gradient/state counts differ");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].same_shape(grads[i])) {
            throw std::invalid_argument("adamw_step: gradient shape " +
                                        shape_to_string(grads[i].shape()) +
                                        " does not match parameter shape " +
                                        shape_to_string(params[i].shape()));
        }
        if (!grads[i].all_finite()) {
            const std::string name = names != nullptr ? (*names)[i]
                                                      : "#" + std::to_string(i);
            throw std::runtime_error("adamw_step: non-finite gradient for parameter " + name);
        }
        double* p = params[i].mutable_data();
        double* m = state.m[i].mutable_data();
        double* v = state.v[i].mutable_data();
        const double* g = grads[i].data();
        for (std::size_t k = 0; k < params[i].size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double m_hat = m[k] / bc1;
            const double v_hat = v[k] / bc2;
            p[k] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p[k]);
        }
    }
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr_max, double lr_min) {
    if (total_epochs == 0 || epoch > total_epochs) {
        throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) +
                                    " outside [0, " + std::to_string(total_epochs) + "]");
    }
    const double phase = M_PI * static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

} // namespace avf::harness
