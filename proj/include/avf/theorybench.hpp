// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avf/synthworlds.hpp"
#include "avf/transport.hpp"
#include "avf/verifmetrics.hpp"

namespace avf::bench {

/// One-step sampler viewed as a Markov kernel in physical coordinates.
/// When norm stats are supplied, conditioning states are normalized before
/// the field evaluation and draws are mapped back.
class ModelKernel {
public:
    ModelKernel(const transport::VelocityField& field,
                std::optional<worlds::NormStats> stats = std::nullopt)
        : field_(&field), stats_(std::move(stats)) {}

    Tensor::Shape field_shape() const { return field_->field_shape(); }

    /// One draw per row of `states` (B, C, H, W), all in one field evaluation.
    Tensor draw(const Tensor& states, RngStream& rng) const;

    const transport::VelocityField& field() const { return *field_; }

private:
    const transport::VelocityField* field_;
    std::optional<worlds::NormStats> stats_;
};

/// rho = u(z, r, t, c) - v + (t - r) * D_t u, with the total derivative
/// computed along the tangent [v, 0, 1] in (z, r, t). Requires r < t.
Tensor rectification_residual(const transport::VelocityField& u, const Tensor& z, double r,
                              double t, const Tensor& c, const Tensor& v);

/// (lhs, rhs) for one coupled draw: lhs = ||x_hat - x|| along the shared
/// (x, eps) path, rhs = trapezoidal estimate of the residual-norm integral
/// over the path with n_tau nodes. Norms are latitude-weighted mean-abs.
std::pair<double, double> endpoint_error_bound_check(const transport::VelocityField& u,
                                                     const worlds::AnalyticKernel& kernel,
                                                     const Tensor& c, RngStream& rng,
                                                     std::size_t n_tau,
                                                     const metrics::LatWeights& w);

struct SensitivityEstimate {
    double lambda_hat = 0.0;
    std::size_t argmax_probe = 0;
};

/// Max over probe pairs of W1_hat(K(.|c), K(.|c')) / ||c - c'||. Exact |gain|
/// for affine_gaussian kernels. Draws use common random numbers across the
/// pair, which is an exact coupling for translation-family kernels.
SensitivityEstimate estimate_sensitivity(const worlds::AnalyticKernel& kernel,
                                         const std::vector<std::pair<Tensor, Tensor>>& probes,
                                         std::size_t n_samples, RngStream rng,
                                         const metrics::LatWeights& w);

/// W1_hat between one-step model draws and exact kernel draws at state c.
double kernel_gap(const ModelKernel& model, const worlds::AnalyticKernel& kernel, const Tensor& c,
                  std::size_t n_samples, RngStream rng, const metrics::LatWeights& w);

struct BoundRow {
    std::size_t h = 0;
    double lhs = 0.0;
    double rhs = 0.0;
    double mean_gap = 0.0; // per-step gap estimate feeding this horizon
    double floor = 0.0;    // measured self-distance Monte-Carlo floor
    bool holds = false;
};

struct BoundReport {
    double lambda_hat = 0.0;
    double slack_mult = 3.0;
    std::size_t n_samples = 0;
    std::vector<double> gaps; // ghat_j for j = 0..H-1
    std::vector<BoundRow> rows;

    bool all_hold() const;
};

struct BoundConfig {
    std::size_t horizon = 8;
    std::size_t n_samples = 10000;
    std::size_t gap_states = 16;
    std::size_t gap_samples = 2000;
    double slack_mult = 3.0;
    std::optional<double> lambda_override; // skip estimation when set
};

/// Empirical check of the rollout amplification recursion: simulates model
/// and true chains from shared initial draws and tests
/// lhs_h <= sum_{j<h} lambda^{h-1-j} ghat_j + slack for every horizon.
BoundReport verify_rollout_bound(const ModelKernel& model, const worlds::AnalyticKernel& kernel,
                                 const worlds::InitialDist& init, const BoundConfig& cfg,
                                 RngStream rng, const metrics::LatWeights& w);

/// CSV with columns (h, lhs, rhs, lambda_hat, mean_gap, floor, holds).
void write_bound_csv(const BoundReport& report, const std::string& path);

/// (paper-variant CRPS, W1 to the point observation) for scalar members;
/// crps <= w1 with equality iff all members coincide.
std::pair<double, double> crps_w1_relation_check(const std::vector<double>& members, double y);

} // namespace avf::bench
