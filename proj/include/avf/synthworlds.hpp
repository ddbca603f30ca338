// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avf/rng.hpp"
#include "avf/tensor.hpp"
#include "avf/transport.hpp"
#include "avf/verifmetrics.hpp"

namespace avf::worlds {

enum class KernelKind { affine_gaussian, chaotic_map, advection2d };

/// Synthetic Markov transition kernel with a closed-form conditional law.
struct AnalyticKernel {
    KernelKind kind = KernelKind::affine_gaussian;
    std::size_t channels = 1;
    std::size_t grid_h = 1;
    std::size_t grid_w = 1;

    // affine_gaussian: x' ~ N(gain * c + bias, noise_std^2 I), gain per channel
    std::vector<double> gain{0.8};
    double bias = 0.0;
    double noise_std = 0.3;

    // chaotic_map: x' = a x + b sin(omega x) + noise_std * xi, pointwise
    double a = 1.05;
    double b = 0.3;
    double omega = 1.0;

    // advection2d: du/dt + v . grad u = kappa lap u + smoothed forcing,
    // first-order upwind + explicit 5-point Laplacian on a periodic grid
    // with unit spacing
    double vx = 1.0;
    double vy = 0.5;
    double kappa = 0.05;
    double forcing_std = 0.1;
    double time_step = 0.2;

    Tensor::Shape field_shape() const { return {channels, grid_h, grid_w}; }
    double gain_for_channel(std::size_t c) const {
        return gain.size() == 1 ? gain[0] : gain.at(c);
    }
    double max_abs_gain() const;
    /// Stability bound for advection2d: dt <= 0.5 * min(1/|v|_max, 1/(4 kappa)).
    void validate() const;

    static AnalyticKernel affine(std::vector<double> gain, double bias, double noise_std,
                                 std::size_t channels = 1, std::size_t h = 1, std::size_t w = 1);
    static AnalyticKernel chaotic(double a, double b, double omega, double noise_std,
                                  std::size_t channels = 1, std::size_t h = 1,
                                  std::size_t w = 1);
    static AnalyticKernel advection(std::size_t channels, std::size_t h, std::size_t w, double vx,
                                    double vy, double kappa, double forcing_std,
                                    double time_step);
};

/// One exact draw from K*(.|c).
Tensor kernel_sample(const AnalyticKernel& kernel, const Tensor& c, RngStream& rng);

/// Noiseless drift f(c): the conditional mean for affine/chaotic kernels and
/// the deterministic step for advection2d.
Tensor kernel_mean(const AnalyticKernel& kernel, const Tensor& c);

/// Exact W1 between the conditional laws at c and c' (affine_gaussian only):
/// latitude-weighted mean of |gain| * |c - c'| per cell.
double kernel_w1_gap(const AnalyticKernel& kernel, const Tensor& c, const Tensor& c_alt,
                     const metrics::LatWeights& w);

/// Exact destination-conditioned average velocity of the Gaussian marginal
/// path for an affine_gaussian kernel, exposed as a sampler-compatible
/// velocity field. Requires r < t.
class OracleVelocity : public transport::VelocityField {
public:
    explicit OracleVelocity(AnalyticKernel kernel);

    Tensor::Shape field_shape() const override { return kernel_.field_shape(); }
    Tensor eval(const Tensor& z, const std::vector<double>& r, const std::vector<double>& t,
                const Tensor& c) const override;
    std::pair<Tensor, Tensor> eval_jvp(const Tensor& z, const std::vector<double>& r,
                                       const std::vector<double>& t, const Tensor& c,
                                       const Tensor& vz) const override;

private:
    Var eval_graph(Graph& g, Var z, Var r, Var t, Var c) const;
    AnalyticKernel kernel_;
};

Tensor oracle_avg_velocity(const AnalyticKernel& kernel, const Tensor& z, double r, double t,
                           const Tensor& c);

/// Instantaneous marginal velocity mu_dot_t + (sigma_dot_t / sigma_t)(z - mu_t).
Tensor oracle_instant_velocity(const AnalyticKernel& kernel, const Tensor& z, double t,
                               const Tensor& c);

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
};

struct SplitSpec {
    double train_frac = 0.8;
    double val_frac = 0.1;
};

struct InitialDist {
    double mean = 0.0;
    double std = 1.0;
};

struct Dataset {
    Tensor fields; // (T, C, H, W)
    std::vector<double> latitudes;
    std::size_t train_end = 0; // train: [0, train_end)
    std::size_t val_end = 0;   // val: [train_end, val_end), test: [val_end, T)
    NormStats stats;

    std::size_t steps() const { return fields.shape()[0]; }
    Tensor field(std::size_t t) const;
    std::size_t test_begin() const { return val_end; }
};

/// Evenly spaced latitude row centers inside (-80, 80) degrees.
std::vector<double> default_latitudes(std::size_t rows);

Dataset generate_dataset(const AnalyticKernel& kernel, const InitialDist& init, std::size_t steps,
                         RngStream rng, const SplitSpec& split = {}, std::size_t burn_in = 0);

NormStats compute_norm_stats(const Tensor& fields, std::size_t train_end);

Tensor normalize(const Tensor& x, const NormStats& stats);
Tensor denormalize(const Tensor& x, const NormStats& stats);

/// Bit-exact container: magic "AVFD", version, T C H W, latitudes,
/// per-channel mean then std, fields in row-major (t, c, h, w) order,
/// all little-endian.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path, const SplitSpec& split = {});

/// The affine_gaussian kernel expressed in normalized coordinates
/// x_n = (x - mean) / std: gain is unchanged, bias and noise_std rescale.
AnalyticKernel normalized_kernel(const AnalyticKernel& kernel, const NormStats& stats);

} // namespace avf::worlds
