// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "avf/tensor.hpp"

namespace avf::metrics {

/// Normalized area weights: one weight per latitude row, broadcast across
/// longitudes, averaging to 1 over the grid.
struct LatWeights {
    Tensor row; // (H,)
    double at_row(std::size_t h) const { return row.at(h); }
    std::size_t rows() const { return row.size(); }

    static LatWeights uniform(std::size_t h);
};

LatWeights latitude_weights(const std::vector<double>& latitudes_deg);

/// Weighted grid means over a (C, H, W) field; weights average to 1.
double weighted_mean_abs(const Tensor& field, const LatWeights& w);
double weighted_mean_sq(const Tensor& field, const LatWeights& w);

/// Ensemble metrics at one lead time. Outer index: initialization,
/// inner index: member; every field is (C, H, W).
using EnsembleSlice = std::vector<std::vector<Tensor>>;

double rmse(const EnsembleSlice& members, const std::vector<Tensor>& truth, const LatWeights& w);
double spread(const EnsembleSlice& members, const LatWeights& w);
/// sqrt((K+1)/K) * spread / rmse; rmse == 0 is an error (undefined SSR).
double ssr(double spread_value, double rmse_value, std::size_t ensemble_size);

enum class CrpsVariant { paper, fair };
double crps_eval(const EnsembleSlice& members, const std::vector<Tensor>& truth,
                 const LatWeights& w, CrpsVariant variant = CrpsVariant::paper);

/// Exact empirical 1D Wasserstein-1; unequal sizes integrate the merged
/// piecewise-constant quantile functions.
double wasserstein1_1d(std::vector<double> a, std::vector<double> b);

/// Latitude-weighted mean over cells of the per-cell 1D W1 across samples.
/// Exact for product-form distributions, a proxy otherwise.
double wasserstein1_marginal_weighted(const std::vector<Tensor>& samples_a,
                                      const std::vector<Tensor>& samples_b, const LatWeights& w);

struct MetricRow {
    std::size_t lead = 0;
    double rmse = 0.0;
    double spread = 0.0;
    double ssr = 0.0;
    double crps = 0.0;
};

struct MetricReport {
    std::size_t ensemble_size = 0;
    std::size_t n_init = 0;
    std::vector<MetricRow> rows;
};

/// CSV with one (lead_time, metric, value) row per entry, 12 significant digits.
void write_metric_csv(const MetricReport& report, const std::string& path);

std::string format_sig12(double v);

} // namespace avf::metrics
