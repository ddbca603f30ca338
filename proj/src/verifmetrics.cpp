// SPDX-License-Identifier: Apache-2.0
#include "avf/verifmetrics.hpp"

#include "avf/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace avf::metrics {

LatWeights LatWeights::uniform(std::size_t h) {
    return LatWeights{Tensor({h}, std::vector<double>(h, 1.0))};
}

LatWeights latitude_weights(const std::vector<double>& latitudes_deg) {
    if (latitudes_deg.empty()) {
        throw std::invalid_argument("latitude_weights: empty latitude list");
    }
    const double deg2rad = M_PI / 180.0;
    std::vector<double> cosines(latitudes_deg.size());
    double mean_cos = 0.0;
    for (std::size_t i = 0; i < latitudes_deg.size(); ++i) {
        const double lat = latitudes_deg[i];
        if (lat <= -90.0 || lat > 90.0) {
            throw std::invalid_argument("latitude_weights: latitude " + std::to_string(lat) +
                                        " outside (-90, 90]");
        }
        cosines[i] = std::cos(lat * deg2rad);
        mean_cos += cosines[i];
    }
    mean_cos /= static_cast<double>(latitudes_deg.size());
    if (mean_cos <= 0.0) {
        throw std::invalid_argument("latitude_weights: mean cosine is zero");
    }
    Tensor row({latitudes_deg.size()});
    double* d = row.mutable_data();
    for (std::size_t i = 0; i < latitudes_deg.size(); ++i) d[i] = cosines[i] / mean_cos;
    return LatWeights{std::move(row)};
}

namespace {

void check_field(const Tensor& f, const LatWeights& w, const char* op) {
    if (f.rank() != 3 || f.shape()[1] != w.rows()) {
        throw std::invalid_argument(std::string(op) + ": field shape " +
                                    shape_to_string(f.shape()) + " does not match " +
                                    std::to_string(w.rows()) + " latitude rows");
    }
}

template <typename F>
double weighted_mean_of(const Tensor& field, const LatWeights& w, F f) {
    const auto& s = field.shape();
    const std::size_t C = s[0], H = s[1], W = s[2];
    const double* d = field.data();
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h) {
            const double wr = w.at_row(h);
            const double* row = d + (c * H + h) * W;
            for (std::size_t j = 0; j < W; ++j) acc += wr * f(row[j]);
        }
    return acc / static_cast<double>(field.size());
}

} // namespace

double weighted_mean_abs(const Tensor& field, const LatWeights& w) {
    check_field(field, w, "weighted_mean_abs");
    return weighted_mean_of(field, w, [](double x) { return std::fabs(x); });
}

double weighted_mean_sq(const Tensor& field, const LatWeights& w) {
    check_field(field, w, "weighted_mean_sq");
    return weighted_mean_of(field, w, [](double x) { return x * x; });
}

double rmse(const EnsembleSlice& members, const std::vector<Tensor>& truth, const LatWeights& w) {
    if (members.empty() || members.size() != truth.size()) {
        throw std::invalid_argument("rmse: initialization counts differ");
    }
    double acc = 0.0;
    for (std::size_t n = 0; n < members.size(); ++n) {
        const auto& ens = members[n];
        if (ens.empty()) throw std::invalid_argument("rmse: empty ensemble");
        check_field(truth[n], w, "rmse");
        Tensor mean(ens[0].shape());
        double* md = mean.mutable_data();
        for (const Tensor& m : ens) {
            if (!m.same_shape(truth[n])) {
                throw std::invalid_argument("rmse: member shape " + shape_to_string(m.shape()) +
                                            " vs truth shape " +
                                            shape_to_string(truth[n].shape()));
            }
            const double* d = m.data();
            for (std::size_t i = 0; i < mean.size(); ++i) md[i] += d[i];
        }
        const double invK = 1.0 / static_cast<double>(ens.size());
        for (std::size_t i = 0; i < mean.size(); ++i) md[i] *= invK;
        // per-initialization sqrt, then average over initializations
        acc += std::sqrt(weighted_mean_sq(t_sub(truth[n], mean), w));
    }
    return acc / static_cast<double>(members.size());
}

double spread(const EnsembleSlice& members, const LatWeights& w) {
    if (members.empty()) throw std::invalid_argument("spread: no initializations");
    double acc = 0.0;
    for (const auto& ens : members) {
        const std::size_t K = ens.size();
        if (K < 2) throw std::invalid_argument("spread: ensemble size must be >= 2");
        Tensor mean(ens[0].shape());
        double* md = mean.mutable_data();
        for (const Tensor& m : ens) {
            const double* d = m.data();
            for (std::size_t i = 0; i < mean.size(); ++i) md[i] += d[i];
        }
        for (std::size_t i = 0; i < mean.size(); ++i) md[i] /= static_cast<double>(K);
        Tensor var(ens[0].shape());
        double* vd = var.mutable_data();
        for (const Tensor& m : ens) {
            const double* d = m.data();
            for (std::size_t i = 0; i < var.size(); ++i) {
                const double dev = d[i] - md[i];
                vd[i] += dev * dev;
            }
        }
        // unbiased per-cell variance, weighted grid mean, sqrt per init
        const std::size_t C = var.shape()[0], H = var.shape()[1], W = var.shape()[2];
        double cell_acc = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t j = 0; j < W; ++j) {
                    cell_acc += w.at_row(h) * vd[(c * H + h) * W + j] /
                                static_cast<double>(K - 1);
                }
        acc += std::sqrt(cell_acc / static_cast<double>(var.size()));
    }
    return acc / static_cast<double>(members.size());
}

double ssr(double spread_value, double rmse_value, std::size_t ensemble_size) {
    if (rmse_value <= 0.0) {
        throw std::domain_error("ssr: undefined for rmse == 0");
    }
    const double k = static_cast<double>(ensemble_size);
    return std::sqrt((k + 1.0) / k) * spread_value / rmse_value;
}

double crps_eval(const EnsembleSlice& members, const std::vector<Tensor>& truth,
                 const LatWeights& w, CrpsVariant variant) {
    if (members.empty() || members.size() != truth.size()) {
        throw std::invalid_argument("crps_eval: initialization counts differ");
    }
    double acc = 0.0;
    for (std::size_t n = 0; n < members.size(); ++n) {
        const auto& ens = members[n];
        const std::size_t K = ens.size();
        if (K == 0) throw std::invalid_argument("crps_eval: empty ensemble");
        if (variant == CrpsVariant::fair && K < 2) {
            throw std::invalid_argument("crps_eval: fair variant needs K >= 2");
        }
        check_field(truth[n], w, "crps_eval");
        for (const Tensor& m : ens) {
            if (!m.same_shape(truth[n])) {
                throw std::invalid_argument("crps_eval: member shape " +
                                            shape_to_string(m.shape()) + " vs truth shape " +
                                            shape_to_string(truth[n].shape()));
            }
        }
        const double c_K = variant == CrpsVariant::paper
                               ? 1.0 / (2.0 * static_cast<double>(K) * static_cast<double>(K))
                               : 1.0 / (2.0 * static_cast<double>(K) *
                                        static_cast<double>(K - 1));
        const auto& s = truth[n].shape();
        const std::size_t C = s[0], H = s[1], W = s[2];
        const double* yd = truth[n].data();
        double init_acc = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t j = 0; j < W; ++j) {
                    const std::size_t i = (c * H + h) * W + j;
                    double term1 = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        term1 += std::fabs(ens[k].at(i) - yd[i]);
                    }
                    term1 /= static_cast<double>(K);
                    double term2 = 0.0;
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t k2 = 0; k2 < K; ++k2) {
                            term2 += std::fabs(ens[k].at(i) - ens[k2].at(i));
                        }
                    init_acc += w.at_row(h) * (term1 - c_K * term2);
                }
        acc += init_acc / static_cast<double>(truth[n].size());
    }
    return acc / static_cast<double>(members.size());
}

double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("wasserstein1_1d: empty sample set");
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a.size() == b.size()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += std::fabs(a[i] - b[i]);
        return acc / static_cast<double>(a.size());
    }
    // integrate |Qa - Qb| over the merged quantile breakpoints; integer
    // cross-multiplication keeps breakpoint comparisons exact
    const std::size_t n = a.size(), m = b.size();
    std::size_t ia = 0, ib = 0;
    double q = 0.0, acc = 0.0;
    while (ia < n && ib < m) {
        const std::uint64_t lhs = static_cast<std::uint64_t>(ia + 1) * m;
        const std::uint64_t rhs = static_cast<std::uint64_t>(ib + 1) * n;
        const double q_next = lhs <= rhs ? static_cast<double>(ia + 1) / static_cast<double>(n)
                                         : static_cast<double>(ib + 1) / static_cast<double>(m);
        acc += (q_next - q) * std::fabs(a[ia] - b[ib]);
        q = q_next;
        if (lhs <= rhs) ++ia;
        if (rhs <= lhs) ++ib;
    }
    return acc;
}

double wasserstein1_marginal_weighted(const std::vector<Tensor>& samples_a,
                                      const std::vector<Tensor>& samples_b, const LatWeights& w) {
    if (samples_a.empty() || samples_b.empty()) {
        throw std::invalid_argument("wasserstein1_marginal_weighted: empty sample set");
    }
    const auto& shape = samples_a[0].shape();
    for (const Tensor& t : samples_a) {
        if (t.shape() != shape) throw std::invalid_argument("marginal W1: ragged sample shapes");
    }
    for (const Tensor& t : samples_b) {
        if (t.shape() != shape) {
            throw std::invalid_argument("marginal W1: sample shape " +
                                        shape_to_string(t.shape()) + " vs " +
                                        shape_to_string(shape));
        }
    }
    check_field(samples_a[0], w, "wasserstein1_marginal_weighted");
    const std::size_t C = shape[0], H = shape[1], W = shape[2];
    double acc = 0.0;
    std::vector<double> va(samples_a.size()), vb(samples_b.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t j = 0; j < W; ++j) {
                const std::size_t i = (c * H + h) * W + j;
                for (std::size_t s = 0; s < samples_a.size(); ++s) va[s] = samples_a[s].at(i);
                for (std::size_t s = 0; s < samples_b.size(); ++s) vb[s] = samples_b[s].at(i);
                acc += w.at_row(h) * wasserstein1_1d(va, vb);
            }
    return acc / static_cast<double>(shape_numel(shape));
}

std::string format_sig12(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void write_metric_csv(const MetricReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write metric csv: " + path);
    out << "lead_time,metric,value\n";
    for (const MetricRow& r : report.rows) {
        out << r.lead << ",rmse," << format_sig12(r.rmse) << "\n";
        out << r.lead << ",spread," << format_sig12(r.spread) << "\n";
        out << r.lead << ",ssr," << format_sig12(r.ssr) << "\n";
        out << r.lead << ",crps," << format_sig12(r.crps) << "\n";
    }
    if (!out) throw std::runtime_error("write failure: " + path);
}

} // namespace avf::metrics
