// SPDX-License-Identifier: Apache-2.0
#include "avf/theorybench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace avf::bench {

namespace {

Tensor normalize_rows(const Tensor& rows, const worlds::NormStats& stats, bool forward) {
    const auto& s = rows.shape(); // (B, C, H, W)
    Tensor out(s);
    double* od = out.mutable_data();
    const double* xd = rows.data();
    const std::size_t per = s[2] * s[3];
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t c = 0; c < s[1]; ++c) {
            const double mu = stats.mean[c], sd = stats.std[c];
            for (std::size_t i = 0; i < per; ++i) {
                const std::size_t k = (b * s[1] + c) * per + i;
                od[k] = forward ? (xd[k] - mu) / sd : xd[k] * sd + mu;
            }
        }
    return out;
}

// residual with the r <= t relaxation needed by the endpoint integral,
// where the destination time coincides with the lower node
Tensor residual_impl(const transport::VelocityField& u, const Tensor& z, double r, double t,
                     const Tensor& c, const Tensor& v) {
    const auto cell = u.field_shape();
    Tensor zb = transport::as_batch(z, cell);
    Tensor cb = transport::as_batch(c, cell);
    Tensor vb = transport::as_batch(v, cell);
    auto [uval, du] = u.eval_jvp(zb, {r}, {t}, cb, vb);
    // rho = u - v + (t - r) du
    Tensor rho = t_add(t_sub(uval, vb), t_scale(du, t - r));
    return Tensor(cell, rho.to_vector());
}

std::vector<double> flatten_states(const std::vector<Tensor>& states) {
    std::vector<double> out;
    out.reserve(states.size());
    for (const Tensor& s : states) out.push_back(s.item());
    return out;
}

double set_w1(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
              const metrics::LatWeights& w) {
    if (!a.empty() && a[0].size() == 1) {
        return metrics::wasserstein1_1d(flatten_states(a), flatten_states(b));
    }
    return metrics::wasserstein1_marginal_weighted(a, b, w);
}

std::vector<Tensor> unbatch(const Tensor& rows) {
    const auto& s = rows.shape();
    const std::size_t per = s[1] * s[2] * s[3];
    std::vector<Tensor> out;
    out.reserve(s[0]);
    for (std::size_t b = 0; b < s[0]; ++b) {
        std::vector<double> vals(rows.data() + b * per, rows.data() + (b + 1) * per);
        out.emplace_back(Tensor::Shape{s[1], s[2], s[3]}, std::move(vals));
    }
    return out;
}

Tensor batch_states(const std::vector<Tensor>& states) {
    const auto& cell = states[0].shape();
    Tensor out({states.size(), cell[0], cell[1], cell[2]});
    double* od = out.mutable_data();
    const std::size_t per = shape_numel(cell);
    for (std::size_t b = 0; b < states.size(); ++b) {
        std::copy(states[b].data(), states[b].data() + per, od + b * per);
    }
    return out;
}

} // namespace

Tensor ModelKernel::draw(const Tensor& states, RngStream& rng) const {
    Tensor cond = stats_ ? normalize_rows(states, *stats_, true) : states;
    Tensor eps(cond.shape());
    double* ed = eps.mutable_data();
    for (std::size_t i = 0; i < eps.size(); ++i) ed[i] = rng.normal();
    Tensor draws = transport::sample_one_step(*field_, eps, cond);
    return stats_ ? normalize_rows(draws, *stats_, false) : draws;
}

Tensor rectification_residual(const transport::VelocityField& u, const Tensor& z, double r,
                              double t, const Tensor& c, const Tensor& v) {
    if (!(r < t)) {
        throw std::invalid_argument("rectification_residual: requires r < t, got r=" +
                                    std::to_string(r) + " t=" + std::to_string(t));
    }
    return residual_impl(u, z, r, t, c, v);
}

std::pair<double, double> endpoint_error_bound_check(const transport::VelocityField& u,
                                                     const worlds::AnalyticKernel& kernel,
                                                     const Tensor& c, RngStream& rng,
                                                     std::size_t n_tau,
                                                     const metrics::LatWeights& w) {
    if (kernel.kind != worlds::KernelKind::affine_gaussian) {
        throw std::invalid_argument("endpoint_error_bound_check: affine_gaussian kernel needed");
    }
    if (n_tau < 2) {
        throw std::invalid_argument("endpoint_error_bound_check: n_tau must be >= 2");
    }
    // coupled draw: the kernel sample and the path noise share one Gaussian,
    // so the exact transport field maps eps back onto x exactly
    Tensor eps(kernel.field_shape());
    {
        double* ed = eps.mutable_data();
        for (std::size_t i = 0; i < eps.size(); ++i) ed[i] = rng.normal();
    }
    Tensor x = t_axpy(kernel.noise_std, eps, worlds::kernel_mean(kernel, c));
    Tensor x_hat = transport::sample_one_step(u, eps, c);
    const double lhs = metrics::weighted_mean_abs(t_sub(x_hat, x), w);

    // trapezoid over the coupled path z_tau = (1-tau) x + tau eps, v = eps - x
    Tensor v = t_sub(eps, x);
    double rhs = 0.0;
    for (std::size_t i = 0; i < n_tau; ++i) {
        const double tau = static_cast<double>(i) / static_cast<double>(n_tau - 1);
        Tensor z_tau = t_axpy(tau, v, x); // x + tau (eps - x)
        Tensor rho = residual_impl(u, z_tau, 0.0, tau, c, v);
        const double norm = metrics::weighted_mean_abs(rho, w);
        const double coef = (i == 0 || i + 1 == n_tau) ? 0.5 : 1.0;
        rhs += coef * norm;
    }
    rhs /= static_cast<double>(n_tau - 1);
    return {lhs, rhs};
}

SensitivityEstimate estimate_sensitivity(const worlds::AnalyticKernel& kernel,
                                         const std::vector<std::pair<Tensor, Tensor>>& probes,
                                         std::size_t n_samples, RngStream rng,
                                         const metrics::LatWeights& w) {
    if (probes.empty()) throw std::invalid_argument("estimate_sensitivity: no probes");
    if (kernel.kind == worlds::KernelKind::affine_gaussian) {
        return {kernel.max_abs_gain(), 0};
    }
    SensitivityEstimate best{0.0, 0};
    bool any = false;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        const auto& [c, c_alt] = probes[p];
        Tensor diff = t_sub(c, c_alt);
        const double denom = metrics::weighted_mean_abs(diff, w);
        if (denom == 0.0) continue; // coincident pair
        any = true;
        std::vector<Tensor> draws_a, draws_b;
        draws_a.reserve(n_samples);
        draws_b.reserve(n_samples);
        // common random numbers: replaying the same substream couples the
        // two sample sets without biasing the plug-in W1 estimate
        RngStream sa = rng.child("probe").child(std::uint64_t(p));
        RngStream sb = sa;
        for (std::size_t i = 0; i < n_samples; ++i) {
            draws_a.push_back(worlds::kernel_sample(kernel, c, sa));
        }
        for (std::size_t i = 0; i < n_samples; ++i) {
            draws_b.push_back(worlds::kernel_sample(kernel, c_alt, sb));
        }
        const double ratio = set_w1(draws_a, draws_b, w) / denom;
        if (ratio > best.lambda_hat) best = {ratio, p};
    }
    if (!any) {
        throw std::invalid_argument("estimate_sensitivity: all probe pairs coincide");
    }
    return best;
}

double kernel_gap(const ModelKernel& model, const worlds::AnalyticKernel& kernel, const Tensor& c,
                  std::size_t n_samples, RngStream rng, const metrics::LatWeights& w) {
    if (n_samples < 100) {
        throw std::invalid_argument("kernel_gap: need at least 100 samples");
    }
    const auto cell = kernel.field_shape();
    Tensor rep({n_samples, cell[0], cell[1], cell[2]});
    {
        double* rd = rep.mutable_data();
        const std::size_t per = shape_numel(cell);
        for (std::size_t i = 0; i < n_samples; ++i) {
            std::copy(c.data(), c.data() + per, rd + i * per);
        }
    }
    RngStream model_rng = rng.child("model");
    RngStream true_rng = rng.child("kernel");
    std::vector<Tensor> model_draws = unbatch(model.draw(rep, model_rng));
    std::vector<Tensor> true_draws;
    true_draws.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        true_draws.push_back(worlds::kernel_sample(kernel, c, true_rng));
    }
    return set_w1(model_draws, true_draws, w);
}

bool BoundReport::all_hold() const {
    for (const BoundRow& r : rows) {
        if (!r.holds) return false;
    }
    return !rows.empty();
}

BoundReport verify_rollout_bound(const ModelKernel& model, const worlds::AnalyticKernel& kernel,
                                 const worlds::InitialDist& init, const BoundConfig& cfg,
                                 RngStream rng, const metrics::LatWeights& w) {
    if (cfg.horizon < 1) throw std::invalid_argument("verify_rollout_bound: H >= 1 required");
    const auto cell = kernel.field_shape();
    const std::size_t n = cfg.n_samples;

    auto draw_initials = [&](RngStream s) {
        std::vector<Tensor> states;
        states.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            Tensor x(cell);
            double* xd = x.mutable_data();
            for (std::size_t k = 0; k < x.size(); ++k) {
                xd[k] = init.mean + init.std * s.normal();
            }
            states.push_back(std::move(x));
        }
        return states;
    };

    // model and true chain A share initial draws; chain B is the independent
    // replica used to measure the self-distance floor
    std::vector<Tensor> shared_init = draw_initials(rng.child("init"));
    std::vector<Tensor> floor_init = draw_initials(rng.child("init_floor"));

    std::vector<std::vector<Tensor>> true_a(cfg.horizon + 1), true_b(cfg.horizon + 1),
        model_states(cfg.horizon + 1);
    true_a[0] = shared_init;
    true_b[0] = floor_init;
    model_states[0] = shared_init;

    RngStream rng_a = rng.child("true_a");
    RngStream rng_b = rng.child("true_b");
    RngStream rng_m = rng.child("model");
    for (std::size_t h = 1; h <= cfg.horizon; ++h) {
        true_a[h].reserve(n);
        true_b[h].reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            true_a[h].push_back(worlds::kernel_sample(kernel, true_a[h - 1][i], rng_a));
            true_b[h].push_back(worlds::kernel_sample(kernel, true_b[h - 1][i], rng_b));
        }
        model_states[h] = unbatch(model.draw(batch_states(model_states[h - 1]), rng_m));
    }

    BoundReport report;
    report.n_samples = n;
    report.slack_mult = cfg.slack_mult;

    if (cfg.lambda_override) {
        report.lambda_hat = *cfg.lambda_override;
    } else if (kernel.kind == worlds::KernelKind::affine_gaussian) {
        report.lambda_hat = kernel.max_abs_gain();
    } else {
        // probe pairs around fixed centers (including the maximal-expansion
        // neighborhood of the map) plus quantiles of the visited states
        std::vector<std::pair<Tensor, Tensor>> probes;
        auto add_probe = [&](double center, double half) {
            if (cell == Tensor::Shape{1, 1, 1}) {
                probes.emplace_back(Tensor(cell, std::vector<double>{center - half}),
                                    Tensor(cell, std::vector<double>{center + half}));
            }
        };
        for (double center : {-1.0, -0.5, 0.0, 0.5, 1.0}) add_probe(center, 0.25);
        std::vector<double> visited = flatten_states(model_states[cfg.horizon / 2]);
        std::sort(visited.begin(), visited.end());
        for (double q : {0.05, 0.5, 0.95}) {
            add_probe(visited[static_cast<std::size_t>(q * static_cast<double>(n - 1))], 0.25);
        }
        report.lambda_hat =
            estimate_sensitivity(kernel, probes, std::min<std::size_t>(n, 4000),
                                 rng.child("lambda"), w)
                .lambda_hat;
    }

    // per-step kernel gaps on a deterministic subsample of visited states
    RngStream gap_rng = rng.child("gaps");
    report.gaps.resize(cfg.horizon);
    for (std::size_t j = 0; j < cfg.horizon; ++j) {
        const std::size_t m = std::min(cfg.gap_states, n);
        double acc = 0.0;
        for (std::size_t s = 0; s < m; ++s) {
            const std::size_t idx = s * n / m;
            acc += kernel_gap(model, kernel, model_states[j][idx], cfg.gap_samples,
                              gap_rng.child(std::uint64_t(j)).child(std::uint64_t(s)), w);
        }
        report.gaps[j] = acc / static_cast<double>(m);
    }

    double rhs_recursive = 0.0;
    for (std::size_t h = 1; h <= cfg.horizon; ++h) {
        rhs_recursive = report.lambda_hat * rhs_recursive + report.gaps[h - 1];
        const double lhs = set_w1(model_states[h], true_a[h], w);
        const double floor = set_w1(true_a[h], true_b[h], w);
        BoundRow row;
        row.h = h;
        row.lhs = lhs;
        row.rhs = rhs_recursive;
        row.mean_gap = report.gaps[h - 1];
        row.floor = floor;
        row.holds = lhs <= rhs_recursive + cfg.slack_mult * floor;
        report.rows.push_back(row);
    }
    return report;
}

void write_bound_csv(const BoundReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write bound csv: " + path);
    out << "h,lhs,rhs,lambda_hat,mean_gap,floor,holds\n";
    for (const BoundRow& r : report.rows) {
        out << r.h << "," << metrics::format_sig12(r.lhs) << ","
            << metrics::format_sig12(r.rhs) << "," << metrics::format_sig12(report.lambda_hat)
            << "," << metrics::format_sig12(r.mean_gap) << ","
            << metrics::format_sig12(r.floor) << "," << (r.holds ? "true" : "false") << "\n";
    }
    if (!out) throw std::runtime_error("write failure: " + path);
}

std::pair<double, double> crps_w1_relation_check(const std::vector<double>& members, double y) {
    if (members.empty()) {
        throw std::invalid_argument("crps_w1_relation_check: no members");
    }
    std::vector<Tensor> fields;
    fields.reserve(members.size());
    for (double m : members) fields.emplace_back(Tensor::Shape{1, 1, 1}, std::vector<double>{m});
    const metrics::LatWeights w = metrics::LatWeights::uniform(1);
    const double crps = metrics::crps_eval({fields}, {Tensor({1, 1, 1}, std::vector<double>{y})},
                                           w, metrics::CrpsVariant::paper);
    const double w1 = metrics::wasserstein1_1d(members, std::vector<double>(members.size(), y));
    return {crps, w1};
}

} // namespace avf::bench
