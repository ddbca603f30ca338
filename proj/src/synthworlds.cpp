// SPDX-License-Identifier: Apache-2.0
#include "avf/synthworlds.hpp"

#include <cmath>
#include <stdexcept>

#include "avf/binio.hpp"

namespace avf::worlds {

double AnalyticKernel::max_abs_gain() const {
    double m = 0.0;
    for (double g : gain) m = std::max(m, std::fabs(g));
    return m;
}

void AnalyticKernel::validate() const {
    if (noise_std < 0.0) throw std::invalid_argument("kernel: noise_std must be >= 0");
    if (channels == 0 || grid_h == 0 || grid_w == 0) {
        throw std::invalid_argument("kernel: zero-sized grid");
    }
    if (kind == KernelKind::affine_gaussian) {
        if (gain.size() != 1 && gain.size() != channels) {
            throw std::invalid_argument("kernel: gain must be scalar or per-channel");
        }
    }
    if (kind == KernelKind::advection2d) {
        const double vmax = std::max(std::fabs(vx), std::fabs(vy));
        double bound = std::numeric_limits<double>::infinity();
        if (vmax > 0.0) bound = std::min(bound, 1.0 / vmax);
        if (kappa > 0.0) bound = std::min(bound, 1.0 / (4.0 * kappa));
        bound *= 0.5;
        if (time_step <= 0.0 || time_step > bound) {
            throw std::invalid_argument("advection2d: time_step " + std::to_string(time_step) +
                                        " violates the stability bound " + std::to_string(bound));
        }
    }
}

AnalyticKernel AnalyticKernel::affine(std::vector<double> gain, double bias, double noise_std,
                                      std::size_t channels, std::size_t h, std::size_t w) {
    AnalyticKernel k;
    k.kind = KernelKind::affine_gaussian;
    k.gain = std::move(gain);
    k.bias = bias;
    k.noise_std = noise_std;
    k.channels = channels;
    k.grid_h = h;
    k.grid_w = w;
    k.validate();
    return k;
}

AnalyticKernel AnalyticKernel::chaotic(double a, double b, double omega, double noise_std,
                                       std::size_t channels, std::size_t h, std::size_t w) {
    AnalyticKernel k;
    k.kind = KernelKind::chaotic_map;
    k.a = a;
    k.b = b;
    k.omega = omega;
    k.noise_std = noise_std;
    k.channels = channels;
    k.grid_h = h;
    k.grid_w = w;
    k.validate();
    return k;
}

AnalyticKernel AnalyticKernel::advection(std::size_t channels, std::size_t h, std::size_t w,
                                         double vx, double vy, double kappa, double forcing_std,
                                         double time_step) {
    AnalyticKernel k;
    k.kind = KernelKind::advection2d;
    k.channels = channels;
    k.grid_h = h;
    k.grid_w = w;
    k.vx = vx;
    k.vy = vy;
    k.kappa = kappa;
    k.forcing_std = forcing_std;
    k.time_step = time_step;
    k.validate();
    return k;
}

namespace {

void check_state(const AnalyticKernel& k, const Tensor& c, const char* op) {
    if (c.shape() != k.field_shape()) {
        throw std::invalid_argument(std::string(op) + ": state shape " +
                                    shape_to_string(c.shape()) + " does not match kernel grid " +
                                    shape_to_string(k.field_shape()));
    }
}

// periodic 5-point Laplacian, unit spacing
void laplacian(const double* u, double* out, std::size_t H, std::size_t W) {
    for (std::size_t i = 0; i < H; ++i) {
        const std::size_t up = (i + H - 1) % H, dn = (i + 1) % H;
        for (std::size_t j = 0; j < W; ++j) {
            const std::size_t lf = (j + W - 1) % W, rt = (j + 1) % W;
            out[i * W + j] = u[up * W + j] + u[dn * W + j] + u[i * W + lf] + u[i * W + rt] -
                             4.0 * u[i * W + j];
        }
    }
}

Tensor advection_step(const AnalyticKernel& k, const Tensor& c, RngStream* rng) {
    const std::size_t C = k.channels, H = k.grid_h, W = k.grid_w;
    Tensor out(c.shape());
    double* od = out.mutable_data();
    const double* cd = c.data();
    std::vector<double> lap(H * W);
    std::vector<double> force(H * W);
    std::vector<double> force_smooth(H * W);
    for (std::size_t ch = 0; ch < C; ++ch) {
        const double* u = cd + ch * H * W;
        double* v = od + ch * H * W;
        laplacian(u, lap.data(), H, W);
        for (std::size_t i = 0; i < H; ++i) {
            const std::size_t up = (i + H - 1) % H, dn = (i + 1) % H;
            for (std::size_t j = 0; j < W; ++j) {
                const std::size_t lf = (j + W - 1) % W, rt = (j + 1) % W;
                // first-order upwind derivatives
                const double dudx = k.vx >= 0.0 ? u[i * W + j] - u[i * W + lf]
                                                : u[i * W + rt] - u[i * W + j];
                const double dudy = k.vy >= 0.0 ? u[i * W + j] - u[up * W + j]
                                                : u[dn * W + j] - u[i * W + j];
                v[i * W + j] = u[i * W + j] -
                               k.time_step * (k.vx * dudx + k.vy * dudy) +
                               k.time_step * k.kappa * lap[i * W + j];
            }
        }
        if (rng != nullptr && k.forcing_std > 0.0) {
            for (std::size_t i = 0; i < H * W; ++i) force[i] = rng->normal();
            // one diffusion pass smooths the white noise before injection
            laplacian(force.data(), force_smooth.data(), H, W);
            for (std::size_t i = 0; i < H * W; ++i) {
                v[i] += k.forcing_std * (force[i] + 0.25 * force_smooth[i]);
            }
        }
    }
    return out;
}

} // namespace

Tensor kernel_mean(const AnalyticKernel& k, const Tensor& c) {
    check_state(k, c, "kernel_mean");
    switch (k.kind) {
        case KernelKind::affine_gaussian: {
            Tensor out(c.shape());
            double* od = out.mutable_data();
            const double* cd = c.data();
            const std::size_t per = k.grid_h * k.grid_w;
            for (std::size_t ch = 0; ch < k.channels; ++ch) {
                const double g = k.gain_for_channel(ch);
                for (std::size_t i = 0; i < per; ++i) {
                    od[ch * per + i] = g * cd[ch * per + i] + k.bias;
                }
            }
            return out;
        }
        case KernelKind::chaotic_map: {
            Tensor out(c.shape());
            double* od = out.mutable_data();
            const double* cd = c.data();
            for (std::size_t i = 0; i < c.size(); ++i) {
                od[i] = k.a * cd[i] + k.b * std::sin(k.omega * cd[i]);
            }
            return out;
        }
        case KernelKind::advection2d:
            return advection_step(k, c, nullptr);
    }
    throw std::logic_error("kernel_mean: unknown kind");
}

Tensor kernel_sample(const AnalyticKernel& k, const Tensor& c, RngStream& rng) {
    check_state(k, c, "kernel_sample");
    if (k.kind == KernelKind::advection2d) {
        return advection_step(k, c, &rng);
    }
    Tensor out = kernel_mean(k, c);
    if (k.noise_std > 0.0) {
        double* od = out.mutable_data();
        for (std::size_t i = 0; i < out.size(); ++i) od[i] += k.noise_std * rng.normal();
    }
    return out;
}

double kernel_w1_gap(const AnalyticKernel& k, const Tensor& c, const Tensor& c_alt,
                     const metrics::LatWeights& w) {
    if (k.kind != KernelKind::affine_gaussian) {
        throw std::invalid_argument(
            "kernel_w1_gap: closed form exists for affine_gaussian only; "
            "use the sampled estimator instead");
    }
    check_state(k, c, "kernel_w1_gap");
    check_state(k, c_alt, "kernel_w1_gap");
    // equal-variance Gaussians: per-cell W1 is the mean difference |g| |c - c'|
    Tensor diff(c.shape());
    double* dd = diff.mutable_data();
    const double* a = c.data();
    const double* b = c_alt.data();
    const std::size_t per = k.grid_h * k.grid_w;
    for (std::size_t ch = 0; ch < k.channels; ++ch) {
        const double g = std::fabs(k.gain_for_channel(ch));
        for (std::size_t i = 0; i < per; ++i) {
            dd[ch * per + i] = g * (a[ch * per + i] - b[ch * per + i]);
        }
    }
    return metrics::weighted_mean_abs(diff, w);
}

OracleVelocity::OracleVelocity(AnalyticKernel kernel) : kernel_(std::move(kernel)) {
    if (kernel_.kind != KernelKind::affine_gaussian) {
        throw std::invalid_argument("OracleVelocity: affine_gaussian kernel required");
    }
}

Var OracleVelocity::eval_graph(Graph& g, Var z, Var r, Var t, Var c) const {
    const std::size_t B = z.value().shape()[0];
    const std::size_t C = kernel_.channels;
    for (std::size_t i = 0; i < B; ++i) {
        if (r.value().at(i) > t.value().at(i)) {
            throw std::invalid_argument("oracle_avg_velocity: requires r <= t, got r=" +
                                        std::to_string(r.value().at(i)) +
                                        " t=" + std::to_string(t.value().at(i)));
        }
    }
    Tensor gain({1, C, 1, 1});
    for (std::size_t ch = 0; ch < C; ++ch) gain.mutable_data()[ch] = kernel_.gain_for_channel(ch);
    Var m = add_scalar(mul(c, g.leaf(gain)), kernel_.bias); // conditional mean field

    // The flow-map form (z - z_r)/(t - r) is 0/0 at r = t. Algebraically
    //   u = -m + (z - mu_t) [(t + r) - s2 (2 - r - t)] / (sigma_t (sigma_t + sigma_r)),
    // which is the same field for r < t and extends continuously to the
    // instantaneous velocity at r = t.
    const double s2 = kernel_.noise_std * kernel_.noise_std;
    auto path_std = [&](Var s) {
        Var one_minus = add_scalar(neg(s), 1.0);
        Var v = add(mul_scalar(square(one_minus), s2), square(s));
        return reshape(sqrt(v), {B, 1, 1, 1});
    };
    Var sig_t = path_std(t);
    Var sig_r = path_std(r);
    Var sum_rt = reshape(add(t, r), {B, 1, 1, 1});
    Var numer = sub(sum_rt, mul_scalar(add_scalar(neg(sum_rt), 2.0), s2));
    Var coef = div(numer, mul(sig_t, add(sig_t, sig_r)));
    Var mu_t = mul(reshape(add_scalar(neg(t), 1.0), {B, 1, 1, 1}), m);
    return add(neg(m), mul(coef, sub(z, mu_t)));
}

Tensor OracleVelocity::eval(const Tensor& z, const std::vector<double>& r,
                            const std::vector<double>& t, const Tensor& c) const {
    count(z.shape()[0]);
    Graph g;
    Var zr = g.leaf(z);
    Var rr = g.leaf(Tensor({r.size()}, std::vector<double>(r)));
    Var tr = g.leaf(Tensor({t.size()}, std::vector<double>(t)));
    Var cr = g.leaf(c);
    return eval_graph(g, zr, rr, tr, cr).value();
}

std::pair<Tensor, Tensor> OracleVelocity::eval_jvp(const Tensor& z, const std::vector<double>& r,
                                                   const std::vector<double>& t, const Tensor& c,
                                                   const Tensor& vz) const {
    count(z.shape()[0]);
    Graph g;
    Var zr = g.leaf(z, vz);
    Var rr = g.leaf(Tensor({r.size()}, std::vector<double>(r)));
    Var tr = g.leaf(Tensor({t.size()}, std::vector<double>(t)),
                    Tensor({t.size()}, std::vector<double>(t.size(), 1.0)));
    Var cr = g.leaf(c);
    Var u = eval_graph(g, zr, rr, tr, cr);
    return {u.value(), u.tangent()};
}

Tensor oracle_avg_velocity(const AnalyticKernel& kernel, const Tensor& z, double r, double t,
                           const Tensor& c) {
    if (!(r < t)) {
        throw std::invalid_argument("oracle_avg_velocity: requires r < t, got r=" +
                                    std::to_string(r) + " t=" + std::to_string(t));
    }
    OracleVelocity field(kernel);
    Tensor zb = transport::as_batch(z, kernel.field_shape());
    Tensor cb = transport::as_batch(c, kernel.field_shape());
    Tensor out = field.eval(zb, {r}, {t}, cb);
    return Tensor(kernel.field_shape(), out.to_vector());
}

Tensor oracle_instant_velocity(const AnalyticKernel& kernel, const Tensor& z, double t,
                               const Tensor& c) {
    if (kernel.kind != KernelKind::affine_gaussian) {
        throw std::invalid_argument("oracle_instant_velocity: affine_gaussian kernel required");
    }
    check_state(kernel, z, "oracle_instant_velocity");
    Tensor m = kernel_mean(kernel, c);
    const double s2 = kernel.noise_std * kernel.noise_std;
    const double var = (1.0 - t) * (1.0 - t) * s2 + t * t;
    const double sigma = std::sqrt(var);
    const double dsigma = (t - (1.0 - t) * s2) / sigma;
    Tensor out(z.shape());
    double* od = out.mutable_data();
    const double* zd = z.data();
    const double* md = m.data();
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double mu = (1.0 - t) * md[i];
        od[i] = -md[i] + (dsigma / sigma) * (zd[i] - mu);
    }
    return out;
}

std::vector<double> default_latitudes(std::size_t rows) {
    std::vector<double> lats(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        lats[i] = -80.0 + (static_cast<double>(i) + 0.5) * 160.0 / static_cast<double>(rows);
    }
    return lats;
}

Tensor Dataset::field(std::size_t t) const {
    const auto& s = fields.shape();
    if (t >= s[0]) {
        throw std::out_of_range("Dataset::field: index " + std::to_string(t) + " of " +
                                std::to_string(s[0]));
    }
    const std::size_t per = s[1] * s[2] * s[3];
    std::vector<double> vals(fields.data() + t * per, fields.data() + (t + 1) * per);
    return Tensor({s[1], s[2], s[3]}, std::move(vals));
}

NormStats compute_norm_stats(const Tensor& fields, std::size_t train_end) {
    const auto& s = fields.shape();
    const std::size_t C = s[1], per = s[2] * s[3];
    if (train_end == 0 || train_end > s[0]) {
        throw std::invalid_argument("compute_norm_stats: bad train split");
    }
    NormStats stats;
    stats.mean.assign(C, 0.0);
    stats.std.assign(C, 0.0);
    const double n = static_cast<double>(train_end * per);
    const double* d = fields.data();
    for (std::size_t t = 0; t < train_end; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < per; ++i) stats.mean[c] += d[(t * C + c) * per + i];
    for (std::size_t c = 0; c < C; ++c) stats.mean[c] /= n;
    for (std::size_t t = 0; t < train_end; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < per; ++i) {
                const double dev = d[(t * C + c) * per + i] - stats.mean[c];
                stats.std[c] += dev * dev;
            }
    for (std::size_t c = 0; c < C; ++c) {
        stats.std[c] = std::sqrt(stats.std[c] / n);
        if (!(stats.std[c] > 0.0)) {
            throw std::invalid_argument("compute_norm_stats: channel " + std::to_string(c) +
                                        " has zero variance in the training split");
        }
    }
    return stats;
}

namespace {
Tensor affine_channelwise(const Tensor& x, const NormStats& stats, bool forward) {
    if (x.rank() != 3 || x.shape()[0] != stats.mean.size()) {
        throw std::invalid_argument("normalize: field shape " + shape_to_string(x.shape()) +
                                    " does not match " + std::to_string(stats.mean.size()) +
                                    " channels");
    }
    Tensor out(x.shape());
    double* od = out.mutable_data();
    const double* xd = x.data();
    const std::size_t per = x.shape()[1] * x.shape()[2];
    for (std::size_t c = 0; c < stats.mean.size(); ++c) {
        for (std::size_t i = 0; i < per; ++i) {
            const std::size_t k = c * per + i;
            od[k] = forward ? (xd[k] - stats.mean[c]) / stats.std[c]
                            : xd[k] * stats.std[c] + stats.mean[c];
        }
    }
    return out;
}
} // namespace

Tensor normalize(const Tensor& x, const NormStats& stats) {
    return affine_channelwise(x, stats, true);
}
Tensor denormalize(const Tensor& x, const NormStats& stats) {
    return affine_channelwise(x, stats, false);
}

Dataset generate_dataset(const AnalyticKernel& kernel, const InitialDist& init,
                         std::size_t steps, RngStream rng, const SplitSpec& split,
                         std::size_t burn_in) {
    if (steps < 2) throw std::invalid_argument("generate_dataset: need at least 2 steps");
    kernel.validate();
    Dataset ds;
    const auto cell = kernel.field_shape();
    const std::size_t per = shape_numel(cell);
    ds.fields = Tensor({steps, cell[0], cell[1], cell[2]});
    ds.latitudes = default_latitudes(kernel.grid_h);

    RngStream init_rng = rng.child("init");
    RngStream step_rng = rng.child("steps");
    Tensor state(cell);
    {
        double* sd = state.mutable_data();
        for (std::size_t i = 0; i < per; ++i) sd[i] = init.mean + init.std * init_rng.normal();
    }
    for (std::size_t t = 0; t < burn_in; ++t) state = kernel_sample(kernel, state, step_rng);

    double* fd = ds.fields.mutable_data();
    std::copy(state.data(), state.data() + per, fd);
    for (std::size_t t = 1; t < steps; ++t) {
        state = kernel_sample(kernel, state, step_rng);
        std::copy(state.data(), state.data() + per, fd + t * per);
    }

    ds.train_end = static_cast<std::size_t>(split.train_frac * static_cast<double>(steps));
    ds.val_end = ds.train_end +
                 static_cast<std::size_t>(split.val_frac * static_cast<double>(steps));
    ds.train_end = std::max<std::size_t>(2, std::min(ds.train_end, steps - 1));
    ds.val_end = std::max(ds.train_end, std::min(ds.val_end, steps));
    ds.stats = compute_norm_stats(ds.fields, ds.train_end);
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    const auto& s = ds.fields.shape();
    BinWriter w(path);
    w.magic("AVFD");
    w.u32(1); // format version
    w.u32(static_cast<std::uint32_t>(s[0]));
    w.u32(static_cast<std::uint32_t>(s[1]));
    w.u32(static_cast<std::uint32_t>(s[2]));
    w.u32(static_cast<std::uint32_t>(s[3]));
    for (double lat : ds.latitudes) w.f64(lat);
    for (double m : ds.stats.mean) w.f64(m);
    for (double sd : ds.stats.std) w.f64(sd);
    w.f64_array(ds.fields.data(), ds.fields.size());
    w.close();
}

AnalyticKernel normalized_kernel(const AnalyticKernel& kernel, const NormStats& stats) {
    if (kernel.kind != KernelKind::affine_gaussian) {
        throw std::invalid_argument("normalized_kernel: affine_gaussian kernel required");
    }
    if (stats.mean.size() != kernel.channels) {
        throw std::invalid_argument("normalized_kernel: stats channel count mismatch");
    }
    // x' = a x + bias + sigma xi  =>  x'_n = a x_n + (a mu + bias - mu)/s + (sigma/s) xi.
    // A shared bias/noise only stays exact when the per-channel rescaling
    // agrees, which holds for the scalar and homogeneous grids used here.
    AnalyticKernel out = kernel;
    const double mu = stats.mean[0];
    const double s = stats.std[0];
    for (std::size_t c = 1; c < stats.mean.size(); ++c) {
        if (std::fabs(stats.mean[c] - mu) > 1e-12 || std::fabs(stats.std[c] - s) > 1e-12) {
            throw std::invalid_argument(
                "normalized_kernel: per-channel stats differ; shared bias cannot represent "
                "the normalized kernel");
        }
    }
    const double a0 = kernel.gain_for_channel(0);
    for (double g : kernel.gain) {
        if (std::fabs(g - a0) > 1e-12) {
            throw std::invalid_argument("normalized_kernel: per-channel gains unsupported");
        }
    }
    out.bias = (a0 * mu + kernel.bias - mu) / s;
    out.noise_std = kernel.noise_std / s;
    return out;
}

Dataset load_dataset(const std::string& path, const SplitSpec& split) {
    BinReader r(path);
    r.expect_magic("AVFD");
    const std::uint32_t version = r.u32();
    if (version != 1) {
        throw std::runtime_error(path + ": unsupported dataset version " +
                                 std::to_string(version));
    }
    const std::size_t T = r.u32(), C = r.u32(), H = r.u32(), W = r.u32();
    Dataset ds;
    ds.latitudes = r.f64_array(H);
    ds.stats.mean = r.f64_array(C);
    ds.stats.std = r.f64_array(C);
    ds.fields = Tensor({T, C, H, W}, r.f64_array(T * C * H * W));
    ds.train_end = static_cast<std::size_t>(split.train_frac * static_cast<double>(T));
    ds.val_end = ds.train_end + static_cast<std::size_t>(split.val_frac * static_cast<double>(T));
    ds.train_end = std::max<std::size_t>(2, std::min(ds.train_end, T - 1));
    ds.val_end = std::max(ds.train_end, std::min(ds.val_end, T));
    return ds;
}

} // namespace avf::worlds
