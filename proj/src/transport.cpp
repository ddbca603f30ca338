// SPDX-License-Identifier: Apache-2.0
#include "avf/transport.hpp"

#include <cmath>
#include <stdexcept>

namespace avf::transport {

void TimeSamplerConfig::validate() const {
    if (boundary_fraction < 0.0 || boundary_fraction > 1.0) {
        throw std::invalid_argument("TimeSamplerConfig: boundary_fraction outside [0,1]");
    }
    if (logit_sigma <= 0.0) {
        throw std::invalid_argument("TimeSamplerConfig: logit_sigma must be positive");
    }
}

std::pair<Tensor, Tensor> sample_path(const Tensor& target, const Tensor& noise, double t) {
    if (!target.same_shape(noise)) {
        throw std::invalid_argument("sample_path: target shape " +
                                    shape_to_string(target.shape()) + " vs noise shape " +
                                    shape_to_string(noise.shape()));
    }
    if (t < 0.0 || t > 1.0) {
        throw std::invalid_argument("sample_path: t outside [0,1]");
    }
    Tensor z(target.shape());
    Tensor v(target.shape());
    double* zd = z.mutable_data();
    double* vd = v.mutable_data();
    const double* xd = target.data();
    const double* ed = noise.data();
    for (std::size_t i = 0; i < target.size(); ++i) {
        zd[i] = (1.0 - t) * xd[i] + t * ed[i];
        vd[i] = ed[i] - xd[i];
    }
    return {std::move(z), std::move(v)};
}

PathSample make_path_sample(Tensor target, Tensor noise, Tensor conditioning, double r,
                            double t) {
    if (!(0.0 <= r && r <= t && t <= 1.0)) {
        throw std::invalid_argument("make_path_sample: need 0 <= r <= t <= 1, got r=" +
                                    std::to_string(r) + " t=" + std::to_string(t));
    }
    auto [z, v] = sample_path(target, noise, t);
    PathSample ps;
    ps.z_t = std::move(z);
    ps.v_t = std::move(v);
    ps.t = t;
    ps.r = r;
    ps.conditioning = std::move(conditioning);
    ps.target = std::move(target);
    ps.noise = std::move(noise);
    return ps;
}

std::pair<double, double> sample_times(RngStream& rng, const TimeSamplerConfig& cfg) {
    cfg.validate();
    double r, t;
    if (cfg.scheme == TimeScheme::logit_normal_order) {
        auto logit_normal = [&] {
            const double n = cfg.logit_mu + cfg.logit_sigma * rng.normal();
            return 1.0 / (1.0 + std::exp(-n));
        };
        const double a = logit_normal();
        const double b = logit_normal();
        t = std::max(a, b);
        r = std::min(a, b);
    } else {
        t = rng.uniform();
        r = rng.uniform() * t;
    }
    if (rng.uniform() < cfg.boundary_fraction) r = t;
    return {r, t};
}

Tensor NetVelocity::eval(const Tensor& z, const std::vector<double>& r,
                         const std::vector<double>& t, const Tensor& c) const {
    count(z.shape().empty() ? 1 : z.shape()[0]);
    return net::forward_batch(params_, z, r, t, c);
}

std::pair<Tensor, Tensor> NetVelocity::eval_jvp(const Tensor& z, const std::vector<double>& r,
                                                const std::vector<double>& t, const Tensor& c,
                                                const Tensor& vz) const {
    count(z.shape().empty() ? 1 : z.shape()[0]);
    Graph g;
    auto vars = net::leaf_params(g, params_);
    Var zr = g.leaf(z, vz);
    Var tr = g.leaf(Tensor({t.size()}, std::vector<double>(t)),
                    Tensor({t.size()}, std::vector<double>(t.size(), 1.0)));
    Var rr = g.leaf(Tensor({r.size()}, std::vector<double>(r)));
    Var cr = g.leaf(c);
    Var u = net::net_forward(g, vars, params_.config, zr, rr, tr, cr);
    return {u.value(), u.tangent()};
}

Tensor as_batch(const Tensor& field, const Tensor::Shape& cell_shape) {
    if (field.rank() == 4) return field;
    if (field.shape() == cell_shape) {
        Tensor::Shape s = cell_shape;
        s.insert(s.begin(), 1);
        return Tensor(s, field.to_vector());
    }
    throw std::invalid_argument("field of shape " + shape_to_string(field.shape()) +
                                " does not match grid " + shape_to_string(cell_shape));
}

Tensor from_batch(const Tensor& batched, const Tensor::Shape& cell_shape) {
    if (batched.rank() == 4 && batched.shape()[0] == 1) {
        return Tensor(cell_shape, batched.to_vector());
    }
    return batched;
}

RectifiedTarget rectified_target(const VelocityField& net, const Tensor& z, double r, double t,
                                 const Tensor& c, const Tensor& v) {
    const auto cell = net.field_shape();
    Tensor zb = as_batch(z, cell);
    Tensor cb = as_batch(c, cell);
    Tensor vb = as_batch(v, cell);
    auto [u, du] = net.eval_jvp(zb, {r}, {t}, cb, vb);
    // u_tgt = v - (t - r) * du, held constant for the loss
    Tensor u_tgt = t_axpy(-(t - r), du, vb);
    const bool single = z.rank() == 3;
    RectifiedTarget out;
    out.u_tgt = single ? Tensor(cell, u_tgt.to_vector()) : u_tgt;
    out.u_val = single ? Tensor(cell, u.to_vector()) : u;
    return out;
}

Var stage1_loss_graph(Graph& g, const std::vector<Var>& params, const net::NetConfig& cfg,
                      const Tensor& conditioning, const Tensor& target, const Tensor& noise,
                      const std::vector<double>& r, const std::vector<double>& t) {
    const std::size_t B = conditioning.shape().empty() ? 0 : conditioning.shape()[0];
    if (B == 0) throw std::invalid_argument("stage1_loss: empty batch");

    // path construction with per-sample times
    Tensor z(target.shape());
    Tensor v(target.shape());
    {
        double* zd = z.mutable_data();
        double* vd = v.mutable_data();
        const double* xd = target.data();
        const double* ed = noise.data();
        const std::size_t per = target.size() / B;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < per; ++i) {
                const std::size_t k = b * per + i;
                zd[k] = (1.0 - t[b]) * xd[k] + t[b] * ed[k];
                vd[k] = ed[k] - xd[k];
            }
        }
    }

    Var zr = g.leaf(z, v); // tangent v in z
    Var tr = g.leaf(Tensor({B}, std::vector<double>(t)),
                    Tensor({B}, std::vector<double>(B, 1.0))); // tangent 1 in t
    Var rr = g.leaf(Tensor({B}, std::vector<double>(r)));
    Var cr = g.leaf(conditioning);
    Var u = net::net_forward(g, params, cfg, zr, rr, tr, cr);

    // u_tgt = v - (t - r) * du with du read off the forward-mode tangent;
    // entering it as a fresh leaf is the stop-gradient.
    Tensor du = u.tangent();
    Tensor u_tgt(du.shape());
    {
        double* ud = u_tgt.mutable_data();
        const double* dd = du.data();
        const double* vd = v.data();
        const std::size_t per = du.size() / B;
        for (std::size_t b = 0; b < B; ++b) {
            const double gap = t[b] - r[b];
            for (std::size_t i = 0; i < per; ++i) {
                const std::size_t k = b * per + i;
                ud[k] = vd[k] - gap * dd[k];
            }
        }
    }
    return mean_all(square(sub(u, g.leaf(std::move(u_tgt)))));
}

double stage1_loss(const net::NetParams& params,
                   const std::vector<std::pair<Tensor, Tensor>>& batch, RngStream& rng,
                   const TimeSamplerConfig& cfg) {
    if (batch.empty()) throw std::invalid_argument("stage1_loss: empty batch");
    const auto& nc = params.config;
    const std::size_t B = batch.size();
    const std::size_t per = nc.channels * nc.grid_h * nc.grid_w;
    Tensor cond({B, nc.channels, nc.grid_h, nc.grid_w});
    Tensor target(cond.shape());
    Tensor noise(cond.shape());
    std::vector<double> r(B), t(B);
    double* cd = cond.mutable_data();
    double* xd = target.mutable_data();
    double* ed = noise.mutable_data();
    for (std::size_t b = 0; b < B; ++b) {
        const auto& [c, x] = batch[b];
        std::copy(c.data(), c.data() + per, cd + b * per);
        std::copy(x.data(), x.data() + per, xd + b * per);
        Tensor eps = rng.gaussian({nc.channels, nc.grid_h, nc.grid_w});
        std::copy(eps.data(), eps.data() + per, ed + b * per);
        std::tie(r[b], t[b]) = sample_times(rng, cfg);
    }
    Graph g;
    auto vars = net::leaf_params(g, params);
    return stage1_loss_graph(g, vars, nc, cond, target, noise, r, t).value().item();
}

Tensor sample_one_step(const VelocityField& u, const Tensor& noise, const Tensor& c) {
    const auto cell = u.field_shape();
    Tensor nb = as_batch(noise, cell);
    Tensor cb = as_batch(c, cell);
    if (!nb.same_shape(cb)) {
        throw std::invalid_argument("sample_one_step: noise shape " +
                                    shape_to_string(noise.shape()) +
                                    " vs conditioning shape " + shape_to_string(c.shape()));
    }
    const std::size_t B = nb.shape()[0];
    Tensor uval = u.eval(nb, std::vector<double>(B, 0.0), std::vector<double>(B, 1.0), cb);
    Tensor out = t_sub(nb, uval);
    return noise.rank() == 3 ? from_batch(out, cell) : out;
}

Tensor sample_multi_step(const VelocityField& u, const Tensor& noise, const Tensor& c,
                         std::size_t n_segments) {
    if (n_segments == 0) {
        throw std::invalid_argument("sample_multi_step: n_segments must be >= 1");
    }
    const auto cell = u.field_shape();
    Tensor z = as_batch(noise, cell);
    Tensor cb = as_batch(c, cell);
    const std::size_t B = z.shape()[0];
    const double n = static_cast<double>(n_segments);
    for (std::size_t i = 0; i < n_segments; ++i) {
        const double s_hi = 1.0 - static_cast<double>(i) / n;
        const double s_lo = 1.0 - static_cast<double>(i + 1) / n;
        Tensor uval = u.eval(z, std::vector<double>(B, s_lo), std::vector<double>(B, s_hi), cb);
        z = t_axpy(-(s_hi - s_lo), uval, z);
    }
    return noise.rank() == 3 ? from_batch(z, cell) : z;
}

} // namespace avf::transport
