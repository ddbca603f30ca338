// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <utility>
#include <vector>

#include "avf/graph.hpp"
#include "avf/rng.hpp"
#include "avf/velnet.hpp"

namespace avf::transport {

/// One point on the generative path z_t = (1-t)*target + t*noise.
struct PathSample {
    Tensor z_t;
    Tensor v_t;
    double t = 0.0;
    double r = 0.0;
    Tensor conditioning;
    Tensor target;
    Tensor noise;
};

enum class TimeScheme {
    logit_normal_order, // two logit-normal draws, larger becomes t
    uniform_nested,     // t ~ U[0,1], r ~ U[0,t]
};

struct TimeSamplerConfig {
    double logit_mu = -0.4;
    double logit_sigma = 1.0;
    double boundary_fraction = 0.25; // probability of forcing r = t
    TimeScheme scheme = TimeScheme::logit_normal_order;
    void validate() const;
};

/// z_t and v_t of the linear path at time t.
std::pair<Tensor, Tensor> sample_path(const Tensor& target, const Tensor& noise, double t);

/// Assembles a full path sample; z_t and v_t are derived from the inputs so
/// the type's invariants hold by construction.
PathSample make_path_sample(Tensor target, Tensor noise, Tensor conditioning, double r,
                            double t);

/// Draw (r, t) with 0 <= r <= t <= 1.
std::pair<double, double> sample_times(RngStream& rng, const TimeSamplerConfig& cfg);

/// A conditional velocity field u(z, r, t, c) with per-member NFE accounting.
/// Evaluations are batched over the leading axis; the counter advances by
/// the batch size, i.e. once per member forward.
class VelocityField {
public:
    virtual ~VelocityField() = default;

    /// Field extents (C, H, W) this field operates on.
    virtual Tensor::Shape field_shape() const = 0;

    /// u(z, r, t, c) for z, c of shape (B, C, H, W) and per-row times.
    virtual Tensor eval(const Tensor& z, const std::vector<double>& r,
                        const std::vector<double>& t, const Tensor& c) const = 0;

    /// Value and forward-mode directional derivative in (z, t) along the
    /// tangent (vz, 1); r and c carry zero tangent.
    virtual std::pair<Tensor, Tensor> eval_jvp(const Tensor& z, const std::vector<double>& r,
                                               const std::vector<double>& t, const Tensor& c,
                                               const Tensor& vz) const = 0;

    std::uint64_t nfe() const { return nfe_.load(); }
    void reset_nfe() const { nfe_.store(0); }

protected:
    void count(std::size_t batch) const { nfe_.fetch_add(batch); }

private:
    mutable std::atomic<std::uint64_t> nfe_{0};
};

/// The learned network as a velocity field.
class NetVelocity : public VelocityField {
public:
    explicit NetVelocity(net::NetParams params) : params_(std::move(params)) {}

    const net::NetParams& params() const { return params_; }
    net::NetParams& params() { return params_; }

    Tensor::Shape field_shape() const override {
        return {params_.config.channels, params_.config.grid_h, params_.config.grid_w};
    }
    Tensor eval(const Tensor& z, const std::vector<double>& r, const std::vector<double>& t,
                const Tensor& c) const override;
    std::pair<Tensor, Tensor> eval_jvp(const Tensor& z, const std::vector<double>& r,
                                       const std::vector<double>& t, const Tensor& c,
                                       const Tensor& vz) const override;

private:
    net::NetParams params_;
};

/// Rectified training target u_tgt = v - (t-r) * d/dt u, with the total
/// derivative taken along the tangent [v, 0, 1] in (z, r, t).
struct RectifiedTarget {
    Tensor u_tgt; // gradient-stopped by construction (plain tensor)
    Tensor u_val; // primal net output at (z, r, t, c), reused by the loss
};
RectifiedTarget rectified_target(const VelocityField& net, const Tensor& z, double r, double t,
                                 const Tensor& c, const Tensor& v);

/// In-graph Stage-I loss on a batch already expanded to (B, C, H, W) tensors,
/// with per-sample times. The target tensor enters only through the
/// gradient-stopped rectified target; the differentiable path runs through
/// the primal of the JVP evaluation.
Var stage1_loss_graph(Graph& g, const std::vector<Var>& params, const net::NetConfig& cfg,
                      const Tensor& conditioning, const Tensor& target, const Tensor& noise,
                      const std::vector<double>& r, const std::vector<double>& t);

/// Spec-level Stage-I loss: draws noise and times internally.
double stage1_loss(const net::NetParams& params,
                   const std::vector<std::pair<Tensor, Tensor>>& batch /*(cond, target)*/,
                   RngStream& rng, const TimeSamplerConfig& cfg);

/// x_hat = noise - u(noise, 0, 1, c); exactly one field evaluation per member.
Tensor sample_one_step(const VelocityField& u, const Tensor& noise, const Tensor& c);

/// Uniform backward partition of [0,1] into n segments; n field evaluations.
Tensor sample_multi_step(const VelocityField& u, const Tensor& noise, const Tensor& c,
                         std::size_t n_segments);

/// Helpers shared by samplers and rollout code.
Tensor as_batch(const Tensor& field, const Tensor::Shape& cell_shape);
Tensor from_batch(const Tensor& batched, const Tensor::Shape& cell_shape);

} // namespace avf::transport
