// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "avf/graph.hpp"
#include "avf/rng.hpp"
#include "avf/tensor.hpp"

namespace avf::net {

enum class Mixing { per_cell_dense, full_attention };

struct NetConfig {
    std::size_t channels = 1;
    std::size_t grid_h = 1;
    std::size_t grid_w = 1;
    std::size_t hidden_dim = 32;
    std::size_t depth = 2;
    std::size_t embed_dim = 16;
    Mixing mixing = Mixing::per_cell_dense;
    std::size_t attention_heads = 4;

    std::size_t cells() const { return grid_h * grid_w; }
    std::size_t ffn_dim() const { return 2 * hidden_dim; }
    void validate() const;
};

/// All learnable tensors of the average-velocity network, in a fixed order.
/// Modulation maps and the output head start at exactly zero, which makes
/// the whole network the zero map at initialization.
struct NetParams {
    NetConfig config;
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    static NetParams init(const NetConfig& cfg, RngStream rng);

    std::size_t index_of(const std::string& name) const;
    const Tensor& get(const std::string& name) const { return tensors[index_of(name)]; }
    Tensor& get_mut(const std::string& name) { return tensors[index_of(name)]; }
    bool all_finite() const;
};

void save_params(const NetParams& params, const std::string& path);
NetParams load_params(const std::string& path);

/// Sinusoidal time code: entry 2i = sin(t*w_i), 2i+1 = cos(t*w_i) with
/// w_i = kTimeFreqScale * 10000^(-2i/dim). dim must be even. The scale is
/// kept small: the rectified training target differentiates the network in
/// t, so the embedding Lipschitz constant multiplies straight into the
/// target magnitude.
Tensor sinusoidal_code(double t, std::size_t dim);
Var sinusoidal_code(Graph& g, Var t_batch /*(B,)*/, std::size_t dim);

/// normalize(z) * (1 + alpha) + beta with normalize(z) = z / sqrt(mean(z^2) + eps_n).
/// features and the modulation tensors are (N, hidden_dim) rows.
Var ada_rmsnorm(Var features, Var alpha, Var beta);

inline constexpr double kRmsEps = 1e-6;
inline constexpr double kTimeFreqScale = 16.0;

/// One gated residual block on (B*HW, hidden_dim) tokens.
Var block_forward(Graph& g, const std::vector<Var>& params, const NetConfig& cfg,
                  std::size_t block, Var tokens, Var t_emb /*(B,embed)*/, std::size_t batch);

/// Full conditional forward pass u_theta(z, r, t, c) over a batch.
/// z, c: (B, C, H, W); r, t: (B,) with 0 <= r <= t <= 1 per row.
Var net_forward(Graph& g, const std::vector<Var>& params, const NetConfig& cfg, Var z, Var r,
                Var t, Var c);

std::vector<Var> leaf_params(Graph& g, const NetParams& params);

/// Convenience single-field evaluation (batch of one), raw tensors in and out.
Tensor forward(const NetParams& params, const Tensor& z, double r, double t, const Tensor& c);

Tensor forward_batch(const NetParams& params, const Tensor& z, const std::vector<double>& r,
                     const std::vector<double>& t, const Tensor& c);

} // namespace avf::net
