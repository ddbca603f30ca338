// SPDX-License-Identifier: Apache-2.0
#include "avf/velnet.hpp"

#include <cmath>
#include <stdexcept>

#include "avf/binio.hpp"

namespace avf::net {

void NetConfig::validate() const {
    if (channels == 0 || grid_h == 0 || grid_w == 0 || hidden_dim == 0) {
        throw std::invalid_argument("NetConfig: zero-sized dimension");
    }
    if (depth < 1) throw std::invalid_argument("NetConfig: depth must be >= 1");
    if (embed_dim % 2 != 0 || embed_dim == 0) {
        throw std::invalid_argument("NetConfig: embed_dim must be even and positive");
    }
    if (mixing == Mixing::full_attention && hidden_dim % attention_heads != 0) {
        throw std::invalid_argument("NetConfig: hidden_dim " + std::to_string(hidden_dim) +
                                    " not divisible by attention_heads " +
                                    std::to_string(attention_heads));
    }
}

namespace {

Tensor uniform_init(RngStream& rng, Tensor::Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rng.uniform_tensor(std::move(shape), -bound, bound);
}

} // namespace

NetParams NetParams::init(const NetConfig& cfg, RngStream rng) {
    cfg.validate();
    NetParams p;
    p.config = cfg;
    const std::size_t C = cfg.channels, D = cfg.hidden_dim, E = cfg.embed_dim, F = cfg.ffn_dim();

    auto push = [&p](const std::string& name, Tensor t) {
        p.names.push_back(name);
        p.tensors.push_back(std::move(t));
    };

    push("input_proj.weight", uniform_init(rng, {2 * C, D}, 2 * C));
    push("input_proj.bias", Tensor({D}));
    for (const char* leg : {"time_t", "time_r"}) {
        push(std::string(leg) + ".fc1.weight", uniform_init(rng, {E, E}, E));
        push(std::string(leg) + ".fc1.bias", Tensor({E}));
        push(std::string(leg) + ".fc2.weight", uniform_init(rng, {E, E}, E));
        push(std::string(leg) + ".fc2.bias", Tensor({E}));
    }
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string b = "block" + std::to_string(l);
        // zero-init modulation: each residual branch starts as the identity map
        push(b + ".mod.weight", Tensor({E, 6 * D}));
        push(b + ".mod.bias", Tensor({6 * D}));
        if (cfg.mixing == Mixing::per_cell_dense) {
            push(b + ".mix.weight", uniform_init(rng, {D, D}, D));
            push(b + ".mix.bias", Tensor({D}));
        } else {
            push(b + ".attn.wq", uniform_init(rng, {D, D}, D));
            push(b + ".attn.wk", uniform_init(rng, {D, D}, D));
            push(b + ".attn.wv", uniform_init(rng, {D, D}, D));
            push(b + ".attn.wo", uniform_init(rng, {D, D}, D));
        }
        push(b + ".ffn.gate", uniform_init(rng, {D, F}, D));
        push(b + ".ffn.up", uniform_init(rng, {D, F}, D));
        push(b + ".ffn.down", uniform_init(rng, {F, D}, F));
    }
    push("head.weight", Tensor({D, C}));
    push("head.bias", Tensor({C}));
    return p;
}

std::size_t NetParams::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return i;
    }
    throw std::invalid_argument("NetParams: no parameter named " + name);
}

bool NetParams::all_finite() const {
    for (const Tensor& t : tensors) {
        if (!t.all_finite()) return false;
    }
    return true;
}

void save_params(const NetParams& params, const std::string& path) {
    BinWriter w(path);
    w.magic("AVFP");
    w.u32(1); // format version
    const NetConfig& c = params.config;
    w.u32(static_cast<std::uint32_t>(c.channels));
    w.u32(static_cast<std::uint32_t>(c.grid_h));
    w.u32(static_cast<std::uint32_t>(c.grid_w));
    w.u32(static_cast<std::uint32_t>(c.hidden_dim));
    w.u32(static_cast<std::uint32_t>(c.depth));
    w.u32(static_cast<std::uint32_t>(c.embed_dim));
    w.u32(c.mixing == Mixing::per_cell_dense ? 0u : 1u);
    w.u32(static_cast<std::uint32_t>(c.attention_heads));
    w.u32(static_cast<std::uint32_t>(params.tensors.size()));
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        w.str(params.names[i]);
        const Tensor& t = params.tensors[i];
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.f64_array(t.data(), t.size());
    }
    w.close();
}

NetParams load_params(const std::string& path) {
    BinReader r(path);
    r.expect_magic("AVFP");
    const std::uint32_t version = r.u32();
    if (version != 1) {
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    }
    NetParams p;
    p.config.channels = r.u32();
    p.config.grid_h = r.u32();
    p.config.grid_w = r.u32();
    p.config.hidden_dim = r.u32();
    p.config.depth = r.u32();
    p.config.embed_dim = r.u32();
    p.config.mixing = r.u32() == 0 ? Mixing::per_cell_dense : Mixing::full_attention;
    p.config.attention_heads = r.u32();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        p.names.push_back(r.str());
        const std::uint32_t rank = r.u32();
        Tensor::Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = r.u32();
        p.tensors.emplace_back(shape, r.f64_array(shape_numel(shape)));
    }
    return p;
}

Tensor sinusoidal_code(double t, std::size_t dim) {
    if (dim % 2 != 0 || dim == 0) {
        throw std::invalid_argument("sinusoidal_code: dim must be even, got " +
                                    std::to_string(dim));
    }
    Tensor out({dim});
    double* d = out.mutable_data();
    for (std::size_t i = 0; i < dim / 2; ++i) {
        const double omega = kTimeFreqScale * std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                                                    static_cast<double>(dim));
        d[2 * i] = std::sin(t * omega);
        d[2 * i + 1] = std::cos(t * omega);
    }
    return out;
}

Var sinusoidal_code(Graph& g, Var t_batch, std::size_t dim) {
    if (dim % 2 != 0 || dim == 0) {
        throw std::invalid_argument("sinusoidal_code: dim must be even, got " +
                                    std::to_string(dim));
    }
    const std::size_t B = t_batch.value().size();
    Tensor omega({1, dim / 2});
    double* od = omega.mutable_data();
    for (std::size_t i = 0; i < dim / 2; ++i) {
        od[i] = kTimeFreqScale *
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    }
    Var angles = mul(reshape(t_batch, {B, 1}), g.leaf(omega)); // (B, dim/2)
    Var s = reshape(sin(angles), {B, dim / 2, 1});
    Var c = reshape(cos(angles), {B, dim / 2, 1});
    return reshape(concat({s, c}, 2), {B, dim}); // interleaved [sin, cos] pairs
}

Var ada_rmsnorm(Var features, Var alpha, Var beta) {
    Graph& g = *features.graph;
    const std::size_t last = features.value().rank() - 1;
    Var ms = reduce_mean(square(features), {last}, true);
    Var normed = mul(features, rsqrt(add(ms, g.scalar(kRmsEps))));
    return add(mul(normed, add_scalar(alpha, 1.0)), beta);
}

namespace {

// Two-layer perceptron on the sinusoidal code.
Var time_mlp(const std::vector<Var>& params, std::size_t base, Var code) {
    Var h = silu(add(matmul(code, params[base]), params[base + 1]));
    return add(matmul(h, params[base + 2]), params[base + 3]);
}

// Expand per-sample modulation rows (B, D) to token rows (B*HW, D).
Var expand_tokens(Var per_sample, std::size_t batch, std::size_t cells, std::size_t dim) {
    Var r = reshape(per_sample, {batch, 1, dim});
    return reshape(broadcast_to(r, {batch, cells, dim}), {batch * cells, dim});
}

struct ParamIndex {
    // fixed layout built from NetConfig; mirrors NetParams::init ordering
    std::size_t input_w = 0, input_b = 1;
    std::size_t time_t = 2; // 4 tensors
    std::size_t time_r = 6; // 4 tensors
    std::size_t block0 = 10;
    std::size_t per_block;
    explicit ParamIndex(const NetConfig& cfg) {
        per_block = 2 /*mod*/ + (cfg.mixing == Mixing::per_cell_dense ? 2 : 4) + 3 /*ffn*/;
    }
    std::size_t block(std::size_t l) const { return block0 + l * per_block; }
};

Var mix_tokens(Graph& g, const std::vector<Var>& params, const NetConfig& cfg, std::size_t base,
               Var normed, std::size_t batch) {
    if (cfg.mixing == Mixing::per_cell_dense) {
        return add(matmul(normed, params[base]), params[base + 1]);
    }
    // full attention over the cells of each sample
    const std::size_t T = cfg.cells(), D = cfg.hidden_dim, Hn = cfg.attention_heads;
    const std::size_t dh = D / Hn;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Var tokens3 = reshape(normed, {batch, T, D});
    std::vector<Var> rows;
    rows.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        Var tb = reshape(slice(tokens3, 0, b, 1), {T, D});
        Var q = matmul(tb, params[base]);
        Var k = matmul(tb, params[base + 1]);
        Var v = matmul(tb, params[base + 2]);
        std::vector<std::size_t> head_sizes(Hn, dh);
        auto qs = split(q, 1, head_sizes);
        auto ks = split(k, 1, head_sizes);
        auto vs = split(v, 1, head_sizes);
        std::vector<Var> heads;
        heads.reserve(Hn);
        for (std::size_t h = 0; h < Hn; ++h) {
            Var scores = mul_scalar(matmul(qs[h], transpose2d(ks[h])), scale);
            heads.push_back(matmul(softmax_lastdim(scores), vs[h]));
        }
        rows.push_back(matmul(concat(heads, 1), params[base + 3]));
    }
    (void)g;
    return concat(rows, 0); // (B*T, D)
}

} // namespace

Var block_forward(Graph& g, const std::vector<Var>& params, const NetConfig& cfg,
                  std::size_t block, Var tokens, Var t_emb, std::size_t batch) {
    const ParamIndex ix(cfg);
    const std::size_t base = ix.block(block);
    const std::size_t D = cfg.hidden_dim, T = cfg.cells();

    Var mod = add(matmul(t_emb, params[base]), params[base + 1]); // (B, 6D)
    auto pieces = split(mod, 1, std::vector<std::size_t>(6, D));
    // order: [alpha_mix, beta_mix, gamma_mix, alpha_ffn, beta_ffn, gamma_ffn]
    Var a_mix = expand_tokens(pieces[0], batch, T, D);
    Var b_mix = expand_tokens(pieces[1], batch, T, D);
    Var g_mix = expand_tokens(pieces[2], batch, T, D);
    Var a_ffn = expand_tokens(pieces[3], batch, T, D);
    Var b_ffn = expand_tokens(pieces[4], batch, T, D);
    Var g_ffn = expand_tokens(pieces[5], batch, T, D);

    Var mixed = mix_tokens(g, params, cfg, base + 2, ada_rmsnorm(tokens, a_mix, b_mix), batch);
    tokens = add(tokens, mul(g_mix, mixed));

    const std::size_t fbase = base + 2 + (cfg.mixing == Mixing::per_cell_dense ? 2 : 4);
    Var x = ada_rmsnorm(tokens, a_ffn, b_ffn);
    Var gated = mul(silu(matmul(x, params[fbase])), matmul(x, params[fbase + 1]));
    Var ffn = matmul(gated, params[fbase + 2]);
    return add(tokens, mul(g_ffn, ffn));
}

Var net_forward(Graph& g, const std::vector<Var>& params, const NetConfig& cfg, Var z, Var r,
                Var t, Var c) {
    const std::size_t C = cfg.channels, H = cfg.grid_h, W = cfg.grid_w;
    const Tensor::Shape& zs = z.value().shape();
    if (zs.size() != 4 || zs[1] != C || zs[2] != H || zs[3] != W) {
        throw std::invalid_argument("net_forward: state shape " + shape_to_string(zs) +
                                    " does not match config (B," + std::to_string(C) + "," +
                                    std::to_string(H) + "," + std::to_string(W) + ")");
    }
    if (!z.value().same_shape(c.value())) {
        throw std::invalid_argument("net_forward: conditioning shape " +
                                    shape_to_string(c.value().shape()) +
                                    " differs from state shape " + shape_to_string(zs));
    }
    const std::size_t B = zs[0];
    if (r.value().size() != B || t.value().size() != B) {
        throw std::invalid_argument("net_forward: r/t must hold one time per batch row");
    }
    for (std::size_t i = 0; i < B; ++i) {
        const double ri = r.value().at(i), ti = t.value().at(i);
        if (!(0.0 <= ri && ri <= ti && ti <= 1.0)) {
            throw std::invalid_argument("net_forward: need 0 <= r <= t <= 1, got r=" +
                                        std::to_string(ri) + " t=" + std::to_string(ti));
        }
    }

    const std::size_t T = cfg.cells(), E = cfg.embed_dim;
    const ParamIndex ix(cfg);

    Var zin = concat({c, z}, 1);                                  // (B, 2C, H, W)
    Var tokens = reshape(swap_last2(reshape(zin, {B, 2 * C, T})), // (B, T, 2C)
                         {B * T, 2 * C});
    tokens = add(matmul(tokens, params[ix.input_w]), params[ix.input_b]); // (B*T, D)

    Var t_emb = add(time_mlp(params, ix.time_t, sinusoidal_code(g, t, E)),
                    time_mlp(params, ix.time_r, sinusoidal_code(g, r, E)));

    for (std::size_t l = 0; l < cfg.depth; ++l) {
        tokens = block_forward(g, params, cfg, l, tokens, t_emb, B);
    }

    const std::size_t head = ix.block(cfg.depth);
    Var out = add(matmul(tokens, params[head]), params[head + 1]); // (B*T, C)
    return reshape(swap_last2(reshape(out, {B, T, C})), {B, C, H, W});
}

std::vector<Var> leaf_params(Graph& g, const NetParams& params) {
    std::vector<Var> vars;
    vars.reserve(params.tensors.size());
    for (const Tensor& t : params.tensors) vars.push_back(g.leaf(t));
    return vars;
}

Tensor forward(const NetParams& params, const Tensor& z, double r, double t, const Tensor& c) {
    const auto& cfg = params.config;
    Tensor zb({1, cfg.channels, cfg.grid_h, cfg.grid_w}, z.to_vector());
    Tensor cb({1, cfg.channels, cfg.grid_h, cfg.grid_w}, c.to_vector());
    Tensor out = forward_batch(params, zb, {r}, {t}, cb);
    return Tensor({cfg.channels, cfg.grid_h, cfg.grid_w}, out.to_vector());
}

Tensor forward_batch(const NetParams& params, const Tensor& z, const std::vector<double>& r,
                     const std::vector<double>& t, const Tensor& c) {
    Graph g;
    auto vars = leaf_params(g, params);
    Var zr = g.leaf(z);
    Var cr = g.leaf(c);
    Var rr = g.leaf(Tensor({r.size()}, std::vector<double>(r)));
    Var tr = g.leaf(Tensor({t.size()}, std::vector<double>(t)));
    return net_forward(g, vars, params.config, zr, rr, tr, cr).value();
}

} // namespace avf::net
