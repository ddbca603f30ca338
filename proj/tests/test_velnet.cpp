// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <set>

#include "avf/velnet.hpp"

using namespace avf;
using namespace avf::net;

namespace {

NetConfig tiny_cfg(Mixing mixing = Mixing::per_cell_dense) {
    NetConfig cfg;
    cfg.channels = 4;
    cfg.grid_h = 4;
    cfg.grid_w = 8;
    cfg.hidden_dim = 12;
    cfg.depth = 2;
    cfg.embed_dim = 8;
    cfg.mixing = mixing;
    cfg.attention_heads = 3;
    return cfg;
}

Tensor field(RngStream& rng, const NetConfig& cfg) {
    return rng.gaussian({cfg.channels, cfg.grid_h, cfg.grid_w});
}

} // namespace

TEST_CASE("config validation") {
    NetConfig cfg = tiny_cfg(Mixing::full_attention);
    cfg.attention_heads = 5; // 12 % 5 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_cfg();
    cfg.embed_dim = 7;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_cfg();
    cfg.depth = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("sinusoidal code basics") {
    Tensor c0 = sinusoidal_code(0.0, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(c0.at(2 * i) == 0.0);
        CHECK(c0.at(2 * i + 1) == 1.0);
    }
    Tensor ct = sinusoidal_code(0.37, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        const double s = ct.at(2 * i), c = ct.at(2 * i + 1);
        CHECK(s * s + c * c == doctest::Approx(1.0).epsilon(1e-14));
    }
    CHECK_THROWS_AS(sinusoidal_code(0.5, 7), std::invalid_argument);

    // distinct t values on a 1e3 grid give distinct codes
    std::set<std::pair<double, double>> seen;
    for (int k = 0; k < 1000; ++k) {
        Tensor code = sinusoidal_code(k / 1000.0, 2);
        seen.insert({code.at(0), code.at(1)});
    }
    CHECK(seen.size() == 1000);
}

TEST_CASE("ada_rmsnorm hand values") {
    Graph g;
    Var z = g.leaf(Tensor({1, 2}, std::vector<double>{3, 4}));
    Var zero = g.leaf(Tensor({1, 2}));
    Tensor out = ada_rmsnorm(z, zero, zero).value();
    // mean(z^2) = 12.5
    CHECK(out.at(0) == doctest::Approx(3.0 / std::sqrt(12.5 + kRmsEps)).epsilon(1e-12));
    CHECK(out.at(1) == doctest::Approx(4.0 / std::sqrt(12.5 + kRmsEps)).epsilon(1e-12));
    CHECK(out.at(0) == doctest::Approx(0.8485).epsilon(1e-4));
    CHECK(out.at(1) == doctest::Approx(1.1314).epsilon(1e-4));

    // all-equal positive constant normalizes to ~1
    Var zc = g.leaf(Tensor({1, 3}, std::vector<double>{5, 5, 5}));
    Var zero3 = g.leaf(Tensor({1, 3}));
    Tensor outc = ada_rmsnorm(zc, zero3, zero3).value();
    for (std::size_t i = 0; i < 3; ++i) CHECK(outc.at(i) == doctest::Approx(1.0).epsilon(1e-6));

    // scale invariance of the normalize step
    Var z10 = g.leaf(Tensor({1, 2}, std::vector<double>{30, 40}));
    Tensor out10 = ada_rmsnorm(z10, zero, zero).value();
    CHECK(out10.at(0) == doctest::Approx(out.at(0)).epsilon(1e-7));
}

TEST_CASE("identity at initialization for every input") {
    for (Mixing mixing : {Mixing::per_cell_dense, Mixing::full_attention}) {
        NetConfig cfg = tiny_cfg(mixing);
        NetParams params = NetParams::init(cfg, RngStream(11));
        RngStream rng(5);
        for (int trial = 0; trial < 3; ++trial) {
            Tensor z = field(rng, cfg);
            Tensor c = field(rng, cfg);
            Tensor u = forward(params, z, 0.2, 0.9, c);
            for (std::size_t i = 0; i < u.size(); ++i) CHECK(u.at(i) == 0.0);
        }
    }
}

TEST_CASE("block is identity under zero modulation") {
    NetConfig cfg = tiny_cfg();
    NetParams params = NetParams::init(cfg, RngStream(3));
    Graph g;
    auto vars = leaf_params(g, params);
    RngStream rng(9);
    Var tokens = g.leaf(rng.gaussian({cfg.cells(), cfg.hidden_dim}));
    Var t_emb = g.leaf(rng.gaussian({1, cfg.embed_dim}));
    Var out = block_forward(g, vars, cfg, 0, tokens, t_emb, 1);
    CHECK(bitwise_equal(out.value(), tokens.value()));
}

TEST_CASE("forward shape contract and validation") {
    NetConfig cfg = tiny_cfg(Mixing::full_attention);
    NetParams params = NetParams::init(cfg, RngStream(21));
    // make it non-trivial
    RngStream noise(400);
    for (Tensor& t : params.tensors) {
        t = t_add(t, t_scale(noise.gaussian(t.shape()), 0.05));
    }
    RngStream rng(2);
    Tensor z = field(rng, cfg);
    Tensor c = field(rng, cfg);
    Tensor u = forward(params, z, 0.1, 0.7, c);
    CHECK(u.shape() == z.shape());

    CHECK_THROWS_AS(forward(params, z, 0.8, 0.3, c), std::invalid_argument); // r > t
    Tensor bad({cfg.channels, cfg.grid_h, cfg.grid_w + 1});
    CHECK_THROWS_AS(forward_batch(params, Tensor({1, cfg.channels, cfg.grid_h, cfg.grid_w + 1}),
                                  {0.1}, {0.5},
                                  Tensor({1, cfg.channels, cfg.grid_h, cfg.grid_w + 1})),
                    std::invalid_argument);
}

TEST_CASE("per-cell mixing is longitude-permutation equivariant") {
    NetConfig cfg = tiny_cfg();
    NetParams params = NetParams::init(cfg, RngStream(77));
    RngStream noise(88);
    for (Tensor& t : params.tensors) t = t_add(t, t_scale(noise.gaussian(t.shape()), 0.1));

    RngStream rng(6);
    Tensor z = field(rng, cfg);
    Tensor c = field(rng, cfg);
    Tensor u = forward(params, z, 0.3, 0.8, c);

    // swap longitude columns 1 and 5 in both inputs
    auto swap_cols = [&](const Tensor& t) {
        Tensor out = t;
        double* d = out.mutable_data();
        for (std::size_t ch = 0; ch < cfg.channels; ++ch)
            for (std::size_t h = 0; h < cfg.grid_h; ++h) {
                const std::size_t base = (ch * cfg.grid_h + h) * cfg.grid_w;
                std::swap(d[base + 1], d[base + 5]);
            }
        return out;
    };
    Tensor u_swapped = forward(params, swap_cols(z), 0.3, 0.8, swap_cols(c));
    CHECK(bitwise_equal(u_swapped, swap_cols(u)));
}

TEST_CASE("gradients of the forward map match finite differences") {
    for (Mixing mixing : {Mixing::per_cell_dense, Mixing::full_attention}) {
        NetConfig cfg = tiny_cfg(mixing);
        cfg.depth = 1;
        NetParams params = NetParams::init(cfg, RngStream(31));
        RngStream noise(32);
        for (Tensor& t : params.tensors) t = t_add(t, t_scale(noise.gaussian(t.shape()), 0.08));

        RngStream rng(33);
        Tensor z = field(rng, cfg);
        Tensor c = field(rng, cfg);
        const double r = 0.25, t = 0.75;

        auto loss_fn = [&](Graph& g, const std::vector<Var>& ps) {
            Var zr = g.leaf(Tensor({1, cfg.channels, cfg.grid_h, cfg.grid_w}, z.to_vector()));
            Var cr = g.leaf(Tensor({1, cfg.channels, cfg.grid_h, cfg.grid_w}, c.to_vector()));
            Var u = net_forward(g, ps, cfg, zr, g.leaf(Tensor({1}, std::vector<double>{r})),
                                g.leaf(Tensor({1}, std::vector<double>{t})), cr);
            return std::vector<Var>{mean_all(square(u))};
        };
        auto grads = grad(loss_fn, params.tensors);
        auto value_at = [&](const std::vector<Tensor>& ps) {
            Graph g;
            std::vector<Var> vars;
            for (const Tensor& p : ps) vars.push_back(g.leaf(p));
            return loss_fn(g, vars)[0].value().item();
        };

        RngStream pick(34);
        int checked = 0;
        while (checked < 40) {
            const std::size_t which = pick.next_u64() % params.tensors.size();
            if (params.tensors[which].size() == 0) continue;
            const std::size_t coord = pick.next_u64() % params.tensors[which].size();
            std::vector<Tensor> up = params.tensors, dn = params.tensors;
            up[which].mutable_data()[coord] += 1e-5;
            dn[which].mutable_data()[coord] -= 1e-5;
            const double fd = (value_at(up) - value_at(dn)) / 2e-5;
            const double ad = grads[which].at(coord);
            CHECK(std::fabs(ad - fd) <= 1e-5 * std::max(1.0, std::fabs(fd)));
            ++checked;
        }
    }
}

TEST_CASE("gradient of gamma_mix at init equals the mixed normalized tokens") {
    NetConfig cfg = tiny_cfg();
    cfg.depth = 1;
    NetParams params = NetParams::init(cfg, RngStream(41));
    RngStream rng(42);
    Tensor z = field(rng, cfg);
    Tensor c = field(rng, cfg);

    // loss = sum(block output); d/d(gamma row) should equal Mix(normalize(tokens))
    // at zero modulation. gamma enters through mod.bias entries [2D, 3D).
    auto loss_fn = [&](Graph& g, const std::vector<Var>& ps) {
        Var zr = g.leaf(Tensor({1, cfg.channels, cfg.grid_h, cfg.grid_w}, z.to_vector()));
        Var cr = g.leaf(Tensor({1, cfg.channels, cfg.grid_h, cfg.grid_w}, c.to_vector()));
        Var u = net_forward(g, ps, cfg, zr, g.leaf(Tensor({1}, std::vector<double>{0.2})),
                            g.leaf(Tensor({1}, std::vector<double>{0.9})), cr);
        return std::vector<Var>{sum_all(u)};
    };
    auto grads = grad(loss_fn, params.tensors);
    const std::size_t mod_bias = params.index_of("block0.mod.bias");

    auto value_at = [&](const std::vector<Tensor>& ps) {
        Graph g;
        std::vector<Var> vars;
        for (const Tensor& p : ps) vars.push_back(g.leaf(p));
        return loss_fn(g, vars)[0].value().item();
    };
    RngStream pick(43);
    for (int k = 0; k < 10; ++k) {
        const std::size_t d = 2 * cfg.hidden_dim + pick.next_u64() % cfg.hidden_dim;
        std::vector<Tensor> up = params.tensors, dn = params.tensors;
        up[mod_bias].mutable_data()[d] += 1e-6;
        dn[mod_bias].mutable_data()[d] -= 1e-6;
        const double fd = (value_at(up) - value_at(dn)) / 2e-6;
        CHECK(std::fabs(grads[mod_bias].at(d) - fd) <= 1e-5 * std::max(1.0, std::fabs(fd)));
    }
}

TEST_CASE("checkpoint round trip") {
    NetConfig cfg = tiny_cfg(Mixing::full_attention);
    NetParams params = NetParams::init(cfg, RngStream(50));
    RngStream noise(51);
    for (Tensor& t : params.tensors) t = t_add(t, noise.gaussian(t.shape()));

    const std::string path = "velnet_roundtrip.avfp";
    save_params(params, path);
    NetParams loaded = load_params(path);
    REQUIRE(loaded.names.size() == params.names.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        CHECK(loaded.names[i] == params.names[i]);
        CHECK(bitwise_equal(loaded.tensors[i], params.tensors[i]));
    }
    CHECK(loaded.config.mixing == Mixing::full_attention);
    std::remove(path.c_str());
}

TEST_CASE("jvp flows through (z, t) with zero tangent in r and c") {
    NetConfig cfg = tiny_cfg();
    cfg.depth = 1;
    NetParams params = NetParams::init(cfg, RngStream(61));
    RngStream noise(62);
    for (Tensor& t : params.tensors) t = t_add(t, t_scale(noise.gaussian(t.shape()), 0.1));

    RngStream rng(63);
    Tensor z = rng.gaussian({1, cfg.channels, cfg.grid_h, cfg.grid_w});
    Tensor c = rng.gaussian({1, cfg.channels, cfg.grid_h, cfg.grid_w});
    Tensor v = rng.gaussian({1, cfg.channels, cfg.grid_h, cfg.grid_w});

    Graph g;
    auto vars = leaf_params(g, params);
    Var zr = g.leaf(z, v);
    Var tr = g.leaf(Tensor({1}, std::vector<double>{0.8}), Tensor({1}, std::vector<double>{1.0}));
    Var rr = g.leaf(Tensor({1}, std::vector<double>{0.3}));
    Var cr = g.leaf(c);
    Var u = net_forward(g, vars, cfg, zr, rr, tr, cr);
    REQUIRE(u.has_tangent());

    // directional finite difference along (z + h v, t + h)
    auto eval = [&](double h) {
        Tensor zh = t_axpy(h, v, z);
        return forward_batch(params, zh, {0.3}, {0.8 + h}, c);
    };
    Tensor up = eval(1e-6), dn = eval(-1e-6);
    Tensor du = u.tangent();
    for (std::size_t i = 0; i < du.size(); ++i) {
        const double fd = (up.at(i) - dn.at(i)) / 2e-6;
        CHECK(std::fabs(du.at(i) - fd) <= 1e-5 * std::max(1.0, std::fabs(fd)));
    }
}
