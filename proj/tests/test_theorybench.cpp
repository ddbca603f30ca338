// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "avf/theorybench.hpp"

using namespace avf;
using namespace avf::bench;

namespace {

const metrics::LatWeights kScalarW = metrics::LatWeights::uniform(1);

// u(z, r, t, c) = z, as in the hand-evaluated residual example
class LinearField : public transport::VelocityField {
public:
    Tensor::Shape field_shape() const override { return {1, 1, 1}; }
    Tensor eval(const Tensor& z, const std::vector<double>&, const std::vector<double>&,
                const Tensor&) const override {
        count(z.shape()[0]);
        return z;
    }
    std::pair<Tensor, Tensor> eval_jvp(const Tensor& z, const std::vector<double>&,
                                       const std::vector<double>&, const Tensor&,
                                       const Tensor& vz) const override {
        count(z.shape()[0]);
        return {z, vz};
    }
};

transport::NetVelocity zero_net() {
    net::NetConfig cfg;
    cfg.channels = 1;
    cfg.grid_h = 1;
    cfg.grid_w = 1;
    cfg.hidden_dim = 8;
    cfg.depth = 1;
    cfg.embed_dim = 4;
    return transport::NetVelocity(net::NetParams::init(cfg, RngStream(1)));
}

} // namespace

TEST_CASE("rectification residual hand cases") {
    // zero net: rho = -v
    transport::NetVelocity zn = zero_net();
    Tensor z({1, 1, 1}, std::vector<double>{0.2});
    Tensor c({1, 1, 1}, std::vector<double>{1.0});
    Tensor v({1, 1, 1}, std::vector<double>{2.0});
    Tensor rho = rectification_residual(zn, z, 0.3, 0.8, c, v);
    CHECK(rho.at(0) == -2.0);

    // linear field u = z at (z, v, t, r) = (1, 2, 0.8, 0.3): 1 - 2 + 0.5*2 = 0
    LinearField lin;
    Tensor z1({1, 1, 1}, std::vector<double>{1.0});
    Tensor rho2 = rectification_residual(lin, z1, 0.3, 0.8, c, v);
    CHECK(rho2.at(0) == doctest::Approx(0.0).epsilon(1e-15));

    CHECK_THROWS_AS(rectification_residual(lin, z1, 0.8, 0.8, c, v), std::invalid_argument);
}

TEST_CASE("the exact average-velocity field has zero residual everywhere") {
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.1, 0.6);
    worlds::OracleVelocity oracle(kernel);
    RngStream rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor z = rng.gaussian({1, 1, 1});
        Tensor c = rng.gaussian({1, 1, 1});
        const double t = 0.05 + 0.9 * rng.uniform();
        const double r = t * rng.uniform() * 0.95;
        Tensor v = worlds::oracle_instant_velocity(kernel, z, t, c);
        Tensor rho = rectification_residual(oracle, z, r, t, c, v);
        CHECK(std::fabs(rho.at(0)) <= 1e-8);
    }
}

TEST_CASE("endpoint error identity") {
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.0, 1.0);
    Tensor c({1, 1, 1}, std::vector<double>{1.5});

    // exact field: the coupled endpoints coincide, and the residual-norm
    // integral upper-bounds the (zero) endpoint error
    worlds::OracleVelocity oracle(kernel);
    RngStream rng(11);
    for (int k = 0; k < 10; ++k) {
        auto [lhs_o, rhs_o] = endpoint_error_bound_check(oracle, kernel, c, rng, 65, kScalarW);
        CHECK(lhs_o <= 1e-9);
        CHECK(lhs_o <= rhs_o + 1e-12);
    }

    // zero net: the residual is the constant -v, so the bound is an equality
    transport::NetVelocity zn = zero_net();
    auto [lhs_z, rhs_z] = endpoint_error_bound_check(zn, kernel, c, rng, 33, kScalarW);
    CHECK(lhs_z == doctest::Approx(rhs_z).epsilon(1e-12));
    CHECK(lhs_z > 0.0);

    CHECK_THROWS_AS(endpoint_error_bound_check(zn, kernel, c, rng, 1, kScalarW),
                    std::invalid_argument);
}

TEST_CASE("endpoint bound holds with integration slack for an imperfect net") {
    // trained-ish toy field: a perturbed net evaluated in the same
    // normalized space as the kernel
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.0, 0.7);
    net::NetConfig cfg;
    cfg.hidden_dim = 8;
    cfg.depth = 1;
    cfg.embed_dim = 4;
    net::NetParams params = net::NetParams::init(cfg, RngStream(61));
    RngStream noise(62);
    for (Tensor& t : params.tensors) t = t_add(t, t_scale(noise.gaussian(t.shape()), 0.15));
    transport::NetVelocity field(std::move(params));

    RngStream rng(63);
    int holds = 0;
    for (int k = 0; k < 100; ++k) {
        Tensor c = rng.gaussian({1, 1, 1});
        auto [lhs, rhs] = endpoint_error_bound_check(field, kernel, c, rng, 64, kScalarW);
        if (lhs <= rhs * 1.05) ++holds;
    }
    CHECK(holds == 100);
}

TEST_CASE("sensitivity estimates") {
    // affine kernels are exact
    worlds::AnalyticKernel affine = worlds::AnalyticKernel::affine({0.8}, 0.0, 0.3);
    std::vector<std::pair<Tensor, Tensor>> probes;
    probes.emplace_back(Tensor({1, 1, 1}, std::vector<double>{0.0}),
                        Tensor({1, 1, 1}, std::vector<double>{1.0}));
    CHECK(estimate_sensitivity(affine, probes, 500, RngStream(3), kScalarW).lambda_hat == 0.8);

    worlds::AnalyticKernel flat = worlds::AnalyticKernel::affine({0.0}, 0.5, 0.3);
    CHECK(estimate_sensitivity(flat, probes, 500, RngStream(3), kScalarW).lambda_hat == 0.0);

    // chaotic map: between 1.0 and sup|f'| = 1.35 with probes near zero
    worlds::AnalyticKernel chaotic = worlds::AnalyticKernel::chaotic(1.05, 0.3, 1.0, 0.2);
    std::vector<std::pair<Tensor, Tensor>> cprobes;
    for (double center : {-1.0, -0.5, 0.0, 0.5, 1.0, 3.8}) {
        cprobes.emplace_back(Tensor({1, 1, 1}, std::vector<double>{center - 0.25}),
                             Tensor({1, 1, 1}, std::vector<double>{center + 0.25}));
    }
    SensitivityEstimate est = estimate_sensitivity(chaotic, cprobes, 4000, RngStream(5),
                                                   kScalarW);
    CHECK(est.lambda_hat >= 1.0);
    CHECK(est.lambda_hat <= 1.35);

    // coincident pairs are skipped; all-coincident errors out
    std::vector<std::pair<Tensor, Tensor>> same;
    same.emplace_back(Tensor({1, 1, 1}, std::vector<double>{1.0}),
                      Tensor({1, 1, 1}, std::vector<double>{1.0}));
    CHECK_THROWS_AS(estimate_sensitivity(chaotic, same, 500, RngStream(6), kScalarW),
                    std::invalid_argument);
}

TEST_CASE("kernel gap estimates") {
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.0, 1.0);
    Tensor c({1, 1, 1}, std::vector<double>{2.5});
    const double m = 0.8 * 2.5;

    // the exact sampler's gap is within twice the Monte-Carlo floor
    worlds::OracleVelocity oracle(kernel);
    ModelKernel exact(oracle);
    const std::size_t n = 4000;
    const double gap = kernel_gap(exact, kernel, c, n, RngStream(21), kScalarW);
    // measured self-distance floor at the same sample size
    RngStream floor_rng(22);
    std::vector<double> a(n), b(n);
    for (auto& x : a) x = m + floor_rng.normal();
    for (auto& x : b) x = m + floor_rng.normal();
    const double floor = metrics::wasserstein1_1d(a, b);
    CHECK(gap >= 0.0);
    CHECK(gap <= 2.0 * floor + 1e-12);

    // the zero net draws x_hat = eps ~ N(0,1); gap to N(m, 1) is |m|
    transport::NetVelocity zn = zero_net();
    ModelKernel raw(zn);
    const double gap0 = kernel_gap(raw, kernel, c, n, RngStream(23), kScalarW);
    CHECK(std::fabs(gap0 - m) <= 0.06);

    CHECK_THROWS_AS(kernel_gap(raw, kernel, c, 50, RngStream(24), kScalarW),
                    std::invalid_argument);
}

TEST_CASE("self-distance floor decreases with the sample count") {
    RngStream rng(31);
    double prev = 1e9;
    for (std::size_t n : {100u, 1000u, 10000u}) {
        std::vector<double> a(n), b(n);
        for (auto& x : a) x = rng.normal();
        for (auto& x : b) x = rng.normal();
        const double floor = metrics::wasserstein1_1d(a, b);
        CHECK(floor < prev);
        prev = floor;
    }
}

TEST_CASE("rollout bound with the exact kernel sampler") {
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.2, 0.4);
    worlds::OracleVelocity oracle(kernel);
    ModelKernel model(oracle);
    BoundConfig cfg;
    cfg.horizon = 4;
    cfg.n_samples = 2000;
    cfg.gap_states = 8;
    cfg.gap_samples = 500;
    BoundReport report = verify_rollout_bound(model, kernel, {0.0, 0.5}, cfg, RngStream(41),
                                              kScalarW);
    CHECK(report.lambda_hat == 0.8);
    REQUIRE(report.rows.size() == 4);
    for (const BoundRow& row : report.rows) {
        // both chains share the law: lhs sits at the Monte-Carlo floor
        CHECK(row.lhs <= cfg.slack_mult * row.floor);
        CHECK(row.holds);
    }
    CHECK(report.all_hold());

    // recursion equals the closed sum
    for (std::size_t h = 1; h <= cfg.horizon; ++h) {
        double closed = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            closed += std::pow(report.lambda_hat, static_cast<double>(h - 1 - j)) *
                      report.gaps[j];
        }
        CHECK(std::fabs(report.rows[h - 1].rhs - closed) <= 1e-12);
    }
}

TEST_CASE("rollout bound base case: horizon one matches the mean kernel gap") {
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.0, 0.5);
    transport::NetVelocity zn = zero_net(); // x_hat = eps, a deliberately wrong sampler
    ModelKernel model(zn);
    BoundConfig cfg;
    cfg.horizon = 1;
    cfg.n_samples = 4000;
    cfg.gap_states = 16;
    cfg.gap_samples = 1000;
    BoundReport report = verify_rollout_bound(model, kernel, {1.5, 0.3}, cfg, RngStream(43),
                                              kScalarW);
    REQUIRE(report.rows.size() == 1);
    const BoundRow& row = report.rows[0];
    CHECK(std::fabs(row.lhs - row.mean_gap) <= cfg.slack_mult * row.floor + 0.05);
    CHECK(row.holds);
}

TEST_CASE("bound csv format") {
    BoundReport report;
    report.lambda_hat = 1.25;
    report.rows.push_back({1, 0.1, 0.2, 0.2, 0.01, true});
    const std::string path = "bound_test.csv";
    write_bound_csv(report, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "h,lhs,rhs,lambda_hat,mean_gap,floor,holds");
    std::getline(in, line);
    CHECK(line == "1,0.1,0.2,1.25,0.2,0.01,true");
    in.close();
    std::remove(path.c_str());
}

TEST_CASE("crps / W1 relation") {
    // degenerate ensemble: both sides equal |x - y|
    auto [c_deg, w_deg] = crps_w1_relation_check({0.4, 0.4, 0.4}, 1.0);
    CHECK(c_deg == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(w_deg == doctest::Approx(0.6).epsilon(1e-14));

    // members {0, 2}, y = 1: crps 0.5 < w1 1.0
    auto [c2, w2] = crps_w1_relation_check({0.0, 2.0}, 1.0);
    CHECK(c2 == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(w2 == doctest::Approx(1.0).epsilon(1e-14));

    // Gaussian closed forms at 1e4 draws
    RngStream rng(51);
    std::vector<double> members(10000);
    for (auto& m : members) m = rng.normal();
    auto [cg, wg] = crps_w1_relation_check(members, 0.0);
    CHECK(std::fabs(cg - 0.23370) <= 0.02);
    CHECK(std::fabs(wg - 0.79788) <= 0.02);

    // crps <= w1 for arbitrary ensembles
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> ms(1 + rng.next_u64() % 6);
        for (auto& m : ms) m = rng.normal();
        auto [c, w] = crps_w1_relation_check(ms, rng.normal());
        CHECK(c <= w + 1e-14);
    }
}
