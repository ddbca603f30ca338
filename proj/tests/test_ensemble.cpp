// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "avf/ensemble.hpp"

using namespace avf;
using namespace avf::ensemble;

namespace {

net::NetConfig scalar_cfg() {
    net::NetConfig cfg;
    cfg.channels = 1;
    cfg.grid_h = 1;
    cfg.grid_w = 1;
    cfg.hidden_dim = 8;
    cfg.depth = 1;
    cfg.embed_dim = 4;
    return cfg;
}

transport::NetVelocity perturbed_net(std::uint64_t seed, double scale = 0.2) {
    net::NetParams params = net::NetParams::init(scalar_cfg(), RngStream(seed));
    RngStream noise(seed + 1);
    for (Tensor& t : params.tensors) t = t_add(t, t_scale(noise.gaussian(t.shape()), scale));
    return transport::NetVelocity(std::move(params));
}

} // namespace

TEST_CASE("degenerate rollout equals a single one-step call") {
    transport::NetVelocity field = perturbed_net(100);
    RngStream rng(5);
    Tensor initial = rng.gaussian({1, 1, 1});
    EnsembleForecast fc = rollout_ensemble(field, initial, 1, 1, RngStream(7));

    Tensor eps = RngStream(7)
                     .child("member")
                     .child(std::uint64_t{0})
                     .child("lead")
                     .child(std::uint64_t{1})
                     .gaussian({1, 1, 1});
    Tensor expected = transport::sample_one_step(field, eps, initial);
    CHECK(bitwise_equal(fc.members[0][0], expected));
    CHECK(fc.nfe_count == 1);
}

TEST_CASE("rollout counts one evaluation per member per transition") {
    transport::NetVelocity field = perturbed_net(101);
    RngStream rng(9);
    Tensor initial = rng.gaussian({1, 1, 1});
    EnsembleForecast fc = rollout_ensemble(field, initial, 4, 3, RngStream(11));
    CHECK(fc.nfe_count == 12);
    CHECK(fc.ensemble_size() == 4);
    CHECK(fc.horizon() == 3);
    CHECK(fc.member_stream_paths.size() == 4);

    // distinct members differ (independent noise streams)
    double max_diff = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
        max_diff = std::max(max_diff,
                            std::fabs(fc.members[0][l].at(0) - fc.members[1][l].at(0)));
    }
    CHECK(max_diff > 0.0);

    CHECK_THROWS_AS(rollout_ensemble(field, initial, 0, 3, RngStream(1)),
                    std::invalid_argument);
}

TEST_CASE("rollout conditions on the previous prediction") {
    // with u == 0 the rollout state is just the fresh noise at each lead;
    // shifting the head bias shifts every step by the same constant through
    // the recursion x_l = eps_l - bias_effect
    net::NetParams params = net::NetParams::init(scalar_cfg(), RngStream(55));
    transport::NetVelocity zero_field(params);
    RngStream rng(56);
    Tensor initial = rng.gaussian({1, 1, 1});
    EnsembleForecast base = rollout_ensemble(zero_field, initial, 1, 2, RngStream(57));

    net::NetParams shifted = params;
    shifted.get_mut("head.bias") = Tensor({1}, std::vector<double>{0.5});
    transport::NetVelocity shifted_field(shifted);
    EnsembleForecast moved = rollout_ensemble(shifted_field, initial, 1, 2, RngStream(57));
    CHECK(moved.members[0][0].at(0) == doctest::Approx(base.members[0][0].at(0) - 0.5));
    CHECK(moved.members[0][1].at(0) == doctest::Approx(base.members[0][1].at(0) - 0.5));
}

TEST_CASE("crps hand values") {
    Tensor y({1, 1, 1}, std::vector<double>{1.0});
    Tensor x({1, 1, 1}, std::vector<double>{0.3});

    // single member: mean absolute error
    CHECK(crps_loss({x}, y) == doctest::Approx(0.7).epsilon(1e-15));

    // identical members: dispersion term vanishes
    CHECK(crps_loss({x, x}, y) == doctest::Approx(0.7).epsilon(1e-15));

    // members {0, 2}, y = 1: term1 = 1, term2 = 0.5
    Tensor m0({1, 1, 1}, std::vector<double>{0.0});
    Tensor m2({1, 1, 1}, std::vector<double>{2.0});
    CHECK(crps_loss({m0, m2}, y) == doctest::Approx(0.5).epsilon(1e-15));

    // fair variant on the same pair
    CHECK(crps_loss({m0, m2}, y, nullptr, metrics::CrpsVariant::fair) ==
          doctest::Approx(0.0).epsilon(1e-15));

    CHECK_THROWS_AS(crps_loss({m0, Tensor({2, 1, 1})}, y), std::invalid_argument);
    CHECK_THROWS_AS(crps_loss({m0}, y, nullptr, metrics::CrpsVariant::fair),
                    std::invalid_argument);
}

TEST_CASE("crps properties: translation, nonnegativity, exchangeability, dispersion") {
    RngStream rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t K = 2 + rng.next_u64() % 4;
        std::vector<Tensor> members;
        for (std::size_t k = 0; k < K; ++k) members.push_back(rng.gaussian({2, 3, 2}));
        Tensor truth = rng.gaussian({2, 3, 2});
        const double base = crps_loss(members, truth);
        CHECK(base >= 0.0);

        // translation identity
        std::vector<Tensor> shifted;
        for (const Tensor& m : members) {
            Tensor s = m;
            double* d = s.mutable_data();
            for (std::size_t i = 0; i < s.size(); ++i) d[i] += 2.7;
            shifted.push_back(s);
        }
        Tensor truth_shifted = truth;
        {
            double* d = truth_shifted.mutable_data();
            for (std::size_t i = 0; i < truth.size(); ++i) d[i] += 2.7;
        }
        CHECK(std::fabs(crps_loss(shifted, truth_shifted) - base) <= 1e-12);

        // member exchangeability
        std::vector<Tensor> perm(members.rbegin(), members.rend());
        CHECK(std::fabs(crps_loss(perm, truth) - base) <= 1e-13);
    }

    // dispersion term grows with pairwise distance: member1 = y held fixed
    Tensor y({1, 1, 1}, std::vector<double>{0.0});
    for (double d : {0.5, 1.0, 2.0}) {
        Tensor far({1, 1, 1}, std::vector<double>{d});
        // crps = d/2 - d/4 = d/4 for this pair
        CHECK(crps_loss({y, far}, y) == doctest::Approx(d / 4.0).epsilon(1e-14));
    }
}

TEST_CASE("latitude-weighted crps matches the evaluation metric") {
    RngStream rng(31);
    metrics::LatWeights w = metrics::latitude_weights({-45.0, 30.0});
    std::vector<Tensor> members{rng.gaussian({1, 2, 3}), rng.gaussian({1, 2, 3}),
                                rng.gaussian({1, 2, 3})};
    Tensor truth = rng.gaussian({1, 2, 3});
    const double graph_value = crps_loss(members, truth, &w);
    const double eval_value = metrics::crps_eval({members}, {truth}, w);
    CHECK(graph_value == doctest::Approx(eval_value).epsilon(1e-12));
}

TEST_CASE("curriculum schedule validation") {
    CurriculumSchedule bad;
    bad.stages = {{2, 5, 1e-4}, {1, 5, 1e-4}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.stages = {{1, 5, 1e-4}};
    bad.k_train = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("stage-II loss is evaluated once per sample, on the terminal state only") {
    net::NetParams params = perturbed_net(200).params();
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.0, 0.3);
    worlds::Dataset data = worlds::generate_dataset(kernel, {0.0, 0.5}, 256, RngStream(41));

    Stage2Config cfg;
    cfg.schedule.stages = {{2, 1, 1e-4}};
    cfg.schedule.k_train = 2;
    cfg.steps_per_epoch = 5;
    cfg.batch_size = 3;
    harness::AdamWState opt = harness::AdamWState::like(params.tensors);
    Stage2Log log = finetune_stage2(params, data, cfg, opt, {}, RngStream(42));
    // one loss evaluation per sample: steps * batch (not steps * batch * horizon)
    CHECK(log.loss_evaluations == 5 * 3);
    CHECK(log.optimizer_steps == 5);
    CHECK(params.all_finite());
}

TEST_CASE("gradients flow through the autoregressive chain") {
    net::NetParams params = perturbed_net(300).params();
    const net::NetConfig cfg = params.config;
    RngStream rng(301);
    std::vector<Tensor> initials{rng.gaussian({1, 1, 1})};
    std::vector<Tensor> truths{rng.gaussian({1, 1, 1})};

    auto grads_with = [&](bool detach) {
        Stage2Config scfg;
        scfg.detach_between_steps = detach;
        Graph g;
        auto vars = net::leaf_params(g, params);
        RngStream noise(302);
        std::size_t evals = 0;
        Var loss = stage2_loss_graph(g, vars, cfg, initials, truths, 2, 2, noise, scfg, nullptr,
                                     &evals);
        g.backward(loss);
        std::vector<Tensor> grads;
        for (const Var& v : vars) grads.push_back(g.adjoint(v));
        return grads;
    };

    auto full = grads_with(false);
    auto detached = grads_with(true);
    double diff = 0.0;
    for (std::size_t i = 0; i < full.size(); ++i) {
        for (std::size_t k = 0; k < full[i].size(); ++k) {
            diff = std::max(diff, std::fabs(full[i].at(k) - detached[i].at(k)));
        }
    }
    CHECK(diff > 1e-12); // backpropagation through the first transition matters
}

TEST_CASE("stage-II requires a dataset longer than the horizon") {
    net::NetParams params = perturbed_net(400).params();
    worlds::AnalyticKernel kernel = worlds::AnalyticKernel::affine({0.8}, 0.0, 0.3);
    worlds::Dataset tiny = worlds::generate_dataset(kernel, {0.0, 0.5}, 4, RngStream(43));
    Stage2Config cfg;
    cfg.schedule.stages = {{3, 1, 1e-4}};
    harness::AdamWState opt = harness::AdamWState::like(params.tensors);
    CHECK_THROWS_AS(finetune_stage2(params, tiny, cfg, opt, {}, RngStream(44)),
                    std::invalid_argument);
}

TEST_CASE("ensemble file holds every (member, lead) field") {
    transport::NetVelocity field = perturbed_net(500);
    RngStream rng(501);
    Tensor initial = rng.gaussian({1, 1, 1});
    EnsembleForecast fc = rollout_ensemble(field, initial, 3, 4, RngStream(502));

    worlds::NormStats stats;
    stats.mean = {0.0};
    stats.std = {1.0};
    const std::string path = "ensemble_test.avfd";
    save_ensemble(fc, {0.0}, stats, path);
    worlds::Dataset loaded = worlds::load_dataset(path);
    CHECK(loaded.steps() == 12);
    CHECK(bitwise_equal(loaded.field(0), fc.members[0][0]));
    CHECK(bitwise_equal(loaded.field(5), fc.members[1][1])); // member-major order
    std::remove(path.c_str());
}

TEST_CASE("adamw hand-update and invariances") {
    std::vector<Tensor> params{Tensor({1})};
    std::vector<Tensor> grads{Tensor({1}, std::vector<double>{1.0})};
    harness::AdamWState st = harness::AdamWState::like(params);
    harness::AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    harness::adamw_step(params, grads, st, 0.1, cfg);
    CHECK(params[0].at(0) == doctest::Approx(-0.0999999990).epsilon(1e-9));

    // zero gradient with zero decay leaves parameters unchanged
    std::vector<Tensor> p2{Tensor({2}, std::vector<double>{1.0, -2.0})};
    std::vector<Tensor> g2{Tensor({2})};
    harness::AdamWState st2 = harness::AdamWState::like(p2);
    harness::adamw_step(p2, g2, st2, 0.1, cfg);
    CHECK(p2[0].at(0) == 1.0);
    CHECK(p2[0].at(1) == -2.0);

    // decoupled decay shrinks parameters by (1 - lr wd) when g = 0
    cfg.weight_decay = 0.1;
    harness::adamw_step(p2, g2, st2, 0.5, cfg);
    CHECK(p2[0].at(0) == doctest::Approx(1.0 * (1.0 - 0.05)));

    // non-finite gradient errors with the parameter name
    std::vector<std::string> names{"w"};
    std::vector<Tensor> g3{Tensor({2}, std::vector<double>{1.0, NAN})};
    CHECK_THROWS_WITH_AS(harness::adamw_step(p2, g3, st2, 0.1, cfg, &names),
                         doctest::Contains("w"), std::runtime_error);

    // lr = 0 leaves parameters unchanged regardless of gradients
    std::vector<Tensor> p3{Tensor({1}, std::vector<double>{3.0})};
    std::vector<Tensor> g4{Tensor({1}, std::vector<double>{123.0})};
    harness::AdamWState st3 = harness::AdamWState::like(p3);
    harness::adamw_step(p3, g4, st3, 0.0, cfg);
    CHECK(p3[0].at(0) == 3.0);
}

TEST_CASE("cosine schedule endpoints") {
    CHECK(harness::cosine_lr(0, 10, 1e-4, 1e-6) == doctest::Approx(1e-4));
    CHECK(harness::cosine_lr(10, 10, 1e-4, 1e-6) == doctest::Approx(1e-6));
    CHECK(harness::cosine_lr(5, 10, 1e-4, 1e-6) == doctest::Approx((1e-4 + 1e-6) / 2));
    CHECK_THROWS_AS(harness::cosine_lr(11, 10, 1e-4, 1e-6), std::invalid_argument);
}
