# SPDX-License-Identifier: Apache-2.0
"""Smoke tests for the python binding: a thin pass over each bound surface."""

import math

import numpy as np
import pytest

import avflow


def test_rng_reproducibility():
    a = avflow.RngStream(42).gaussian([16])
    b = avflow.RngStream(42).gaussian([16])
    np.testing.assert_array_equal(a, b)
    c = avflow.RngStream(42).child("member").child(1).gaussian([16])
    assert not np.array_equal(a, c)


def test_sample_path_endpoints():
    target = np.array([1.0, -1.0])
    noise = np.array([3.0, 2.0])
    z0, v0 = avflow.sample_path(target, noise, 0.0)
    np.testing.assert_array_equal(z0, target)
    np.testing.assert_array_equal(v0, noise - target)
    z1, _ = avflow.sample_path(target, noise, 1.0)
    np.testing.assert_array_equal(z1, noise)


def test_crps_hand_value():
    members = [np.full((1, 1, 1), 0.0), np.full((1, 1, 1), 2.0)]
    truth = np.full((1, 1, 1), 1.0)
    assert avflow.crps_loss(members, truth) == pytest.approx(0.5)
    assert avflow.crps_loss(members, truth, variant="fair") == pytest.approx(0.0)


def test_wasserstein():
    assert avflow.wasserstein1_1d([0.0, 1.0], [2.0, 3.0]) == pytest.approx(2.0)
    crps, w1 = avflow.crps_w1_relation([0.0, 2.0], 1.0)
    assert crps == pytest.approx(0.5)
    assert w1 == pytest.approx(1.0)


def test_latitude_weights():
    w = avflow.latitude_weights([0.0, 60.0])
    np.testing.assert_allclose(w, [4.0 / 3.0, 2.0 / 3.0])


def test_oracle_one_step_reproduces_the_conditional_law():
    kernel = avflow.AnalyticKernel.affine([0.8], 0.1, 0.5)
    oracle = avflow.OracleVelocity(kernel)
    rng = avflow.RngStream(7)
    c = np.full((1, 1, 1), 2.0)
    draws = np.array(
        [oracle.sample_one_step(rng.gaussian([1, 1, 1]), c)[0, 0, 0] for _ in range(4000)]
    )
    assert draws.mean() == pytest.approx(0.8 * 2.0 + 0.1, abs=0.05)
    assert draws.std() == pytest.approx(0.5, rel=0.1)

    eps = rng.gaussian([1, 1, 1])
    one = oracle.sample_one_step(eps, c)
    multi = oracle.sample_multi_step(eps, c, 4)
    np.testing.assert_allclose(one, multi, atol=1e-10)


def test_kernel_gap_closed_form():
    kernel = avflow.AnalyticKernel.affine([0.8], 0.0, 0.3)
    gap = kernel.w1_gap(np.full((1, 1, 1), 1.0), np.full((1, 1, 1), 3.0))
    assert gap == pytest.approx(1.6)


def test_end_to_end_cli_chain(tmp_path):
    out = tmp_path / "run"
    tiny = [
        "--set", "world.steps=128",
        "--set", "net.hidden_dim=8",
        "--set", "net.depth=1",
        "--set", "net.embed_dim=4",
        "--set", "stage1.epochs=2",
        "--set", "stage1.steps_per_epoch=5",
        "--set", "stage1.batch_size=4",
    ]
    assert avflow.run(["train-stage1", *tiny, "--out", str(out)]) == 0
    ckpt = out / "checkpoint.avfp"
    assert ckpt.exists()

    model = avflow.Model.load(str(ckpt))
    assert model.channels == 1
    rng = avflow.RngStream(3)
    eps = rng.gaussian([1, 1, 1])
    c = rng.gaussian([1, 1, 1])
    x = model.sample_one_step(eps, c)
    assert x.shape == (1, 1, 1)
    assert np.isfinite(x).all()

    members, nfe = model.rollout(c, members=4, horizon=3, seed=11)
    assert members.shape == (4, 3, 1, 1, 1)
    assert nfe == 12

    # residual of the zero map is -v; this model is nonzero, so just check shape
    v = rng.gaussian([1, 1, 1])
    rho = avflow.rectification_residual(model, eps, 0.2, 0.9, c, v)
    assert rho.shape == (1, 1, 1)

    # validation errors surface as exit code 1
    assert avflow.run(["evaluate", "--out", str(tmp_path / "e")]) == 1


def test_ensemble_metrics_shapes():
    rng = np.random.default_rng(5)
    members = rng.normal(size=(3, 8, 1, 2, 2))
    truth = rng.normal(size=(3, 1, 2, 2))
    out = avflow.ensemble_metrics(members, truth)
    assert set(out) == {"rmse", "spread", "ssr", "crps"}
    assert out["rmse"] > 0
    assert 0 < out["crps"] < out["rmse"] * 2
