"""Backend agreement: the compiled kernels and the numpy fallback must
compute the same numbers on the same inputs."""

import math

import numpy as np
import pytest

from noiseplan._kernels import _fallback

_core = pytest.importorskip(
    "noiseplan._kernels._core", reason="compiled extension not built"
)

H1 = H2 = 16
N_IN = 4


def _random_setup(seed, n=50):
    rng = np.random.default_rng(seed)
    # raw weights get squared inside the kernels, so ~0.3 keeps the mapped
    # weights small enough for stable descent at the learning rates below
    raw = rng.normal(0.3, 0.2, _fallback.n_params(N_IN, H1, H2))
    X = rng.uniform(0.0, 1.0, (n, N_IN))
    t = rng.uniform(0.0, 1.0, n)
    return raw, X, t


def test_forward_agreement():
    raw, X, _ = _random_setup(11)
    a = _fallback.mlp_forward(raw, X, H1, H2)
    b = _core.mlp_forward(raw, X, H1, H2)
    np.testing.assert_allclose(a, b, rtol=0.0, atol=1e-12)


def test_single_gradient_step_agreement():
    raw, X, t = _random_setup(12)
    ra, la, da = _fallback.mlp_train(raw, X, t, H1, H2, 0.1, 1)
    rb, lb, db = _core.mlp_train(raw, X, t, H1, H2, 0.1, 1)
    assert da == db == 1
    np.testing.assert_allclose(la, lb, rtol=0.0, atol=1e-12)
    np.testing.assert_allclose(ra, rb, rtol=0.0, atol=1e-10)


def test_short_training_run_agreement_and_descent():
    raw, X, t = _random_setup(13, n=80)
    ra, la, da = _fallback.mlp_train(raw, X, t, H1, H2, 0.1, 200)
    rb, lb, db = _core.mlp_train(raw, X, t, H1, H2, 0.1, 200)
    assert da == db == 200
    assert la[-1] < la[0]
    pa = _fallback.mlp_forward(ra, X, H1, H2)
    pb = _core.mlp_forward(rb, X, H1, H2)
    np.testing.assert_allclose(pa, pb, rtol=1e-6, atol=1e-8)


def test_training_does_not_mutate_input_params():
    raw, X, t = _random_setup(14)
    before = raw.copy()
    _core.mlp_train(raw, X, t, H1, H2, 0.1, 5)
    _fallback.mlp_train(raw, X, t, H1, H2, 0.1, 5)
    np.testing.assert_array_equal(raw, before)


def test_divergence_reports_epoch_count():
    raw, X, t = _random_setup(15)
    # An absurd learning rate blows the loss up; both backends must stop at
    # the same epoch and leave the loss history truncated there.
    ra, la, da = _fallback.mlp_train(raw, X, t * 1e6, H1, H2, 1e12, 50)
    rb, lb, db = _core.mlp_train(raw, X, t * 1e6, H1, H2, 1e12, 50)
    assert da == db < 50


def test_nearest_state_agreement():
    rng = np.random.default_rng(16)
    xs = rng.uniform(0.0, 2000.0, 400)
    ys = rng.uniform(0.0, 2000.0, 400)
    zs = rng.uniform(50.0, 450.0, 400)
    th = rng.uniform(-math.pi, math.pi, 400)
    for seed in range(20):
        q = np.random.default_rng(100 + seed)
        qx, qy = q.uniform(0.0, 2000.0, 2)
        qz = q.uniform(50.0, 450.0)
        qt = q.uniform(-9.0, 9.0)
        ia = _fallback.nearest_state(xs, ys, zs, th, qx, qy, qz, qt)
        ib = _core.nearest_state(xs, ys, zs, th, qx, qy, qz, qt)
        assert ia == ib


def test_nearest_state_matches_reference_metric():
    from noiseplan.state import EvtolState, kino_dist

    rng = np.random.default_rng(17)
    xs = rng.uniform(0.0, 100.0, 60)
    ys = rng.uniform(0.0, 100.0, 60)
    zs = rng.uniform(50.0, 450.0, 60)
    th = rng.uniform(-math.pi, math.pi, 60)
    query = EvtolState(v=30.0, rho=600.0, x=40.0, y=60.0, z=200.0, theta=2.5)
    dists = [
        kino_dist(
            EvtolState(v=0.0, rho=0.0, x=xs[i], y=ys[i], z=zs[i], theta=th[i]),
            query,
        )
        for i in range(60)
    ]
    expect = int(np.argmin(dists))
    assert _core.nearest_state(xs, ys, zs, th, query.x, query.y, query.z, query.theta) == expect
    assert _fallback.nearest_state(xs, ys, zs, th, query.x, query.y, query.z, query.theta) == expect


def test_nearest_tie_goes_to_lowest_index():
    xs = np.array([10.0, 10.0, 10.0])
    ys = np.zeros(3)
    zs = np.zeros(3)
    th = np.zeros(3)
    assert _core.nearest_state(xs, ys, zs, th, 0.0, 0.0, 0.0, 0.0) == 0
    assert _fallback.nearest_state(xs, ys, zs, th, 0.0, 0.0, 0.0, 0.0) == 0
