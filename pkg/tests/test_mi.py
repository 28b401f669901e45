import numpy as np
import pytest

from cohortmil import autodiff as ad
from cohortmil.autodiff import NumericError
from cohortmil.errors import ConfigError
from cohortmil.mi import (MiConfig, MiEstimator, cohort_onehot, mi_loss,
                          mine_estimate, smile_estimate, smile_graph,
                          train_mi_estimator)

CFG = MiConfig(z_dim=3, c_dim=2, hidden=8, tau=5.0)


def batch(seed=0, b=6):
    rng = np.random.default_rng(seed)
    zs = rng.standard_normal((b, 3))
    cs = cohort_onehot(rng.integers(0, 2, b), 2)
    return zs, cs


def test_score_zero_head():
    est = MiEstimator(CFG, seed=1)
    est.params["mi.j2.w"] = np.zeros_like(est.params["mi.j2.w"])
    est.params["mi.j2.b"] = np.zeros_like(est.params["mi.j2.b"])
    zs, cs = batch()
    assert all(est.score(z, c) == 0.0 for z, c in zip(zs, cs))


def test_score_deterministic_and_cohort_sensitive():
    est = MiEstimator(CFG, seed=2)
    zs, _ = batch(seed=3)
    c0 = np.array([1.0, 0.0])
    c1 = np.array([0.0, 1.0])
    assert est.score(zs[0], c0) == est.score(zs[0], c0)
    assert est.score(zs[0], c0) != est.score(zs[0], c1)


def test_smile_zero_network_exact_zero():
    est = MiEstimator(CFG, seed=4)
    est.params["mi.j2.w"] = np.zeros_like(est.params["mi.j2.w"])
    est.params["mi.j2.b"] = np.zeros_like(est.params["mi.j2.b"])
    zs, cs = batch(seed=5)
    assert smile_estimate(est.params, zs, cs, 5.0) == 0.0
    assert mine_estimate(est.params, zs, cs) == 0.0


def test_smile_constant_score_cancels():
    est = MiEstimator(CFG, seed=6)
    est.params["mi.j2.w"] = np.zeros_like(est.params["mi.j2.w"])
    est.params["mi.j2.b"] = np.array([1.7])
    zs, cs = batch(seed=7)
    assert abs(smile_estimate(est.params, zs, cs, 5.0)) < 1e-12


def test_smile_inf_tau_equals_mine():
    est = MiEstimator(CFG, seed=8)
    zs, cs = batch(seed=9)
    a = smile_estimate(est.params, zs, cs, None)
    b = smile_estimate(est.params, zs, cs, np.inf)
    c = mine_estimate(est.params, zs, cs)
    assert abs(a - c) < 1e-12
    assert abs(b - c) < 1e-12


def test_smile_equals_mine_when_clip_inactive():
    est = MiEstimator(CFG, seed=10)  # fresh init keeps |T| well under 5
    zs, cs = batch(seed=11)
    assert abs(smile_estimate(est.params, zs, cs, 5.0)
               - mine_estimate(est.params, zs, cs)) < 1e-12


def test_clip_bounds_respected():
    est = MiEstimator(MiConfig(z_dim=3, c_dim=2, hidden=8, tau=0.01), seed=12)
    est.params["mi.j2.b"] = np.array([3.0])   # push scores beyond tau
    zs, cs = batch(seed=13)
    g = ad.Graph()
    pt = g.bind(est.params, trainable=False)
    from cohortmil.mi import _score_grid
    _, t_all = _score_grid(pt, g.constant(zs), g.constant(cs), "mi")
    ratios = ad.exp(ad.clip(t_all, -0.01, 0.01))
    assert np.all(ratios.data >= np.exp(-0.01) - 1e-15)
    assert np.all(ratios.data <= np.exp(0.01) + 1e-15)


def test_batch_too_small():
    est = MiEstimator(CFG, seed=14)
    with pytest.raises(ConfigError):
        smile_estimate(est.params, np.zeros((1, 3)), np.array([[1.0, 0.0]]), 5.0)


def test_mine_overflow_raises_by_design():
    est = MiEstimator(CFG, seed=15)
    est.params["mi.j2.w"] = np.full_like(est.params["mi.j2.w"], 100.0)
    est.params["mi.j2.b"] = np.array([800.0])
    zs, cs = batch(seed=16)
    with pytest.raises(NumericError):
        mine_estimate(est.params, zs, cs)
    # clipped estimator stays finite on the same inputs
    assert np.isfinite(smile_estimate(est.params, zs, cs, 5.0))


def test_permutation_symmetry():
    est = MiEstimator(CFG, seed=17)
    zs, cs = batch(seed=18, b=8)
    perm = np.random.default_rng(19).permutation(8)
    a = smile_estimate(est.params, zs, cs, 5.0)
    b = smile_estimate(est.params, zs[perm], cs[perm], 5.0)
    assert abs(a - b) < 1e-12
    c = mine_estimate(est.params, zs, cs)
    d = mine_estimate(est.params, zs[perm], cs[perm])
    assert abs(c - d) < 1e-12


def test_update_zero_lr_bitwise_unchanged():
    est = MiEstimator(MiConfig(z_dim=3, c_dim=2, hidden=8, tau=5.0, lr=0.0), seed=20)
    before = {k: v.copy() for k, v in est.params.items()}
    zs, cs = batch(seed=21)
    est.update(zs, cs)
    for k in before:
        assert np.array_equal(before[k], est.params[k]), k


def test_update_ascends_on_separated_clusters():
    rng = np.random.default_rng(22)
    b = 32
    cohorts = rng.integers(0, 2, b)
    zs = rng.standard_normal((b, 3)) * 0.1 + np.where(cohorts[:, None] == 0, 1.0, -1.0)
    cs = cohort_onehot(cohorts, 2)
    est = MiEstimator(MiConfig(z_dim=3, c_dim=2, hidden=16, tau=5.0, lr=5e-3), seed=23)
    first = est.estimate(zs, cs)
    for _ in range(50):
        est.update(zs, cs)
    assert est.estimate(zs, cs) > first + 0.1


def test_mi_loss_frozen_adversary_and_grad_into_z():
    est = MiEstimator(CFG, seed=24)
    zs, cs = batch(seed=25)
    g = ad.Graph()
    zt = g.leaf(zs, name="zs")
    loss = mi_loss(g, est, zt, cs)
    grads = g.backward(loss)
    for k in est.params:
        assert np.all(grads[k] == 0.0), k
    assert np.any(grads["zs"] != 0.0)


def test_mi_loss_gradient_matches_finite_differences():
    est = MiEstimator(CFG, seed=26)
    zs, cs = batch(seed=27, b=4)

    def f(z):
        return smile_estimate(est.params, z, cs, 5.0)

    numeric = ad.finite_diff_grad(f, zs.copy(), 1e-4)
    g = ad.Graph()
    zt = g.leaf(zs, name="zs")
    grads = g.backward(mi_loss(g, est, zt, cs))
    from cohortmil.verify import grad_rel_error
    assert grad_rel_error(grads["zs"], numeric) < 1e-4


def test_single_pair_independence_estimate_near_zero():
    # independent z and c: a trained estimator should report ~0 MI
    rng = np.random.default_rng(28)
    n = 2000
    zs = rng.standard_normal((n, 3))
    cs = cohort_onehot(rng.integers(0, 2, n), 2)
    est = train_mi_estimator(zs, cs, MiConfig(z_dim=3, c_dim=2, hidden=16, tau=5.0, lr=1e-3),
                             steps=120, batch_size=64, seed=29)
    idx = rng.choice(n, 512, replace=False)
    assert abs(est.estimate(zs[idx], cs[idx])) < 0.05


def test_smile_graph_batched_shapes():
    est = MiEstimator(CFG, seed=30)
    zs, cs = batch(seed=31, b=5)
    g = ad.Graph()
    pt = g.bind(est.params, trainable=False)
    val = smile_graph(pt, g.constant(zs), g.constant(cs), 5.0)
    assert val.data.shape == ()
