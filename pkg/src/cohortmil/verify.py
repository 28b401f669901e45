"""Self-check suites behind ``cohortmil verify``: finite-difference gradient
checks for every primitive and module composite, exact gradient-routing and
reduction identities, balancing and protocol invariants, estimator
identities, a quick Gaussian MI oracle, and backend parity.

The same helpers back the pytest suite; the CLI runs them with timing and
a pass/fail line per suite.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import backend
from .attention import AttentionConfig, init_mcaa_params, mcaa_forward, mha_forward
from .balancing import batch_renormalize, clip_weights, mil_weights, pretrain_weights
from .data import SynthConfig, generate, stratified_patient_kfold
from .encoder import CaVitConfig, encode_tokens, extract_patches, init_encoder_params
from .errors import ConfigError
from .metrics import roc_auc
from .mi import MiConfig, MiEstimator, init_score_params, smile_graph, train_mi_estimator
from .mil import MilConfig, aggregate, init_mil_params, predict_logits, weighted_cross_entropy


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference over a scale floor of max(|grads|, 1)."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1.0)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def fd_check(forward, params: dict[str, np.ndarray], eps: float = 1e-3,
             tol: float = 1e-4, names=None) -> float:
    """Compare backward() against finite differences for each named leaf.

    ``forward(graph, bound_tensors) -> scalar Tensor`` must be pure.
    Returns the worst relative error; raises AssertionError past tol.
    """
    g = ad.Graph()
    pt = g.bind(params)
    out = forward(g, pt)
    if out.data.shape != ():
        raise ConfigError("fd_check needs a scalar-valued forward")
    grads = g.backward(out)
    worst = 0.0
    for name in (names if names is not None else params):
        def f(x, _name=name):
            probe = dict(params)
            probe[_name] = x
            g2 = ad.Graph()
            pt2 = g2.bind(probe)
            return float(forward(g2, pt2).data)

        numeric = ad.finite_diff_grad(f, params[name].copy(), eps)
        err = grad_rel_error(grads[name], numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e} >= {tol:.0e}"
    return worst


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Nudge entries off non-differentiable points so FD stays valid."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + margin * np.sign(x - p + 1e-12) * 2, x)
    return x


def _primitive_cases(rng: np.random.Generator):
    """(name, params, forward) triples covering every differentiable primitive."""
    def u(*shape):
        return rng.uniform(-1.0, 1.0, shape)

    r1 = rng.uniform(-1.0, 1.0, (3, 4))
    r2 = rng.uniform(-1.0, 1.0, (2, 3, 4))
    r_cols = rng.uniform(-1.0, 1.0, (4, 2))

    def reduce_with(const):
        def wrap(op):
            def fwd(g, pt):
                return ad.sum_(ad.mul(op(g, pt), g.constant(const)))
            return fwd
        return wrap

    w1 = reduce_with(r1)
    w2 = reduce_with(r2)

    cases = [
        ("add", {"a": u(3, 4), "b": u(3, 4)}, w1(lambda g, pt: ad.add(pt["a"], pt["b"]))),
        ("add_broadcast", {"a": u(2, 3, 4), "b": u(4)}, w2(lambda g, pt: ad.add(pt["a"], pt["b"]))),
        ("sub", {"a": u(3, 4), "b": u(3, 4)}, w1(lambda g, pt: ad.sub(pt["a"], pt["b"]))),
        ("mul", {"a": u(3, 4), "b": u(3, 4)}, w1(lambda g, pt: ad.mul(pt["a"], pt["b"]))),
        ("mul_broadcast", {"a": u(3, 4), "b": u(3, 1)}, w1(lambda g, pt: ad.mul(pt["a"], pt["b"]))),
        ("div", {"a": u(3, 4), "b": 1.5 + rng.uniform(0.0, 1.0, (3, 4))},
         w1(lambda g, pt: ad.div(pt["a"], pt["b"]))),
        ("neg", {"a": u(3, 4)}, w1(lambda g, pt: ad.neg(pt["a"]))),
        ("matmul", {"a": u(3, 5), "b": u(5, 4)}, w1(lambda g, pt: ad.matmul(pt["a"], pt["b"]))),
        ("matmul_batched", {"a": u(2, 3, 5), "b": u(5, 4)},
         w2(lambda g, pt: ad.matmul(pt["a"], pt["b"]))),
        ("transpose", {"a": u(4, 3)}, w1(lambda g, pt: ad.transpose(pt["a"]))),
        ("swap_last2", {"a": u(2, 4, 3)}, w2(lambda g, pt: ad.swap_last2(pt["a"]))),
        ("reshape", {"a": u(12)}, w1(lambda g, pt: ad.reshape(pt["a"], (3, 4)))),
        ("broadcast_to", {"a": u(1, 4)},
         w1(lambda g, pt: ad.broadcast_to(pt["a"], (3, 4)))),
        ("concat", {"a": u(1, 4), "b": u(2, 4)},
         w1(lambda g, pt: ad.concat([pt["a"], pt["b"]], axis=0))),
        ("narrow", {"a": u(3, 9)},
         w1(lambda g, pt: ad.narrow(pt["a"], 1, 2, 4))),
        ("gather_rows", {"a": u(5, 4)},
         w1(lambda g, pt: ad.gather_rows(pt["a"], np.array([4, 0, 2])))),
        ("sum_axis", {"a": u(3, 4, 5)},
         w1(lambda g, pt: ad.sum_(pt["a"], axis=2))),
        ("mean_axis", {"a": u(5, 3, 4)},
         w1(lambda g, pt: ad.mean_(pt["a"], axis=0))),
        ("mean_all", {"a": u(3, 4)}, lambda g, pt: ad.mean_(pt["a"])),
        ("exp", {"a": u(3, 4)}, w1(lambda g, pt: ad.exp(pt["a"]))),
        ("log", {"a": 0.5 + rng.uniform(0.0, 1.0, (3, 4))}, w1(lambda g, pt: ad.log(pt["a"]))),
        ("tanh", {"a": u(3, 4)}, w1(lambda g, pt: ad.tanh(pt["a"]))),
        ("sigmoid", {"a": u(3, 4)}, w1(lambda g, pt: ad.sigmoid(pt["a"]))),
        ("relu", {"a": _away_from(u(3, 4), [0.0], 5e-3)}, w1(lambda g, pt: ad.relu(pt["a"]))),
        ("gelu", {"a": u(3, 4)}, w1(lambda g, pt: ad.gelu(pt["a"]))),
        ("softmax", {"a": u(3, 4)}, w1(lambda g, pt: ad.softmax(pt["a"]))),
        ("softmax_3d", {"a": u(2, 3, 4)}, w2(lambda g, pt: ad.softmax(pt["a"]))),
        ("log_softmax", {"a": u(3, 4)}, w1(lambda g, pt: ad.log_softmax(pt["a"]))),
        ("layer_norm", {"x": u(3, 4), "gamma": 0.5 + rng.uniform(0.0, 1.0, 4), "beta": u(4)},
         w1(lambda g, pt: ad.layer_norm(pt["x"], pt["gamma"], pt["beta"]))),
        ("clip", {"a": _away_from(u(3, 4), [-0.5, 0.5], 5e-3)},
         w1(lambda g, pt: ad.clip(pt["a"], -0.5, 0.5))),
        ("max_axis", {"a": _spread(rng, (3, 4))},
         reduce_with(rng.uniform(-1, 1, 3))(lambda g, pt: ad.max_(pt["a"], axis=1))),
        ("max_keepdims", {"a": _spread(rng, (5, 4))},
         reduce_with(rng.uniform(-1, 1, (1, 4)))(lambda g, pt: ad.max_(pt["a"], axis=0, keepdims=True))),
        ("max_all", {"a": _spread(rng, (3, 4))}, lambda g, pt: ad.max_(pt["a"])),
        ("weighted_sum_cols", {"a": u(4, 2)},
         reduce_with(r_cols)(lambda g, pt: pt["a"])),
    ]
    return cases


def _spread(rng, shape, gap=2e-2):
    """Values with pairwise gaps above the FD step so max has a stable argmax."""
    n = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, n)
    jitter = rng.uniform(-gap / 4, gap / 4, n)
    return rng.permutation(vals + jitter).reshape(shape)


def suite_gradcheck_primitives(instances: int = 10, tol: float = 1e-4) -> float:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng(100 + i)
        for name, params, forward in _primitive_cases(rng):
            try:
                worst = max(worst, fd_check(forward, params, tol=tol))
            except AssertionError as e:
                raise AssertionError(f"[{name}] {e}") from None
    return worst


def _tiny_attn_cfg(n_cohorts=2):
    return AttentionConfig(dim=4, n_heads=2, head_dim=2, n_cohorts=n_cohorts)


def _tiny_vit_cfg(n_cohorts=2):
    # dim 8 keeps layer-norm curvature low enough for eps=1e-3 differences
    return CaVitConfig(side=4, channels=1, patch_size=2, dim=8, depth=1,
                       n_heads=2, head_dim=4, mlp_ratio=2, n_cohorts=n_cohorts)


def suite_gradcheck_modules(instances: int = 10, tol: float = 1e-4) -> float:
    """FD checks through the attention, encoder, MIL, and MI composites."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng(500 + i)
        acfg = _tiny_attn_cfg()
        aparams = init_mcaa_params(acfg, rng, "attn")
        # nonzero QA output layer so its gradient paths are exercised
        for h in range(acfg.n_heads):
            aparams[f"attn.h{h}.qa.w2"] = rng.uniform(-0.5, 0.5, aparams[f"attn.h{h}.qa.w2"].shape)
        aparams["x"] = rng.uniform(-1, 1, (3, acfg.dim))
        r = rng.uniform(-1, 1, (3, acfg.dim))
        worst = max(worst, fd_check(
            lambda g, pt: ad.sum_(ad.mul(
                mcaa_forward(pt, pt["x"], i % acfg.n_cohorts, acfg, "attn"),
                g.constant(r))),
            aparams, tol=tol))

        vcfg = _tiny_vit_cfg()
        vparams = init_encoder_params(vcfg, rng)
        tiles = rng.uniform(-1, 1, (2, 1, 4, 4))
        patches = extract_patches(tiles, vcfg.patch_size)
        rv = rng.uniform(-1, 1, (2, vcfg.dim))
        worst = max(worst, fd_check(
            lambda g, pt: ad.sum_(ad.mul(
                encode_tokens(pt, g.constant(patches), 0, vcfg), g.constant(rv))),
            vparams, tol=tol))

        for kind in ("mean", "max", "abmil", "mha"):
            mcfg = MilConfig(kind=kind, dim=4, n_classes=2, attn_hidden=3, n_heads=2)
            mparams = init_mil_params(mcfg, rng)
            feats = rng.uniform(-1, 1, (5, 4))
            if kind == "max":
                feats = _spread(rng, (5, 4))
            mparams["feats"] = feats
            labels = np.array([i % 2])
            weights = np.array([1.0])

            def mil_forward(g, pt, _cfg=mcfg, _labels=labels, _weights=weights):
                z = aggregate(pt, pt["feats"], _cfg)
                logits = predict_logits(pt, z)
                return weighted_cross_entropy(logits, _labels, _weights)

            worst = max(worst, fd_check(mil_forward, mparams, tol=tol))

        micfg = MiConfig(z_dim=3, c_dim=2, hidden=4, tau=5.0)
        miparams = init_score_params(micfg, rng)
        miparams["zs"] = rng.uniform(-1, 1, (4, 3))
        cs = np.zeros((4, 2))
        cs[np.arange(4), rng.integers(0, 2, 4)] = 1.0

        def mi_forward(g, pt):
            return smile_graph(pt, pt["zs"], g.constant(cs), micfg.tau)

        worst = max(worst, fd_check(mi_forward, miparams, tol=tol))
    return worst


def suite_selective_routing() -> None:
    """Cohort-0-only batches leave every other cohort's query matrices with
    exactly-zero gradients at every depth."""
    rng = np.random.default_rng(7)
    cfg = _tiny_vit_cfg(n_cohorts=3)
    params = init_encoder_params(cfg, rng)
    tiles = rng.uniform(-1, 1, (2, 1, 4, 4))
    g = ad.Graph()
    pt = g.bind(params)
    feats = encode_tokens(pt, g.constant(extract_patches(tiles, cfg.patch_size)), 0, cfg)
    grads = g.backward(ad.sum_(feats))
    for name in params:
        if ".w_q_c" in name:
            zero = np.all(grads[name] == 0.0)
            if name.endswith("c0"):
                assert not zero, f"active cohort query {name} unexpectedly has zero gradient"
            else:
                assert zero, f"inactive cohort query {name} received gradient"


def suite_reduction_bitwise() -> None:
    """Forced alpha_d = 1 with copied cohort queries makes the cohort-aware
    forward bitwise equal to plain self-attention."""
    rng = np.random.default_rng(11)
    cfg = _tiny_attn_cfg()
    params = init_mcaa_params(cfg, rng, "attn")
    x = rng.uniform(-1, 1, (5, cfg.dim))
    g = ad.Graph()
    pt = g.bind(params)
    xt = g.constant(x)
    out_forced = mcaa_forward(pt, xt, 1, cfg, "attn", force_dataset_query=True)
    out_plain = mha_forward(pt, xt, cfg, "attn")
    assert out_forced.data.tobytes() == out_plain.data.tobytes(), \
        "forced-alpha cohort attention differs from plain attention"


def suite_estimator_identities() -> None:
    rng = np.random.default_rng(13)
    cfg = MiConfig(z_dim=3, c_dim=2, hidden=8, tau=5.0)
    est = MiEstimator(cfg, seed=3)
    zs = rng.standard_normal((6, 3))
    cs = np.zeros((6, 2))
    cs[np.arange(6), rng.integers(0, 2, 6)] = 1.0
    # zero score head -> exactly zero estimates
    zeroed = dict(est.params)
    zeroed["mi.j2.w"] = np.zeros_like(zeroed["mi.j2.w"])
    zeroed["mi.j2.b"] = np.zeros_like(zeroed["mi.j2.b"])
    from .mi import mine_estimate, smile_estimate
    assert smile_estimate(zeroed, zs, cs, 5.0) == 0.0
    assert mine_estimate(zeroed, zs, cs) == 0.0
    # tau = inf equals MINE
    a = smile_estimate(est.params, zs, cs, None)
    b = mine_estimate(est.params, zs, cs)
    assert abs(a - b) < 1e-12


def suite_balancing() -> None:
    per_slide = pretrain_weights([(0, "a", 2), (0, "b", 2), (1, "c", 4)])
    tile_weights = [per_slide["a"]] * 2 + [per_slide["b"]] * 2 + [per_slide["c"]] * 4
    assert abs(sum(tile_weights) - 1.0) < 1e-12
    assert all(abs(w - 0.125) < 1e-12 for w in tile_weights)

    per = mil_weights(
        [(0, 0, f"s{i}") for i in range(10)] + [(0, 1, f"t{i}") for i in range(10)]
        + [(1, 0, "u0")] + [(1, 1, "v0")])
    assert abs(per["s0"] - 1 / 40) < 1e-12 and abs(per["u0"] - 0.25) < 1e-12

    w = np.array([1.0] * 9 + [20.0])
    clipped = clip_weights(w)
    mean, sigma = w.mean(), w.std()
    assert abs(clipped[-1] - (mean + 2 * sigma)) < 1e-12
    assert np.all(clipped[:-1] == 1.0)

    rn = batch_renormalize(np.array([2.0, 4.0]))
    assert np.allclose(rn, [2 / 3, 4 / 3], atol=1e-15)
    assert abs(rn.mean() - 1.0) < 1e-12


def suite_auc_oracle() -> None:
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.9, 0.3, 0.8, 0.2], [1, 1, 0, 0]) == 0.75
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5   # tie: half credit


def suite_split_invariants() -> None:
    ds = generate(SynthConfig(patients_per_cohort=15, seed=5))
    folds = stratified_patient_kfold(ds, 5, seed=1)
    all_pids = set(ds.patients())
    tested = []
    for fs in folds:
        tested.extend(fs.test)
        assert not (set(fs.train) & set(fs.val))
        assert not (set(fs.train) & set(fs.test))
        assert not (set(fs.val) & set(fs.test))
    assert sorted(tested) == sorted(all_pids)


def suite_mi_gaussian_quick(tol: float = 0.2, n: int = 4000, steps: int = 400,
                            eval_batches: int = 10) -> float:
    """Gaussian MI oracle against the analytic ground truth.

    Default budget is the quick one used by ``cohortmil verify``; the
    acceptance suite and ``verify --full`` run it at full budget
    (n=10000, steps=800, tol=0.1).
    """
    rho = 0.8
    true_mi = -0.5 * np.log(1 - rho ** 2)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(n)
    v = rho * u + np.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    est = train_mi_estimator(u[:, None], v[:, None],
                             MiConfig(1, 1, hidden=64, tau=5.0, lr=1e-3),
                             steps=steps, batch_size=64, seed=0)
    vals = []
    for s in range(eval_batches):
        r = np.random.default_rng(2000 + s)
        idx = r.choice(n, 256, replace=False)
        vals.append(est.estimate(u[idx, None], v[idx, None], 5.0))
    err = abs(float(np.mean(vals)) - true_mi)
    assert err < tol, f"Gaussian MI oracle off by {err:.3f} nats (tol {tol})"
    return err


def suite_kernel_parity(tol: float = 1e-12) -> None:
    """Compiled and numpy kernels agree to rounding."""
    from .backend import kernels_py as py
    rng = np.random.default_rng(21)
    x = rng.standard_normal((6, 8))
    gy = rng.standard_normal((6, 8))
    gamma = rng.uniform(0.5, 1.5, 8)
    beta = rng.standard_normal(8)

    assert np.allclose(backend.softmax(x), py.softmax_fw(x), atol=tol)
    y = py.softmax_fw(x)
    assert np.allclose(backend.softmax_grad(y, gy), py.softmax_bw(y, gy), atol=tol)
    assert np.allclose(backend.log_softmax(x), py.log_softmax_fw(x), atol=tol)
    lp = py.log_softmax_fw(x)
    assert np.allclose(backend.log_softmax_grad(lp, gy), py.log_softmax_bw(lp, gy), atol=tol)
    assert np.allclose(backend.gelu(x), py.gelu_fw(x), atol=tol)
    assert np.allclose(backend.gelu_grad(x, gy), py.gelu_bw(x, gy), atol=tol)
    y1, xh1, rs1 = backend.layer_norm(x, gamma, beta, 1e-5)
    y2, xh2, rs2 = py.layer_norm_fw(x, gamma, beta, 1e-5)
    assert np.allclose(y1, y2, atol=tol)
    for a, b in zip(backend.layer_norm_grad(xh1, rs1, gamma, gy),
                    py.layer_norm_bw(xh2, rs2, gamma, gy)):
        assert np.allclose(a, b, atol=tol)


ALL_SUITES = [
    ("gradcheck_primitives", lambda: suite_gradcheck_primitives(instances=3)),
    ("gradcheck_modules", lambda: suite_gradcheck_modules(instances=2)),
    ("selective_routing", suite_selective_routing),
    ("reduction_bitwise", suite_reduction_bitwise),
    ("estimator_identities", suite_estimator_identities),
    ("balancing", suite_balancing),
    ("auc_oracle", suite_auc_oracle),
    ("split_invariants", suite_split_invariants),
    ("mi_gaussian_quick", suite_mi_gaussian_quick),
    ("kernel_parity", suite_kernel_parity),
]


def run_all(suites=None) -> list[tuple[str, bool, float, str]]:
    """Run every suite; returns (name, passed, seconds, detail) rows."""
    rows = []
    for name, fn in (suites or ALL_SUITES):
        t0 = time.time()
        try:
            fn()
            rows.append((name, True, time.time() - t0, ""))
        except Exception as e:  # noqa: BLE001 - report, do not crash the runner
            rows.append((name, False, time.time() - t0, str(e)))
    return rows
