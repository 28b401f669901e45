"""Neural mutual-information machinery between slide representations and
cohort identity: score network, clipped density-ratio (SMILE-style) and
unclipped (MINE-style) batch estimators, the adversary ascent step, and
the frozen re-estimation that enters the task loss.

Negative pairs are all B(B-1) off-diagonal (z_i, c_j) combinations; the
clip is applied in log space, exp(clip(T, -tau, tau)), which equals
clip(e^T, e^-tau, e^tau) with the same zero-outside-bounds gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .optim import Adam


@dataclass(frozen=True)
class MiConfig:
    z_dim: int
    c_dim: int
    hidden: int = 64
    tau: float | None = 5.0   # None: no clipping (MINE behaviour)
    lr: float = 1e-3
    band_penalty: float = 1.0  # ascent-only regularizer, see MiEstimator.update

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.band_penalty < 0:
            raise ConfigError("band_penalty must be >= 0")


def init_score_params(cfg: MiConfig, rng: np.random.Generator,
                      prefix: str = "mi") -> dict[str, np.ndarray]:
    h = cfg.hidden
    s_z = 1.0 / np.sqrt(cfg.z_dim)
    s_c = 1.0 / np.sqrt(cfg.c_dim)
    s_j = 1.0 / np.sqrt(2 * h)
    s_h = 1.0 / np.sqrt(h)
    return {
        f"{prefix}.z.w": rng.uniform(-s_z, s_z, (cfg.z_dim, h)),
        f"{prefix}.z.b": np.zeros(h),
        f"{prefix}.c.w": rng.uniform(-s_c, s_c, (cfg.c_dim, h)),
        f"{prefix}.c.b": np.zeros(h),
        f"{prefix}.j1.w": rng.uniform(-s_j, s_j, (2 * h, h)),
        f"{prefix}.j1.b": np.zeros(h),
        f"{prefix}.j2.w": rng.uniform(-s_h, s_h, (h, 1)),
        f"{prefix}.j2.b": np.zeros(1),
    }


def cohort_onehot(cohorts: np.ndarray, n_cohorts: int) -> np.ndarray:
    cohorts = np.asarray(cohorts)
    out = np.zeros((cohorts.size, n_cohorts))
    out[np.arange(cohorts.size), cohorts] = 1.0
    return out


def _joint_head(pt, pairs: ad.Tensor, prefix: str) -> ad.Tensor:
    h = ad.tanh(ad.add(ad.matmul(pairs, pt[f"{prefix}.j1.w"]), pt[f"{prefix}.j1.b"]))
    return ad.add(ad.matmul(h, pt[f"{prefix}.j2.w"]), pt[f"{prefix}.j2.b"])


def _score_grid(pt: dict[str, ad.Tensor], zs: ad.Tensor, cs: ad.Tensor,
                prefix: str):
    """Scores for all positive pairs (B, 1) and the full (B, B) pair grid."""
    b = zs.shape[0]
    if b < 2:
        raise ConfigError("MI estimation needs a batch of at least 2")
    hz = ad.tanh(ad.add(ad.matmul(zs, pt[f"{prefix}.z.w"]), pt[f"{prefix}.z.b"]))
    hc = ad.tanh(ad.add(ad.matmul(cs, pt[f"{prefix}.c.w"]), pt[f"{prefix}.c.b"]))
    h = hz.shape[1]
    t_pos = _joint_head(pt, ad.concat([hz, hc], axis=1), prefix)
    hz_grid = ad.broadcast_to(ad.reshape(hz, (b, 1, h)), (b, b, h))
    hc_grid = ad.broadcast_to(ad.reshape(hc, (1, b, h)), (b, b, h))
    t_all = _joint_head(pt, ad.concat([hz_grid, hc_grid], axis=2), prefix)
    return t_pos, ad.reshape(t_all, (b, b))


def _smile_from_grid(t_pos: ad.Tensor, t_all: ad.Tensor,
                     tau: float | None) -> ad.Tensor:
    b = t_all.shape[0]
    g = t_all.graph
    clipped = t_all
    if tau is not None and np.isfinite(tau):
        clipped = ad.clip(t_all, -tau, tau)
    ratios = ad.exp(clipped)
    off_diag = g.constant(1.0 - np.eye(b))
    mean_neg = ad.mul(ad.sum_(ad.mul(ratios, off_diag)),
                      g.constant(1.0 / (b * (b - 1))))
    return ad.sub(ad.mean_(t_pos), ad.log(mean_neg))


def smile_graph(pt: dict[str, ad.Tensor], zs: ad.Tensor, cs: ad.Tensor,
                tau: float | None, prefix: str = "mi") -> ad.Tensor:
    """Batch MI estimate as a graph scalar.

    mean over positive pairs of T minus log of the mean over the B(B-1)
    off-diagonal pairs of exp(clip(T, -tau, tau)).
    """
    t_pos, t_all = _score_grid(pt, zs, cs, prefix)
    return _smile_from_grid(t_pos, t_all, tau)


class MiEstimator:
    """Score network T with its optimizer and clip bound: the adversary."""

    def __init__(self, cfg: MiConfig, seed: int = 0, prefix: str = "mi"):
        self.cfg = cfg
        self.prefix = prefix
        self.params = init_score_params(cfg, np.random.default_rng(seed), prefix)
        self.opt = Adam(self.params, lr=cfg.lr)

    def score(self, z: np.ndarray, c: np.ndarray) -> float:
        """T(z, c) for a single pair, computed directly in numpy."""
        p = self.params
        pre = self.prefix
        with np.errstate(all="ignore"):
            hz = np.tanh(np.asarray(z, dtype=np.float64) @ p[f"{pre}.z.w"] + p[f"{pre}.z.b"])
            hc = np.tanh(np.asarray(c, dtype=np.float64) @ p[f"{pre}.c.w"] + p[f"{pre}.c.b"])
            hj = np.tanh(np.concatenate([hz, hc]) @ p[f"{pre}.j1.w"] + p[f"{pre}.j1.b"])
            return float((hj @ p[f"{pre}.j2.w"] + p[f"{pre}.j2.b"])[0])

    def estimate(self, zs: np.ndarray, cs: np.ndarray,
                 tau: float | None | str = "cfg") -> float:
        """Frozen-parameter batch estimate (no gradients retained).

        tau="cfg" uses the configured clip; pass None for the unclipped
        (MINE-style) value on the same scores.
        """
        if isinstance(tau, str):
            tau = self.cfg.tau
        g = ad.Graph()
        pt = g.bind(self.params, trainable=False)
        value = smile_graph(pt, g.constant(zs), g.constant(cs), tau, self.prefix)
        return float(value.data)

    def update(self, zs: np.ndarray, cs: np.ndarray) -> float:
        """One ascent step on the batch estimate w.r.t. the score network
        only; zs must already be detached from any model graph.

        Scores outside [-tau, tau] cannot improve the clipped bound but
        break its gradient (the clip zeroes it), so the ascent objective
        adds a band penalty pushing scores back inside; the estimator
        itself is returned unregularized.
        """
        g = ad.Graph()
        pt = g.bind(self.params, trainable=True)
        t_pos, t_all = _score_grid(pt, g.constant(zs), g.constant(cs), self.prefix)
        value = _smile_from_grid(t_pos, t_all, self.cfg.tau)
        objective = value
        if self.cfg.tau is not None and np.isfinite(self.cfg.tau) \
                and self.cfg.band_penalty > 0:
            tau_c = g.constant(self.cfg.tau)
            hi = ad.relu(ad.sub(t_all, tau_c))
            lo = ad.relu(ad.sub(ad.neg(t_all), tau_c))
            excess = ad.add(ad.mean_(ad.mul(hi, hi)), ad.mean_(ad.mul(lo, lo)))
            objective = ad.sub(value, ad.mul(excess, g.constant(self.cfg.band_penalty)))
        grads = g.backward(ad.neg(objective))   # ascend: minimize -objective
        self.opt.step(grads.named())
        return float(value.data)


def smile_estimate(params: dict[str, np.ndarray], zs: np.ndarray, cs: np.ndarray,
                   tau: float | None, prefix: str = "mi") -> float:
    """Clipped batch MI estimate under fixed score-network parameters."""
    g = ad.Graph()
    pt = g.bind(params, trainable=False)
    return float(smile_graph(pt, g.constant(zs), g.constant(cs), tau, prefix).data)


def mine_estimate(params: dict[str, np.ndarray], zs: np.ndarray, cs: np.ndarray,
                  prefix: str = "mi") -> float:
    """Unclipped (MINE-style) estimate; overflow of e^T raises by design."""
    return smile_estimate(params, zs, cs, None, prefix)


def mi_loss(g: ad.Graph, estimator: MiEstimator, zs: ad.Tensor,
            cohort_onehots: np.ndarray) -> ad.Tensor:
    """The frozen re-estimation entering the task loss.

    Score parameters are bound non-trainable, so their reported gradient
    is exactly zero; the estimate's gradient flows into zs only.
    """
    pt = g.bind(estimator.params, trainable=False)
    return smile_graph(pt, zs, g.constant(cohort_onehots), estimator.cfg.tau,
                       estimator.prefix)


def train_mi_estimator(zs: np.ndarray, cs: np.ndarray, cfg: MiConfig,
                       steps: int, batch_size: int, seed: int = 0) -> MiEstimator:
    """Fit an estimator by repeated ascent steps on seeded minibatches."""
    est = MiEstimator(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    n = zs.shape[0]
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        est.update(zs[idx], cs[idx])
    return est


def batched_estimate(est: MiEstimator, zs: np.ndarray, cs: np.ndarray,
                     batch_size: int, seed: int = 0,
                     tau: float | None | str = "cfg") -> float:
    """Mean estimate over seeded disjoint batches (memory-bounded eval)."""
    rng = np.random.default_rng(seed)
    n = zs.shape[0]
    order = rng.permutation(n)
    vals = []
    for start in range(0, n - 1, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < 2:
            break
        vals.append(est.estimate(zs[idx], cs[idx], tau))
    return float(np.mean(vals))
