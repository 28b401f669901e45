"""MIL aggregators (mean, max, gated-attention, MHA with learned-query
pooling), the classification head, and the weighted cross-entropy task loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

AGGREGATOR_KINDS = ("mean", "max", "abmil", "mha")


@dataclass(frozen=True)
class MilConfig:
    kind: str = "mha"
    dim: int = 32
    n_classes: int = 2
    attn_hidden: int = 16   # abmil gate width
    n_heads: int = 4        # mha
    mlp_ratio: int = 2      # mha block
    n_max: int = 64         # bag subsampling cap per epoch

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"unknown aggregator kind {self.kind!r}")
        if self.kind == "mha" and self.dim % self.n_heads != 0:
            raise ConfigError("mha aggregator needs dim divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


def init_mil_params(cfg: MilConfig, rng: np.random.Generator,
                    prefix: str = "mil") -> dict[str, np.ndarray]:
    d = cfg.dim
    s_d = 1.0 / np.sqrt(d)
    p: dict[str, np.ndarray] = {
        f"{prefix}.head.w": rng.uniform(-s_d, s_d, (d, cfg.n_classes)),
        f"{prefix}.head.b": np.zeros(cfg.n_classes),
    }
    if cfg.kind == "abmil":
        h = cfg.attn_hidden
        p[f"{prefix}.att.v"] = rng.uniform(-s_d, s_d, (d, h))
        p[f"{prefix}.att.u"] = rng.uniform(-s_d, s_d, (d, h))
        p[f"{prefix}.att.w"] = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), (h, 1))
    elif cfg.kind == "mha":
        dk = cfg.head_dim
        for hd in range(cfg.n_heads):
            hp = f"{prefix}.attn.h{hd}"
            p[f"{hp}.w_q"] = rng.uniform(-s_d, s_d, (d, dk))
            p[f"{hp}.w_k"] = rng.uniform(-s_d, s_d, (d, dk))
            p[f"{hp}.w_v"] = rng.uniform(-s_d, s_d, (d, dk))
        p[f"{prefix}.attn.w_o"] = rng.uniform(-s_d, s_d, (d, d))
        p[f"{prefix}.attn.b_o"] = np.zeros(d)
        p[f"{prefix}.norm1.gamma"] = np.ones(d)
        p[f"{prefix}.norm1.beta"] = np.zeros(d)
        hidden = cfg.mlp_ratio * d
        p[f"{prefix}.mlp.w1"] = rng.uniform(-s_d, s_d, (d, hidden))
        p[f"{prefix}.mlp.b1"] = np.zeros(hidden)
        p[f"{prefix}.mlp.w2"] = rng.uniform(-1.0 / np.sqrt(hidden), 1.0 / np.sqrt(hidden), (hidden, d))
        p[f"{prefix}.mlp.b2"] = np.zeros(d)
        p[f"{prefix}.norm2.gamma"] = np.ones(d)
        p[f"{prefix}.norm2.beta"] = np.zeros(d)
        p[f"{prefix}.pool.q"] = rng.uniform(-s_d, s_d, (1, d))
    return p


def aggregate(pt: dict[str, ad.Tensor], feats: ad.Tensor, cfg: MilConfig,
              prefix: str = "mil") -> ad.Tensor:
    """Permutation-invariant slide representation: (n, d) -> (1, d).

    Instances are put into a canonical (lexicographic) row order first, so
    the floating-point reduction order, and with it z, is identical for
    any input permutation.
    """
    if feats.shape[0] < 1:
        raise ConfigError("empty bag")
    order = np.lexsort(tuple(feats.data[:, j] for j in reversed(range(feats.shape[1]))))
    if not np.array_equal(order, np.arange(feats.shape[0])):
        feats = ad.gather_rows(feats, order)
    if cfg.kind == "mean":
        return ad.mean_(feats, axis=0, keepdims=True)
    if cfg.kind == "max":
        return ad.max_(feats, axis=0, keepdims=True)
    if cfg.kind == "abmil":
        gate = ad.mul(ad.tanh(ad.matmul(feats, pt[f"{prefix}.att.v"])),
                      ad.sigmoid(ad.matmul(feats, pt[f"{prefix}.att.u"])))
        logits = ad.matmul(gate, pt[f"{prefix}.att.w"])       # (n, 1)
        attn = ad.softmax(ad.transpose(logits))               # (1, n)
        return ad.matmul(attn, feats)
    # mha: one self-attention block over instances, then learned-query pooling
    heads = []
    for hd in range(cfg.n_heads):
        hp = f"{prefix}.attn.h{hd}"
        q = ad.matmul(feats, pt[f"{hp}.w_q"])
        k = ad.matmul(feats, pt[f"{hp}.w_k"])
        v = ad.matmul(feats, pt[f"{hp}.w_v"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k)),
                        feats.graph.constant(1.0 / np.sqrt(cfg.head_dim)))
        heads.append(ad.matmul(ad.softmax(scores), v))
    attn_out = ad.add(ad.matmul(ad.concat(heads, axis=1), pt[f"{prefix}.attn.w_o"]),
                      pt[f"{prefix}.attn.b_o"])
    y = ad.layer_norm(ad.add(feats, attn_out),
                      pt[f"{prefix}.norm1.gamma"], pt[f"{prefix}.norm1.beta"])
    h = ad.gelu(ad.add(ad.matmul(y, pt[f"{prefix}.mlp.w1"]), pt[f"{prefix}.mlp.b1"]))
    m = ad.add(ad.matmul(h, pt[f"{prefix}.mlp.w2"]), pt[f"{prefix}.mlp.b2"])
    tokens = ad.layer_norm(ad.add(y, m),
                           pt[f"{prefix}.norm2.gamma"], pt[f"{prefix}.norm2.beta"])
    pool = ad.mul(ad.matmul(pt[f"{prefix}.pool.q"], ad.transpose(tokens)),
                  feats.graph.constant(1.0 / np.sqrt(cfg.dim)))
    return ad.matmul(ad.softmax(pool), tokens)


def predict_logits(pt: dict[str, ad.Tensor], z: ad.Tensor,
                   prefix: str = "mil") -> ad.Tensor:
    return ad.add(ad.matmul(z, pt[f"{prefix}.head.w"]), pt[f"{prefix}.head.b"])


def predict(pt: dict[str, ad.Tensor], z: ad.Tensor, prefix: str = "mil") -> ad.Tensor:
    """Class probability vector(s); rows sum to 1."""
    return ad.softmax(predict_logits(pt, z, prefix))


def weighted_cross_entropy(logits: ad.Tensor, labels: np.ndarray,
                           weights: np.ndarray) -> ad.Tensor:
    """Sum_i w_i * CE(softmax(logits_i), y_i) / Sum_i w_i as a graph scalar."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    b, m = logits.shape
    if labels.shape != (b,) or weights.shape != (b,):
        raise ConfigError(
            f"batch size mismatch: logits {logits.shape}, labels {labels.shape}, "
            f"weights {weights.shape}"
        )
    if np.any(weights < 0):
        raise ConfigError("negative sample weight")
    wsum = weights.sum()
    if wsum == 0.0:
        raise ConfigError("all sample weights are zero")
    g = logits.graph
    onehot = np.zeros((b, m))
    onehot[np.arange(b), labels] = 1.0
    logp = ad.log_softmax(logits)
    picked = ad.sum_(ad.mul(logp, g.constant(onehot)), axis=1, keepdims=True)  # (b, 1)
    weighted = ad.sum_(ad.mul(picked, g.constant(weights[:, None])))
    return ad.mul(weighted, g.constant(-1.0 / wsum))


def subsample_bag(features: np.ndarray, n_max: int, rng: np.random.Generator) -> np.ndarray:
    """Cap a bag at n_max instances by seeded uniform subsampling."""
    n = features.shape[0]
    if n <= n_max:
        return features
    idx = rng.choice(n, size=n_max, replace=False)
    idx.sort()
    return features[idx]
