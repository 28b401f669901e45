"""Cohort-aware attention: per-cohort query projections mixed with a shared
dataset-wide query by a learnable per-token query-attention (QA) net, fed
into scaled dot-product attention, plus the multihead wrapper (MCAA).

Only the active cohort's query matrix participates in each sample's graph,
so backward leaves every other cohort's matrix with an exact-zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    n_heads: int
    head_dim: int
    n_cohorts: int
    qa_hidden: int | None = None  # None: use head_dim

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.dim:
            raise ConfigError(
                f"n_heads*head_dim must equal dim, got {self.n_heads}*{self.head_dim} != {self.dim}"
            )
        if self.n_cohorts < 1:
            raise ConfigError("n_cohorts must be >= 1")

    @property
    def qa_width(self) -> int:
        return self.head_dim if self.qa_hidden is None else self.qa_hidden


def check_cohort(cohort: int, n_cohorts: int) -> int:
    cohort = int(cohort)
    if not 0 <= cohort < n_cohorts:
        raise ConfigError(f"cohort id {cohort} out of range [0, {n_cohorts})")
    return cohort


def init_mcaa_params(cfg: AttentionConfig, rng: np.random.Generator,
                     prefix: str) -> dict[str, np.ndarray]:
    """Per-head query bank + QA net + output projection.

    Projections use fan-in uniform init; cohort queries start as copies of
    the shared query plus small noise; the QA output layer starts at zero
    so training begins with an even 0.5/0.5 query mix.
    """
    d, dk, hq = cfg.dim, cfg.head_dim, cfg.qa_width
    s_in = 1.0 / np.sqrt(d)
    p: dict[str, np.ndarray] = {}
    for h in range(cfg.n_heads):
        hp = f"{prefix}.h{h}"
        w_q_d = rng.uniform(-s_in, s_in, (d, dk))
        p[f"{hp}.w_q_d"] = w_q_d
        for c in range(cfg.n_cohorts):
            p[f"{hp}.w_q_c{c}"] = w_q_d + 1e-3 * rng.standard_normal((d, dk))
        p[f"{hp}.w_k"] = rng.uniform(-s_in, s_in, (d, dk))
        p[f"{hp}.w_v"] = rng.uniform(-s_in, s_in, (d, dk))
        s_qa = 1.0 / np.sqrt(dk)
        p[f"{hp}.qa.w1"] = rng.uniform(-s_qa, s_qa, (dk, hq))
        p[f"{hp}.qa.b1"] = np.zeros(hq)
        p[f"{hp}.qa.w2"] = np.zeros((hq, 1))
        p[f"{hp}.qa.b2"] = np.zeros(1)
    s_o = 1.0 / np.sqrt(cfg.n_heads * dk)
    p[f"{prefix}.w_o"] = rng.uniform(-s_o, s_o, (cfg.n_heads * dk, d))
    p[f"{prefix}.b_o"] = np.zeros(d)
    return p


def project_qkv(pt: dict[str, ad.Tensor], x: ad.Tensor, cohort: int,
                cfg: AttentionConfig, head_prefix: str):
    """Queries, keys, values for one head; only cohort ``cohort``'s query
    matrix enters the graph."""
    cohort = check_cohort(cohort, cfg.n_cohorts)
    q_d = ad.matmul(x, pt[f"{head_prefix}.w_q_d"])
    q_c = ad.matmul(x, pt[f"{head_prefix}.w_q_c{cohort}"])
    k = ad.matmul(x, pt[f"{head_prefix}.w_k"])
    v = ad.matmul(x, pt[f"{head_prefix}.w_v"])
    return q_d, q_c, k, v


def query_attention_scores(pt: dict[str, ad.Tensor], q: ad.Tensor,
                           qa_prefix: str) -> ad.Tensor:
    """Raw per-token mixing score: one scalar per query row."""
    h = ad.tanh(ad.add(ad.matmul(q, pt[f"{qa_prefix}.w1"]), pt[f"{qa_prefix}.b1"]))
    return ad.add(ad.matmul(h, pt[f"{qa_prefix}.w2"]), pt[f"{qa_prefix}.b2"])


def cohort_aware_query(q_d: ad.Tensor, q_c: ad.Tensor,
                       s_d: ad.Tensor, s_c: ad.Tensor):
    """Convex per-token mix of the two queries.

    (alpha_d, alpha_c) is a 2-way softmax over the raw QA scores, so the
    weights are in (0,1) and sum to 1 for every token.
    """
    axis = s_d.ndim - 1
    alphas = ad.softmax(ad.concat([s_d, s_c], axis=axis))
    a_d = ad.narrow(alphas, axis, 0, 1)
    a_c = ad.narrow(alphas, axis, 1, 1)
    q_ca = ad.add(ad.mul(a_d, q_d), ad.mul(a_c, q_c))
    return q_ca, a_d, a_c


def _sdp_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, head_dim: int):
    scores = ad.mul(ad.matmul(q, ad.swap_last2(k)), q.graph.constant(1.0 / np.sqrt(head_dim)))
    probs = ad.softmax(scores)
    return ad.matmul(probs, v), probs


def mcaa_forward(pt: dict[str, ad.Tensor], x: ad.Tensor, cohort: int,
                 cfg: AttentionConfig, prefix: str,
                 force_dataset_query: bool = False,
                 aux: dict | None = None) -> ad.Tensor:
    """Multihead cohort-aware attention over token matrix x (..., n, d).

    ``force_dataset_query`` realizes the saturated alpha_d = 1 limit exactly:
    the QA mix is bypassed and the shared query used alone.
    """
    heads = []
    for h in range(cfg.n_heads):
        hp = f"{prefix}.h{h}"
        if force_dataset_query:
            q_ca = ad.matmul(x, pt[f"{hp}.w_q_d"])
            k = ad.matmul(x, pt[f"{hp}.w_k"])
            v = ad.matmul(x, pt[f"{hp}.w_v"])
        else:
            q_d, q_c, k, v = project_qkv(pt, x, cohort, cfg, hp)
            s_d = query_attention_scores(pt, q_d, f"{hp}.qa")
            s_c = query_attention_scores(pt, q_c, f"{hp}.qa")
            q_ca, a_d, a_c = cohort_aware_query(q_d, q_c, s_d, s_c)
        out, probs = _sdp_attention(q_ca, k, v, cfg.head_dim)
        if aux is not None:
            entry = {"probs": probs}
            if not force_dataset_query:
                entry["alpha_d"] = a_d
                entry["alpha_c"] = a_c
            aux[f"head{h}"] = entry
        heads.append(out)
    joined = ad.concat(heads, axis=x.ndim - 1)
    return ad.add(ad.matmul(joined, pt[f"{prefix}.w_o"]), pt[f"{prefix}.b_o"])


def mha_forward(pt: dict[str, ad.Tensor], x: ad.Tensor, cfg: AttentionConfig,
                prefix: str, aux: dict | None = None) -> ad.Tensor:
    """Plain multihead self-attention using the shared query matrix only.

    Written as its own path (not a flag inside mcaa_forward) so the
    cohort-aware module can be checked against it bitwise.
    """
    heads = []
    for h in range(cfg.n_heads):
        hp = f"{prefix}.h{h}"
        q = ad.matmul(x, pt[f"{hp}.w_q_d"])
        k = ad.matmul(x, pt[f"{hp}.w_k"])
        v = ad.matmul(x, pt[f"{hp}.w_v"])
        out, probs = _sdp_attention(q, k, v, cfg.head_dim)
        if aux is not None:
            aux[f"head{h}"] = {"probs": probs}
        heads.append(out)
    joined = ad.concat(heads, axis=x.ndim - 1)
    return ad.add(ad.matmul(joined, pt[f"{prefix}.w_o"]), pt[f"{prefix}.b_o"])
