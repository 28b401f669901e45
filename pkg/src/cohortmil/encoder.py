"""Cohort-aware ViT tile encoder: patch embedding, a stack of MCAA blocks
(post-norm, GELU MLP), class-token pooling, and supervised pretraining on
the synthetic generator's tile-level proxy labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, check_cohort, init_mcaa_params, mcaa_forward, mha_forward
from .balancing import batch_renormalize, clip_weights, pretrain_weights
from .errors import ConfigError
from .optim import Adam

# cavit_alpha1 realizes the saturated QA limit (alpha_d forced to exactly 1)
ENCODER_MODES = ("cavit", "plain_vit", "cavit_alpha1")


@dataclass(frozen=True)
class CaVitConfig:
    side: int = 16
    channels: int = 1
    patch_size: int = 4
    dim: int = 32
    depth: int = 2
    n_heads: int = 4
    head_dim: int = 8
    mlp_ratio: int = 4
    n_cohorts: int = 2
    qa_hidden: int | None = None

    def __post_init__(self):
        if self.side % self.patch_size != 0:
            raise ConfigError(f"side {self.side} not divisible by patch_size {self.patch_size}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.n_heads * self.head_dim != self.dim:
            raise ConfigError("n_heads * head_dim must equal dim")

    @property
    def n_patches(self) -> int:
        return (self.side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def attn(self) -> AttentionConfig:
        return AttentionConfig(self.dim, self.n_heads, self.head_dim,
                               self.n_cohorts, self.qa_hidden)


def init_encoder_params(cfg: CaVitConfig, rng: np.random.Generator,
                        prefix: str = "enc") -> dict[str, np.ndarray]:
    d = cfg.dim
    s_e = 1.0 / np.sqrt(cfg.patch_dim)
    p: dict[str, np.ndarray] = {
        f"{prefix}.embed.w": rng.uniform(-s_e, s_e, (cfg.patch_dim, d)),
        f"{prefix}.embed.b": np.zeros(d),
        f"{prefix}.cls": 0.02 * rng.standard_normal((1, d)),
        f"{prefix}.pos": 0.02 * rng.standard_normal((cfg.n_patches + 1, d)),
    }
    hidden = cfg.mlp_ratio * d
    s_1 = 1.0 / np.sqrt(d)
    s_2 = 1.0 / np.sqrt(hidden)
    for i in range(cfg.depth):
        bp = f"{prefix}.block{i}"
        p.update(init_mcaa_params(cfg.attn, rng, f"{bp}.attn"))
        p[f"{bp}.norm1.gamma"] = np.ones(d)
        p[f"{bp}.norm1.beta"] = np.zeros(d)
        p[f"{bp}.mlp.w1"] = rng.uniform(-s_1, s_1, (d, hidden))
        p[f"{bp}.mlp.b1"] = np.zeros(hidden)
        p[f"{bp}.mlp.w2"] = rng.uniform(-s_2, s_2, (hidden, d))
        p[f"{bp}.mlp.b2"] = np.zeros(d)
        p[f"{bp}.norm2.gamma"] = np.ones(d)
        p[f"{bp}.norm2.beta"] = np.zeros(d)
    return p


def extract_patches(tiles: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, c, s, s) -> (B, n_patches, c*p*p), row-major over the patch grid."""
    if tiles.ndim == 3:
        tiles = tiles[None]
    b, c, s, _ = tiles.shape
    g = s // patch_size
    x = tiles.reshape(b, c, g, patch_size, g, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, c * patch_size * patch_size))


def patch_embed(pt: dict[str, ad.Tensor], patches: ad.Tensor, cfg: CaVitConfig,
                prefix: str = "enc") -> ad.Tensor:
    """(B, n, patch_dim) patches -> (B, n+1, d) tokens with class token and
    positional embeddings."""
    b = patches.shape[0]
    tok = ad.add(ad.matmul(patches, pt[f"{prefix}.embed.w"]), pt[f"{prefix}.embed.b"])
    cls = ad.broadcast_to(ad.reshape(pt[f"{prefix}.cls"], (1, 1, cfg.dim)), (b, 1, cfg.dim))
    tokens = ad.concat([cls, tok], axis=1)
    return ad.add(tokens, pt[f"{prefix}.pos"])


def cavit_block(pt: dict[str, ad.Tensor], tokens: ad.Tensor, cohort: int,
                cfg: CaVitConfig, index: int, mode: str = "cavit",
                prefix: str = "enc") -> ad.Tensor:
    """Post-norm transformer block: AddNorm(MCAA) then AddNorm(MLP)."""
    bp = f"{prefix}.block{index}"
    if mode == "cavit":
        attn_out = mcaa_forward(pt, tokens, cohort, cfg.attn, f"{bp}.attn")
    elif mode == "cavit_alpha1":
        attn_out = mcaa_forward(pt, tokens, cohort, cfg.attn, f"{bp}.attn",
                                force_dataset_query=True)
    elif mode == "plain_vit":
        attn_out = mha_forward(pt, tokens, cfg.attn, f"{bp}.attn")
    else:
        raise ConfigError(f"unknown encoder mode {mode!r}")
    y = ad.layer_norm(ad.add(tokens, attn_out),
                      pt[f"{bp}.norm1.gamma"], pt[f"{bp}.norm1.beta"])
    h = ad.gelu(ad.add(ad.matmul(y, pt[f"{bp}.mlp.w1"]), pt[f"{bp}.mlp.b1"]))
    m = ad.add(ad.matmul(h, pt[f"{bp}.mlp.w2"]), pt[f"{bp}.mlp.b2"])
    return ad.layer_norm(ad.add(y, m), pt[f"{bp}.norm2.gamma"], pt[f"{bp}.norm2.beta"])


def encode_tokens(pt: dict[str, ad.Tensor], patches: ad.Tensor, cohort: int,
                  cfg: CaVitConfig, mode: str = "cavit",
                  prefix: str = "enc") -> ad.Tensor:
    """(B, n, patch_dim) -> (B, d) class-token features."""
    if mode == "cavit":
        check_cohort(cohort, cfg.n_cohorts)
    tokens = patch_embed(pt, patches, cfg, prefix)
    for i in range(cfg.depth):
        tokens = cavit_block(pt, tokens, cohort, cfg, i, mode, prefix)
    cls = ad.narrow(tokens, 1, 0, 1)
    return ad.reshape(cls, (patches.shape[0], cfg.dim))


def encode_tiles(tiles: np.ndarray, cohort: int, params: dict[str, np.ndarray],
                 cfg: CaVitConfig, mode: str = "cavit") -> np.ndarray:
    """Encode a (B, c, s, s) stack of same-cohort tiles to (B, d) features.

    Pure given params: depends only on each tile and its cohort.
    """
    g = ad.Graph()
    pt = g.bind(params, trainable=False)
    patches = g.constant(extract_patches(tiles, cfg.patch_size))
    return encode_tokens(pt, patches, cohort, cfg, mode).data


def encode_tile(tile: np.ndarray, cohort: int, params: dict[str, np.ndarray],
                cfg: CaVitConfig, mode: str = "cavit") -> np.ndarray:
    """Single (c, s, s) tile -> length-d feature vector."""
    return encode_tiles(tile[None], cohort, params, cfg, mode)[0]


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    mode: str = "cavit"
    seed: int = 0


def init_proxy_head(dim: int, n_proxy: int, rng: np.random.Generator,
                    prefix: str = "enc") -> dict[str, np.ndarray]:
    s = 1.0 / np.sqrt(dim)
    return {
        f"{prefix}.proxy.w": rng.uniform(-s, s, (dim, n_proxy)),
        f"{prefix}.proxy.b": np.zeros(n_proxy),
    }


def pretrain_encoder(dataset, cfg: CaVitConfig, pre: PretrainConfig):
    """Supervised pretraining on tile proxy labels with hierarchical
    (cohort -> slide -> tile) weights, 2-sigma clipped, renormalized per
    batch. Returns (params, per-epoch mean weighted loss).
    """
    from .mil import weighted_cross_entropy  # local to avoid an import cycle

    bags = dataset.bags
    if not bags:
        raise ConfigError("cannot pretrain on an empty dataset")

    # flat tile table: (bag index, tile index, cohort, proxy label)
    table = []
    for bi, bag in enumerate(bags):
        for ti in range(bag.n):
            table.append((bi, ti, bag.cohort, int(bag.proxy[ti])))
    labels = np.array([r[3] for r in table])
    if np.unique(labels).size < 2:
        raise ConfigError("proxy labels are all one class; nothing to pretrain on")
    n_proxy = int(labels.max()) + 1

    slide_records = [(b.cohort, b.slide_id, b.n) for b in bags]
    per_slide = pretrain_weights(slide_records)
    raw = np.array([per_slide[bags[bi].slide_id] for bi, *_ in table])
    tile_w = clip_weights(raw)

    rng = np.random.default_rng(pre.seed)
    params = init_encoder_params(cfg, rng)
    params.update(init_proxy_head(cfg.dim, n_proxy, rng))
    opt = Adam(params, lr=pre.lr)

    order = np.arange(len(table))
    history = []
    for _ in range(pre.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        epoch_weight = 0.0
        for start in range(0, len(order), pre.batch_size):
            idx = order[start:start + pre.batch_size]
            w = batch_renormalize(tile_w[idx]) if np.any(tile_w[idx] != 0) else None
            if w is None:
                continue
            g = ad.Graph()
            pt = g.bind(params)
            # group by cohort: routing picks each group's query matrix
            cohorts = np.array([table[i][2] for i in idx])
            logits_parts, label_parts, weight_parts = [], [], []
            for c in sorted(set(cohorts.tolist())):
                sel = idx[cohorts == c]
                tiles = np.stack([bags[table[i][0]].tiles[table[i][1]] for i in sel])
                patches = g.constant(extract_patches(tiles.astype(np.float64), cfg.patch_size))
                feats = encode_tokens(pt, patches, c, cfg, pre.mode)
                logits_parts.append(ad.add(ad.matmul(feats, pt["enc.proxy.w"]),
                                           pt["enc.proxy.b"]))
                label_parts.append(labels[sel])
                weight_parts.append(w[cohorts == c])
            logits = logits_parts[0] if len(logits_parts) == 1 else ad.concat(logits_parts, axis=0)
            batch_labels = np.concatenate(label_parts)
            batch_w = np.concatenate(weight_parts)
            loss = weighted_cross_entropy(logits, batch_labels, batch_w)
            grads = g.backward(loss)
            opt.step(grads.named())
            epoch_loss += float(loss.data) * batch_w.sum()
            epoch_weight += batch_w.sum()
        history.append(epoch_loss / max(epoch_weight, 1e-12))
    return params, history
