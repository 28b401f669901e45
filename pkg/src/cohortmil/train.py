"""Adversarial cohort-regularized training: the per-batch step (aggregate,
adversary ascent on detached representations, frozen re-estimation, joint
descent), per-fold training with validation-based top-3 model bagging,
patient-level evaluation, and the linear cohort probe.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .balancing import batch_renormalize, clip_weights, export_weight_table, mil_weights
from .checkpoint import save_arrays
from .data import Dataset, FoldSplit, stratified_patient_kfold
from .encoder import CaVitConfig, PretrainConfig, encode_tiles, pretrain_encoder
from .errors import ArtifactMismatchError, ConfigError
from .metrics import MetricsReport, balanced_accuracy, macro_ovr_auc, patient_level, task_auc
from .mi import MiConfig, MiEstimator, cohort_onehot, mi_loss
from .mil import MilConfig, aggregate, init_mil_params, predict_logits, subsample_bag, weighted_cross_entropy
from .optim import Adam

log = logging.getLogger("cohortmil")

ENCODER_MODES = ("cavit", "plain_vit", "precomputed")


@dataclass(frozen=True)
class TrainConfig:
    # loss / adversary
    lambda_mi: float = 1.0
    tau: float | None = 5.0
    mi_hidden: int = 64
    mi_lr: float = 1e-3
    mi_sign: float = 1.0    # +1: minimizing the task loss pushes MI down
    adv_steps: int = 1      # adversary ascent steps per mini-batch
    # MIL phase
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 16
    aggregator: str = "mha"
    n_max: int = 64
    top_k: int = 3
    # encoder phase
    encoder_mode: str = "cavit"
    dim: int = 32
    depth: int = 2
    n_heads: int = 4
    head_dim: int = 8
    patch_size: int = 4
    mlp_ratio: int = 4
    pretrain_epochs: int = 3
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    # protocol
    folds: int = 5
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lambda_mi < 0:
            raise ConfigError("lambda_mi must be >= 0")
        if self.lambda_mi > 0 and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when lambda_mi > 0")
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"unknown encoder_mode {self.encoder_mode!r}")

    def mil_config(self, n_classes: int) -> MilConfig:
        return MilConfig(kind=self.aggregator, dim=self.dim, n_classes=n_classes,
                         n_max=self.n_max)

    def cavit_config(self, dataset: Dataset) -> CaVitConfig:
        return CaVitConfig(side=dataset.side, channels=dataset.channels,
                           patch_size=self.patch_size, dim=self.dim,
                           depth=self.depth, n_heads=self.n_heads,
                           head_dim=self.head_dim, mlp_ratio=self.mlp_ratio,
                           n_cohorts=dataset.n_cohorts)


def train_step(feats_list, labels, cohorts, weights, mil_params, opt,
               mil_cfg: MilConfig, adversary: MiEstimator | None,
               lambda_mi: float, n_cohorts: int, mi_sign: float = 1.0,
               adv_steps: int = 1) -> dict:
    """One Algorithm-1 step over a batch of bags.

    Order: aggregate to z; adversary ascends its estimate on detached z;
    with the adversary frozen, the MI term is re-estimated with gradient
    into z; predictions and the weighted task loss close the graph; one
    descent step on the MIL parameters. Single-cohort batches skip the MI
    term entirely (it is vacuous there).
    """
    g = ad.Graph()
    pt = g.bind(mil_params)
    zs = [aggregate(pt, g.constant(f), mil_cfg) for f in feats_list]
    z = zs[0] if len(zs) == 1 else ad.concat(zs, axis=0)

    multi_cohort = len(set(int(c) for c in cohorts)) > 1
    use_mi = lambda_mi > 0 and multi_cohort and adversary is not None
    record: dict = {"adversary_estimate": None, "l_mi": None}
    onehots = cohort_onehot(np.asarray(cohorts), n_cohorts)
    if use_mi:
        for _ in range(max(1, adv_steps)):
            record["adversary_estimate"] = adversary.update(z.data.copy(), onehots)

    logits = predict_logits(pt, z, prefix="mil")
    l_mil = weighted_cross_entropy(logits, labels, batch_renormalize(weights))
    if use_mi:
        l_mi = mi_loss(g, adversary, z, onehots)
        loss = ad.add(l_mil, ad.mul(l_mi, g.constant(lambda_mi * mi_sign)))
        record["l_mi"] = float(l_mi.data)
    else:
        loss = l_mil
    grads = g.backward(loss)
    opt.step(grads.named())
    record["l_mil"] = float(l_mil.data)
    record["loss"] = float(loss.data)
    return record


def predict_bags(mil_params: dict[str, np.ndarray], mil_cfg: MilConfig,
                 feats_list) -> np.ndarray:
    """Class probabilities per bag under fixed parameters."""
    g = ad.Graph()
    pt = g.bind(mil_params, trainable=False)
    zs = [aggregate(pt, g.constant(f), mil_cfg) for f in feats_list]
    z = zs[0] if len(zs) == 1 else ad.concat(zs, axis=0)
    logits = predict_logits(pt, z, prefix="mil")
    return ad.softmax(logits).data


def representations(mil_params: dict[str, np.ndarray], mil_cfg: MilConfig,
                    feats_list) -> np.ndarray:
    """Slide representations z under fixed parameters."""
    g = ad.Graph()
    pt = g.bind(mil_params, trainable=False)
    zs = [aggregate(pt, g.constant(f), mil_cfg) for f in feats_list]
    return (zs[0] if len(zs) == 1 else ad.concat(zs, axis=0)).data


def evaluate(models, mil_cfg: MilConfig, bags, feats_list,
             n_classes: int, n_cohorts: int) -> MetricsReport:
    """Patient-level metrics of a model or an ensemble (probabilities are
    averaged across members, slides averaged per patient before AUC)."""
    if not bags:
        raise ConfigError("no bags to evaluate")
    if isinstance(models, dict):
        models = [models]
    probs = np.mean([predict_bags(m, mil_cfg, feats_list) for m in models], axis=0)
    pids = [b.patient_id for b in bags]
    labels = np.array([b.label for b in bags])
    cohorts = np.array([b.cohort for b in bags])
    p_probs, p_labels, p_cohorts = patient_level(probs, pids, labels, cohorts)
    preds = p_probs.argmax(axis=1)
    report = MetricsReport(
        auc=task_auc(p_probs, p_labels),
        bacc=balanced_accuracy(preds, p_labels, n_classes),
        n_patients=len(p_labels),
    )
    for c in range(n_cohorts):
        mask = p_cohorts == c
        if not mask.any():
            report.per_cohort[c] = {"auc": None, "bacc": None, "n": 0}
            continue
        report.per_cohort[c] = {
            "auc": task_auc(p_probs[mask], p_labels[mask]),
            "bacc": balanced_accuracy(preds[mask], p_labels[mask], n_classes),
            "n": int(mask.sum()),
        }
    return report


def bag_models(checkpoints: list[dict], top_k: int = 3) -> list[dict]:
    """Top-k checkpoints by validation patient AUC (None ranks lowest)."""
    if len(checkpoints) < top_k:
        log.warning("only %d checkpoints available; bagging all of them",
                    len(checkpoints))
    ranked = sorted(
        checkpoints,
        key=lambda c: -np.inf if c["val_auc"] is None else c["val_auc"],
        reverse=True,
    )
    return ranked[:top_k]


def cohort_probe(zs: np.ndarray, cohorts: np.ndarray, seed: int = 0,
                 train_fraction: float = 0.7, tol: float = 1e-6,
                 max_iters: int = 4000, lr: float = 0.05) -> float:
    """Macro one-vs-rest AUC of a fresh linear (softmax) classifier trained
    to predict cohort from z on a held-out split. Never touches model
    parameters."""
    zs = np.asarray(zs, dtype=np.float64)
    cohorts = np.asarray(cohorts)
    classes = np.unique(cohorts)
    if classes.size < 2:
        raise ConfigError("cohort probe needs at least 2 cohorts")
    k = int(cohorts.max()) + 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(zs))
    n_train = max(2, int(round(train_fraction * len(zs))))
    tr, te = order[:n_train], order[n_train:]
    if te.size < 2:
        raise ConfigError("too few samples for a probe hold-out split")

    mu = zs[tr].mean(axis=0)
    sd = zs[tr].std(axis=0) + 1e-8
    xtr = (zs[tr] - mu) / sd
    xte = (zs[te] - mu) / sd
    y = np.zeros((tr.size, k))
    y[np.arange(tr.size), cohorts[tr]] = 1.0

    w = np.zeros((zs.shape[1], k))
    b = np.zeros(k)
    mw, vw = np.zeros_like(w), np.zeros_like(w)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    for t in range(1, max_iters + 1):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        gw = xtr.T @ (p - y) / tr.size
        gb = (p - y).mean(axis=0)
        if max(np.abs(gw).max(), np.abs(gb).max()) < tol:
            break
        mw = 0.9 * mw + 0.1 * gw
        vw = 0.999 * vw + 0.001 * gw * gw
        mb = 0.9 * mb + 0.1 * gb
        vb = 0.999 * vb + 0.001 * gb * gb
        bc1 = 1 - 0.9 ** t
        bc2 = 1 - 0.999 ** t
        w -= lr * (mw / bc1) / (np.sqrt(vw / bc2) + 1e-8)
        b -= lr * (mb / bc1) / (np.sqrt(vb / bc2) + 1e-8)

    logits = xte @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    present = sorted(set(int(c) for c in cohorts[te]))
    auc = macro_ovr_auc(p[:, present], np.searchsorted(present, cohorts[te]))
    if auc is None:
        raise ConfigError("probe AUC undefined on the held-out split")
    return auc


# -- fold / run orchestration ----------------------------------------------------


def _bag_features(dataset: Dataset, bags, enc_params, enc_cfg, mode: str):
    """float64 feature matrices per bag (encoding tiles if needed)."""
    if mode == "precomputed":
        return [np.asarray(b.features, dtype=np.float64) for b in bags]
    feats = []
    for b in bags:
        enc_mode = "cavit" if mode == "cavit" else "plain_vit"
        feats.append(encode_tiles(b.tiles.astype(np.float64), b.cohort,
                                  enc_params, enc_cfg, enc_mode))
    return feats


@dataclass
class FoldResult:
    report: MetricsReport
    val_history: list = field(default_factory=list)
    loss_history: list = field(default_factory=list)
    ensemble_epochs: list = field(default_factory=list)
    split: FoldSplit | None = None
    encoder_params: dict | None = None
    mil_members: list = field(default_factory=list)
    adversary_params: dict | None = None
    pretrain_history: list = field(default_factory=list)
    weight_table: list = field(default_factory=list)
    epoch_records: list = field(default_factory=list)


def train_fold(dataset: Dataset, split: FoldSplit, cfg: TrainConfig,
               fold_seed: int) -> FoldResult:
    train_bags = dataset.bags_for(split.train)
    val_bags = dataset.bags_for(split.val)
    test_bags = dataset.bags_for(split.test)
    if not train_bags:
        raise ConfigError("empty training split")

    # encoder phase (frozen afterwards; the MIL phase trains on features)
    enc_params, enc_cfg, pre_hist = None, None, []
    if cfg.encoder_mode in ("cavit", "plain_vit"):
        if dataset.payload != "tiles":
            raise ArtifactMismatchError("encoder modes need a tiles dataset")
        enc_cfg = cfg.cavit_config(dataset)
        train_subset = Dataset(train_bags, dataset.n_cohorts, dataset.n_classes,
                               payload="tiles", side=dataset.side,
                               channels=dataset.channels)
        pre = PretrainConfig(epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch,
                             lr=cfg.pretrain_lr,
                             mode="cavit" if cfg.encoder_mode == "cavit" else "plain_vit",
                             seed=fold_seed)
        enc_params, pre_hist = pretrain_encoder(train_subset, enc_cfg, pre)
    elif dataset.payload != "features":
        raise ArtifactMismatchError(
            "encoder_mode=precomputed needs a features dataset")

    if cfg.encoder_mode == "precomputed" and dataset.feature_dim != cfg.dim:
        raise ArtifactMismatchError(
            f"dataset feature_dim {dataset.feature_dim} != configured dim {cfg.dim}")

    feats_train = _bag_features(dataset, train_bags, enc_params, enc_cfg, cfg.encoder_mode)
    feats_val = _bag_features(dataset, val_bags, enc_params, enc_cfg, cfg.encoder_mode)
    feats_test = _bag_features(dataset, test_bags, enc_params, enc_cfg, cfg.encoder_mode)

    # hierarchical slide weights over the epoch population, 2-sigma clipped
    per_slide = mil_weights([(b.cohort, b.label, b.slide_id) for b in train_bags])
    raw_w = np.array([per_slide[b.slide_id] for b in train_bags])
    slide_w = clip_weights(raw_w) if len(raw_w) >= 2 else raw_w
    weight_table = [(b.slide_id, float(r), float(c))
                    for b, r, c in zip(train_bags, raw_w, slide_w)]

    mil_cfg = cfg.mil_config(dataset.n_classes)
    rng = np.random.default_rng(np.random.SeedSequence([fold_seed, 31]))
    mil_params = init_mil_params(mil_cfg, rng)
    opt = Adam(mil_params, lr=cfg.lr)
    adversary = None
    if cfg.lambda_mi > 0:
        adversary = MiEstimator(
            MiConfig(z_dim=cfg.dim, c_dim=dataset.n_cohorts, hidden=cfg.mi_hidden,
                     tau=cfg.tau, lr=cfg.mi_lr),
            seed=fold_seed + 1,
        )

    labels = np.array([b.label for b in train_bags])
    cohorts = np.array([b.cohort for b in train_bags])
    checkpoints, losses, val_hist, epoch_log = [], [], [], []
    order = np.arange(len(train_bags))
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        epoch_records = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size == 0:
                continue
            batch_feats = [subsample_bag(feats_train[i], mil_cfg.n_max, rng)
                           for i in idx]
            rec = train_step(batch_feats, labels[idx], cohorts[idx], slide_w[idx],
                             mil_params, opt, mil_cfg, adversary,
                             cfg.lambda_mi, dataset.n_cohorts, cfg.mi_sign,
                             cfg.adv_steps)
            epoch_records.append(rec)
        mean_loss = float(np.mean([r["loss"] for r in epoch_records]))
        losses.append(mean_loss)
        mi_vals = [r["l_mi"] for r in epoch_records if r["l_mi"] is not None]
        epoch_log.append({
            "epoch": epoch,
            "loss": mean_loss,
            "l_mil": float(np.mean([r["l_mil"] for r in epoch_records])),
            "l_mi": float(np.mean(mi_vals)) if mi_vals else None,
        })
        val_auc = None
        if val_bags:
            val_report = evaluate(mil_params, mil_cfg, val_bags, feats_val,
                                  dataset.n_classes, dataset.n_cohorts)
            val_auc = val_report.auc
        val_hist.append(val_auc)
        epoch_log[-1]["val_auc"] = val_auc
        checkpoints.append({
            "epoch": epoch,
            "val_auc": val_auc,
            "params": {k: v.copy() for k, v in mil_params.items()},
        })
        log.info("epoch=%d loss=%.6f val_auc=%s", epoch, mean_loss, val_auc)

    members = bag_models(checkpoints, cfg.top_k)
    member_params = [m["params"] for m in members]
    report = evaluate(member_params, mil_cfg, test_bags, feats_test,
                      dataset.n_classes, dataset.n_cohorts) if test_bags else MetricsReport()

    # cohort probe on the best model's representations over the whole dataset
    all_bags = train_bags + val_bags + test_bags
    all_feats = feats_train + feats_val + feats_test
    if dataset.n_cohorts >= 2 and all_bags:
        z = representations(member_params[0], mil_cfg, all_feats)
        report.probe_auc = cohort_probe(z, np.array([b.cohort for b in all_bags]),
                                        seed=fold_seed)
    report.losses = {"final_train_loss": losses[-1] if losses else None}

    return FoldResult(
        report=report,
        val_history=val_hist,
        loss_history=losses,
        ensemble_epochs=[m["epoch"] for m in members],
        split=split,
        encoder_params=enc_params,
        mil_members=member_params,
        adversary_params=adversary.params if adversary is not None else None,
        pretrain_history=list(pre_hist),
        weight_table=weight_table,
        epoch_records=epoch_log,
    )


def _agg_stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def aggregate_reports(reports: list[MetricsReport], n_cohorts: int) -> dict:
    """Mean +/- std across folds, overall and per cohort."""
    out = {
        "auc": _agg_stats([r.auc for r in reports]),
        "bacc": _agg_stats([r.bacc for r in reports]),
        "probe_auc": _agg_stats([r.probe_auc for r in reports]),
        "per_cohort": {},
        "n_folds": len(reports),
    }
    for c in range(n_cohorts):
        out["per_cohort"][str(c)] = {
            "auc": _agg_stats([r.per_cohort.get(c, {}).get("auc") for r in reports]),
            "bacc": _agg_stats([r.per_cohort.get(c, {}).get("bacc") for r in reports]),
        }
    return out


def run_training(dataset: Dataset, cfg: TrainConfig,
                 out_dir: str | None = None) -> dict:
    """Full k-fold protocol; optionally writes checkpoints and reports."""
    splits = stratified_patient_kfold(dataset, cfg.folds, cfg.seed, cfg.val_fraction)
    fold_reports = []
    results = []
    for f, split in enumerate(splits):
        fold_seed = int(np.random.SeedSequence([cfg.seed, 37, f]).generate_state(1)[0] % (2**31))
        result = train_fold(dataset, split, cfg, fold_seed)
        results.append(result)
        fold_reports.append(result.report)
        log.info("fold=%d test_auc=%s probe_auc=%s", f, result.report.auc,
                 result.report.probe_auc)
        if out_dir is not None:
            _write_fold(out_dir, f, result, cfg, dataset)
    aggregate = {
        "config": asdict(cfg),
        "folds": [r.to_dict() for r in fold_reports],
        "aggregate": aggregate_reports(fold_reports, dataset.n_cohorts),
    }
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(aggregate, fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(format_report_table(aggregate, dataset.n_cohorts))
    return aggregate


def _fmt(stats) -> str:
    if stats is None or stats.get("mean") is None:
        return "      n/a     "
    return f"{stats['mean']:.4f} +/- {stats['std']:.4f}"


def format_report_table(aggregate: dict, n_cohorts: int) -> str:
    """Fixed-width text table of the cross-fold metrics."""
    agg = aggregate["aggregate"]
    lines = [
        f"{'group':10s} {'auc':>20s} {'bacc':>20s}",
        f"{'all':10s} {_fmt(agg['auc']):>20s} {_fmt(agg['bacc']):>20s}",
    ]
    for c in range(n_cohorts):
        row = agg["per_cohort"][str(c)]
        lines.append(f"{f'cohort{c}':10s} {_fmt(row['auc']):>20s} {_fmt(row['bacc']):>20s}")
    lines.append(f"{'probe':10s} {_fmt(agg['probe_auc']):>20s} {'':>20s}")
    lines.append(f"folds: {agg['n_folds']}")
    return "\n".join(lines) + "\n"


def _write_fold(out_dir: str, f: int, result: FoldResult, cfg: TrainConfig,
                dataset: Dataset) -> None:
    fold_dir = os.path.join(out_dir, f"fold{f}")
    os.makedirs(fold_dir, exist_ok=True)
    meta_common = {
        "config": asdict(cfg),
        "n_cohorts": dataset.n_cohorts,
        "n_classes": dataset.n_classes,
        "payload": dataset.payload,
    }
    for rank, params in enumerate(result.mil_members):
        arrays = dict(params)
        if result.encoder_params is not None:
            arrays.update(result.encoder_params)
        if result.adversary_params is not None and rank == 0:
            arrays.update(result.adversary_params)
        meta = dict(meta_common)
        meta["epoch"] = result.ensemble_epochs[rank]
        meta["val_auc"] = result.val_history[result.ensemble_epochs[rank]]
        save_arrays(os.path.join(fold_dir, f"model_top{rank + 1}.ckpt"), arrays, meta)
    fold_report = {
        "report": result.report.to_dict(),
        "val_history": result.val_history,
        "loss_history": result.loss_history,
        "pretrain_history": result.pretrain_history,
        "ensemble_epochs": result.ensemble_epochs,
        "split": {
            "train": list(result.split.train),
            "val": list(result.split.val),
            "test": list(result.split.test),
        },
    }
    with open(os.path.join(fold_dir, "report.json"), "w") as fh:
        json.dump(fold_report, fh, indent=2, sort_keys=True)
    with open(os.path.join(fold_dir, "training.log"), "w") as fh:
        for rec in result.epoch_records:
            parts = [f"fold={f}"] + [f"{k}={rec[k]}" for k in
                                     ("epoch", "loss", "l_mil", "l_mi", "val_auc")]
            fh.write(" ".join(parts) + "\n")
    export_weight_table(os.path.join(fold_dir, "weights.tsv"),
                        [r[0] for r in result.weight_table],
                        np.array([r[1] for r in result.weight_table]),
                        np.array([r[2] for r in result.weight_table]))
