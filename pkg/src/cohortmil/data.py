"""Synthetic multi-cohort bag datasets, patient-stratified k-fold splitting,
and the dataset file format (JSON manifest + little-endian float32 sidecar).

Tiles are unit-variance noise images. Each bag of class y carries witness
tiles stamped with a class motif shared across cohorts plus a
cohort-conditioned motif; class priors per cohort can be skewed directly
or through a single bias knob, which is the confound the MI regularizer
is meant to remove.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

COHORT_SIGNAL_MODES = ("cohort", "conflicting")


@dataclass(frozen=True)
class SynthConfig:
    n_cohorts: int = 2
    n_classes: int = 2
    patients_per_cohort: int = 20
    slides_per_patient: int = 1
    tiles_per_slide: tuple[int, int] = (8, 16)
    side: int = 16
    channels: int = 1
    shared_signal: float = 1.0
    cohort_signal: float = 1.0
    bias: float = 0.0
    witness_fraction: float = 0.25
    class_priors: tuple[tuple[float, ...], ...] | None = None
    cohort_signal_mode: str = "cohort"
    motif_seed: int | None = None   # None: derived from seed
    seed: int = 0

    def __post_init__(self):
        if self.n_cohorts < 1 or self.n_classes < 2:
            raise ConfigError("need >= 1 cohort and >= 2 classes")
        if not (0.0 < self.witness_fraction <= 1.0):
            raise ConfigError("witness_fraction must be in (0, 1]")
        if self.shared_signal < 0 or self.cohort_signal < 0:
            raise ConfigError("signal strengths must be >= 0")
        if not (0.0 <= self.bias <= 1.0):
            raise ConfigError("bias must be in [0, 1]")
        if self.tiles_per_slide[0] < 1 or self.tiles_per_slide[0] > self.tiles_per_slide[1]:
            raise ConfigError("invalid tiles_per_slide range")
        if self.cohort_signal_mode not in COHORT_SIGNAL_MODES:
            raise ConfigError(f"unknown cohort_signal_mode {self.cohort_signal_mode!r}")
        if self.class_priors is not None:
            if len(self.class_priors) != self.n_cohorts:
                raise ConfigError("class_priors must have one row per cohort")
            for row in self.class_priors:
                if len(row) != self.n_classes or abs(sum(row) - 1.0) > 1e-9:
                    raise ConfigError("each cohort's class priors must sum to 1")

    def priors(self) -> np.ndarray:
        """Per-cohort class priors; explicit priors win over the bias knob."""
        if self.class_priors is not None:
            return np.array(self.class_priors, dtype=np.float64)
        uniform = np.full(self.n_classes, 1.0 / self.n_classes)
        rows = []
        for c in range(self.n_cohorts):
            favored = np.zeros(self.n_classes)
            favored[c % self.n_classes] = 1.0
            rows.append((1.0 - self.bias) * uniform + self.bias * favored)
        return np.array(rows)


@dataclass
class Bag:
    slide_id: str
    patient_id: str
    cohort: int
    label: int
    tiles: np.ndarray | None = None      # (n, c, s, s) float32
    features: np.ndarray | None = None   # (n, d) float32
    proxy: np.ndarray | None = None      # (n,) int32 tile proxy labels
    weight: float = 1.0

    @property
    def n(self) -> int:
        arr = self.tiles if self.tiles is not None else self.features
        return arr.shape[0]


@dataclass
class Dataset:
    bags: list[Bag]
    n_cohorts: int
    n_classes: int
    payload: str = "tiles"              # "tiles" | "features"
    side: int | None = None
    channels: int | None = None
    feature_dim: int | None = None

    def patients(self) -> dict[str, tuple[int, int]]:
        """patient_id -> (cohort, label); the label of a patient's first bag."""
        out: dict[str, tuple[int, int]] = {}
        for b in self.bags:
            out.setdefault(b.patient_id, (b.cohort, b.label))
        return out

    def bags_for(self, patient_ids) -> list[Bag]:
        wanted = set(patient_ids)
        return [b for b in self.bags if b.patient_id in wanted]


def _motif(tag: tuple, cfg: SynthConfig) -> np.ndarray:
    """Deterministic unit-RMS pattern keyed by the tag tuple."""
    base = cfg.seed if cfg.motif_seed is None else cfg.motif_seed
    ss = np.random.SeedSequence([int(base), 7919, *[int(t) for t in tag]])
    g = np.random.default_rng(ss)
    pat = g.standard_normal((cfg.channels, cfg.side, cfg.side))
    return pat / np.sqrt(np.mean(pat * pat))


def _cohort_motif_key(cohort: int, label: int, cfg: SynthConfig) -> tuple:
    if cfg.cohort_signal_mode == "cohort":
        # pure per-cohort watermark, independent of the class
        return (2, cohort)
    # conflicting: the same pattern stands for different classes in
    # different cohorts, so only a cohort-aware encoder can resolve it
    return (3, (label + cohort) % cfg.n_classes)


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset; bitwise-identical given the config."""
    priors = cfg.priors()
    shared = {y: _motif((1, y), cfg) for y in range(cfg.n_classes)}
    cohort_motifs = {
        (c, y): _motif(_cohort_motif_key(c, y, cfg), cfg)
        for c in range(cfg.n_cohorts) for y in range(cfg.n_classes)
    }
    bags: list[Bag] = []
    for c in range(cfg.n_cohorts):
        for p in range(cfg.patients_per_cohort):
            prng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11, c, p]))
            label = int(prng.choice(cfg.n_classes, p=priors[c]))
            patient_id = f"c{c}_p{p:03d}"
            for s in range(cfg.slides_per_patient):
                srng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13, c, p, s]))
                lo, hi = cfg.tiles_per_slide
                n = int(srng.integers(lo, hi + 1))
                tiles = srng.standard_normal((n, cfg.channels, cfg.side, cfg.side))
                n_wit = int(np.clip(round(cfg.witness_fraction * n), 1, n))
                wit = srng.choice(n, size=n_wit, replace=False)
                stamp = cfg.shared_signal * shared[label] \
                    + cfg.cohort_signal * cohort_motifs[(c, label)]
                tiles[wit] += stamp
                proxy = np.zeros(n, dtype=np.int32)
                proxy[wit] = label + 1
                bags.append(Bag(
                    slide_id=f"{patient_id}_s{s}",
                    patient_id=patient_id,
                    cohort=c,
                    label=label,
                    tiles=tiles.astype(np.float32),
                    proxy=proxy,
                ))
    return Dataset(bags, cfg.n_cohorts, cfg.n_classes, payload="tiles",
                   side=cfg.side, channels=cfg.channels)


def summary(dataset: Dataset) -> dict:
    """Slide counts per cohort per class plus patient counts."""
    counts = np.zeros((dataset.n_cohorts, dataset.n_classes), dtype=int)
    for b in dataset.bags:
        counts[b.cohort, b.label] += 1
    return {
        "n_bags": len(dataset.bags),
        "n_patients": len(dataset.patients()),
        "slides_per_cohort_class": counts.tolist(),
    }


# -- splitting -----------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


def _strata(dataset: Dataset) -> dict[tuple[int, int], list[str]]:
    strata: dict[tuple[int, int], list[str]] = {}
    for pid, (cohort, label) in sorted(dataset.patients().items()):
        strata.setdefault((cohort, label), []).append(pid)
    return strata


def stratified_patient_kfold(dataset: Dataset, folds: int, seed: int,
                             val_fraction: float = 0.1) -> list[FoldSplit]:
    """Patient-level k-fold, stratified by (cohort, class).

    Every patient lands in exactly one test fold; within each fold,
    val_fraction of the training patients (per stratum) move to
    validation. Fold (cohort, class) counts stay within one patient of
    an even split.
    """
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    strata = _strata(dataset)
    for key, pids in strata.items():
        if len(pids) < folds:
            raise ConfigError(
                f"stratum (cohort={key[0]}, class={key[1]}) has {len(pids)} patients, "
                f"fewer than {folds} folds"
            )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    assignment: dict[str, int] = {}
    for key in sorted(strata):
        pids = strata[key]
        perm = rng.permutation(len(pids))
        for i, j in enumerate(perm):
            assignment[pids[j]] = i % folds

    out = []
    for f in range(folds):
        test = tuple(pid for pid in sorted(assignment) if assignment[pid] == f)
        pool = [pid for pid in sorted(assignment) if assignment[pid] != f]
        vrng = np.random.default_rng(np.random.SeedSequence([seed, 19, f]))
        val: list[str] = []
        patients = dataset.patients()
        pool_strata: dict[tuple[int, int], list[str]] = {}
        for pid in pool:
            pool_strata.setdefault(patients[pid], []).append(pid)
        for key in sorted(pool_strata):
            pids = pool_strata[key]
            if len(pids) < 2:
                continue
            n_val = int(round(val_fraction * len(pids)))
            n_val = max(1, min(n_val, len(pids) - 1))
            picked = vrng.choice(len(pids), size=n_val, replace=False)
            val.extend(pids[i] for i in sorted(picked))
        val_set = set(val)
        train = tuple(pid for pid in pool if pid not in val_set)
        out.append(FoldSplit(train=train, val=tuple(val), test=test))
    return out


def holdout_split(dataset: Dataset, seed: int,
                  fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)) -> FoldSplit:
    """Single stratified patient-level train/val/test split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    train, val, test = [], [], []
    for key, pids in sorted(_strata(dataset).items()):
        perm = rng.permutation(len(pids))
        n = len(pids)
        n_train = max(1, int(round(fractions[0] * n)))
        n_val = max(1, int(round(fractions[1] * n))) if n - n_train >= 2 else 0
        for rank, j in enumerate(perm):
            if rank < n_train:
                train.append(pids[j])
            elif rank < n_train + n_val:
                val.append(pids[j])
            else:
                test.append(pids[j])
    return FoldSplit(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


# -- file IO ---------------------------------------------------------------------

_FORMAT = "cohortmil-dataset"


def write_dataset(dataset: Dataset, path: str) -> None:
    """Manifest (JSON lines) at ``path``; float32 payload at ``path + '.bin'``."""
    sidecar = path + ".bin"
    records = []
    offset = 0
    blobs = []
    for b in dataset.bags:
        arr = b.tiles if dataset.payload == "tiles" else b.features
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        records.append({
            "slide_id": b.slide_id,
            "patient_id": b.patient_id,
            "cohort": b.cohort,
            "label": b.label,
            "n": int(b.n),
            "offset": offset,
            "nbytes": len(blob),
            "proxy": [int(x) for x in (b.proxy if b.proxy is not None else np.zeros(b.n, dtype=np.int32))],
            "weight": float(b.weight),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": _FORMAT,
        "version": 1,
        "payload": dataset.payload,
        "n_cohorts": dataset.n_cohorts,
        "n_classes": dataset.n_classes,
        "side": dataset.side,
        "channels": dataset.channels,
        "feature_dim": dataset.feature_dim,
        "n_bags": len(dataset.bags),
        "dtype": "float32",
        "byteorder": "little",
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(manifest, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(sidecar, "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def read_dataset(path: str) -> Dataset:
    """Parse and validate a dataset; raises DataFormatError with the
    offending line, returning nothing partial."""
    sidecar = path + ".bin"
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"cannot read manifest: {e}") from e
    if not lines:
        raise DataFormatError("empty manifest", line=1)
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"bad manifest JSON: {e}", line=1) from e
    if manifest.get("format") != _FORMAT:
        raise DataFormatError("not a cohortmil dataset file", line=1)
    payload = manifest["payload"]
    if payload not in ("tiles", "features"):
        raise DataFormatError(f"unknown payload kind {payload!r}", line=1)
    n_bags = manifest["n_bags"]
    records = []
    for i, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            records.append((i, json.loads(raw)))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"bad bag record: {e}", line=i) from e
    if len(records) != n_bags:
        raise DataFormatError(
            f"manifest declares {n_bags} bags but file has {len(records)} records"
        )
    try:
        with open(sidecar, "rb") as fh:
            payload_bytes = fh.read()
    except OSError as e:
        raise DataFormatError(f"cannot read sidecar {sidecar}: {e}") from e

    k = manifest["n_cohorts"]
    m = manifest["n_classes"]
    bags = []
    for line_no, rec in records:
        try:
            cohort, label, n = rec["cohort"], rec["label"], rec["n"]
            offset, nbytes = rec["offset"], rec["nbytes"]
        except KeyError as e:
            raise DataFormatError(f"bag record missing key {e}", line=line_no) from e
        if not 0 <= cohort < k:
            raise DataFormatError(f"cohort {cohort} out of range for k={k}", line=line_no)
        if not 0 <= label < m:
            raise DataFormatError(f"label {label} out of range for m={m}", line=line_no)
        if n < 1:
            raise DataFormatError("empty bag", line=line_no)
        if offset + nbytes > len(payload_bytes):
            raise DataFormatError(
                f"payload range [{offset}, {offset + nbytes}) beyond sidecar size "
                f"{len(payload_bytes)} (truncated file?)", line=line_no)
        flat = np.frombuffer(payload_bytes[offset:offset + nbytes], dtype="<f4")
        if payload == "tiles":
            c, s = manifest["channels"], manifest["side"]
            if flat.size != n * c * s * s:
                raise DataFormatError("payload size does not match tile geometry", line=line_no)
            tiles, features = flat.reshape(n, c, s, s).copy(), None
        else:
            d = manifest["feature_dim"]
            if flat.size != n * d:
                raise DataFormatError("payload size does not match feature_dim", line=line_no)
            tiles, features = None, flat.reshape(n, d).copy()
        proxy = np.asarray(rec.get("proxy", [0] * n), dtype=np.int32)
        if proxy.shape != (n,):
            raise DataFormatError("proxy label count does not match n", line=line_no)
        bags.append(Bag(rec["slide_id"], rec["patient_id"], cohort, label,
                        tiles=tiles, features=features, proxy=proxy,
                        weight=float(rec.get("weight", 1.0))))
    return Dataset(bags, k, m, payload=payload, side=manifest.get("side"),
                   channels=manifest.get("channels"),
                   feature_dim=manifest.get("feature_dim"))


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bitwise equality of two datasets (payload and metadata)."""
    if (a.n_cohorts, a.n_classes, a.payload, len(a.bags)) != \
       (b.n_cohorts, b.n_classes, b.payload, len(b.bags)):
        return False
    for x, y in zip(a.bags, b.bags):
        if (x.slide_id, x.patient_id, x.cohort, x.label) != \
           (y.slide_id, y.patient_id, y.cohort, y.label):
            return False
        for ax, ay in ((x.tiles, y.tiles), (x.features, y.features), (x.proxy, y.proxy)):
            if (ax is None) != (ay is None):
                return False
            if ax is not None and not np.array_equal(ax, ay):
                return False
    return True
