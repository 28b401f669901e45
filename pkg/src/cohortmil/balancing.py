"""Hierarchical sample weighting.

Pretraining phase: weight mass is split evenly across cohorts, then across
each cohort's slides, then across each slide's tiles. MIL phase: evenly
across present (cohort, class) combinations, then across each combination's
slides. Composed weights are clipped to two standard deviations of the
population and rescaled per batch to unit mean during training.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError


def pretrain_weights(records: Sequence[tuple[int, str, int]]) -> dict[str, float]:
    """Per-tile weight for each slide from (cohort, slide_id, n_tiles) records.

    Every tile of a slide gets the same weight; the returned map is
    slide_id -> tile weight. Total over all tiles is 1, each cohort's
    total is 1/#cohorts.
    """
    if not records:
        raise ConfigError("empty hierarchy")
    for cohort, slide_id, n_tiles in records:
        if n_tiles < 1:
            raise ConfigError(f"slide {slide_id!r} has no tiles")
    cohorts = sorted({r[0] for r in records})
    slides_per_cohort = {c: sum(1 for r in records if r[0] == c) for c in cohorts}
    out = {}
    for cohort, slide_id, n_tiles in records:
        out[slide_id] = 1.0 / (len(cohorts) * slides_per_cohort[cohort] * n_tiles)
    return out


def mil_weights(records: Sequence[tuple[int, int, str]]) -> dict[str, float]:
    """Per-slide weight from (cohort, class, slide_id) records.

    Present (cohort, class) combinations share mass equally; slides within
    a combination share its mass equally. Absent combinations simply do
    not count.
    """
    if not records:
        raise ConfigError("empty hierarchy")
    combos = sorted({(r[0], r[1]) for r in records})
    slides_per_combo = {
        combo: sum(1 for r in records if (r[0], r[1]) == combo) for combo in combos
    }
    out = {}
    for cohort, label, slide_id in records:
        out[slide_id] = 1.0 / (len(combos) * slides_per_combo[(cohort, label)])
    return out


def clip_weights(weights: np.ndarray) -> np.ndarray:
    """Clamp each weight to [max(0, mean - 2*sigma), mean + 2*sigma].

    Mean and (population) sigma are computed once over the input before
    any clipping.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size < 2:
        raise ConfigError("need at least 2 weights to clip")
    mean = w.mean()
    sigma = w.std()
    lo = max(0.0, mean - 2.0 * sigma)
    hi = mean + 2.0 * sigma
    return np.clip(w, lo, hi)


def batch_renormalize(weights: np.ndarray) -> np.ndarray:
    """Rescale a batch of weights so its mean is exactly 1."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ConfigError("empty batch")
    total = w.sum()
    if total == 0.0:
        raise ConfigError("all batch weights are zero")
    return w * (w.size / total)


def export_weight_table(path, sample_ids: Sequence[str], raw: np.ndarray,
                        clipped: np.ndarray) -> None:
    """Write a tab-separated audit table: sample id, raw weight, clipped weight."""
    with open(path, "w") as fh:
        fh.write("sample_id\traw_weight\tclipped_weight\n")
        for sid, r, c in zip(sample_ids, raw, clipped):
            fh.write(f"{sid}\t{float(r)!r}\t{float(c)!r}\n")
