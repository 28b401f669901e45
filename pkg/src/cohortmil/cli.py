"""Command-line surface: dataset synthesis, training, evaluation, probing,
invariant verification, and a lambda sweep.

Exit codes: 0 success, 2 usage/config error, 3 IO error, 4 numeric
failure, 5 artifact mismatch. Config precedence is flags > config file >
defaults, and every run writes its resolved config next to its outputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
import sys

import click
import numpy as np

from .autodiff import NumericError
from .checkpoint import load_arrays
from .data import (Dataset, SynthConfig, generate, read_dataset, summary,
                   write_dataset)
from .errors import ArtifactMismatchError, ConfigError, DataFormatError
from .mil import MilConfig
from .train import TrainConfig, cohort_probe, evaluate, representations, run_training

log = logging.getLogger("cohortmil")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5


def _setup_logging():
    level = os.environ.get("COHORTMIL_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(message)s", stream=sys.stderr)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config_file(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        _fail(EXIT_IO, f"cannot read config file: {e}")
    except json.JSONDecodeError as e:
        _fail(EXIT_CONFIG, f"config file is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        _fail(EXIT_CONFIG, "config file must hold a JSON object")
    unknown = set(cfg) - allowed
    if unknown:
        _fail(EXIT_CONFIG, f"unknown config keys: {sorted(unknown)}")
    return cfg


def _coerce_tuples(cfg: dict) -> dict:
    out = {}
    for k, v in cfg.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        out[k] = v
    return out


def _build(cls, file_cfg: dict, overrides: dict):
    merged = dict(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**_coerce_tuples(merged))
    except (ConfigError, TypeError, ValueError) as e:
        _fail(EXIT_CONFIG, str(e))


def _write_resolved_config(obj, path: str):
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(obj), fh, indent=2, sort_keys=True)


@click.group()
def main():
    """Multi-cohort MIL training with cohort-aware attention and
    adversarial mutual-information regularization."""
    _setup_logging()


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON file with SynthConfig fields.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
def synth(config_path, out_path, seed):
    """Generate a synthetic multi-cohort dataset and print its summary."""
    allowed = {f.name for f in dataclasses.fields(SynthConfig)}
    cfg = _build(SynthConfig, _load_config_file(config_path, allowed),
                 {"seed": seed})
    dataset = generate(cfg)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        write_dataset(dataset, out_path)
        _write_resolved_config(cfg, out_path + ".config.json")
    except OSError as e:
        _fail(EXIT_IO, f"cannot write dataset: {e}")
    s = summary(dataset)
    click.echo(f"bags={s['n_bags']} patients={s['n_patients']}")
    for c, row in enumerate(s["slides_per_cohort_class"]):
        total = sum(row)
        shares = " ".join(
            f"class{y}={n} ({100.0 * n / total:.0f}%)" for y, n in enumerate(row))
        click.echo(f"cohort{c}: slides={total} {shares}")


_TRAIN_ALLOWED = {f.name for f in dataclasses.fields(TrainConfig)}


def _read_data(path: str) -> Dataset:
    try:
        return read_dataset(path)
    except DataFormatError as e:
        _fail(EXIT_IO, f"bad dataset file: {e}")


@main.command()
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--lambda", "lambda_mi", type=float, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--aggregator", type=click.Choice(["mean", "max", "abmil", "mha"]), default=None)
@click.option("--folds", type=int, default=None)
@click.option("--encoder-mode", type=click.Choice(["cavit", "plain_vit", "precomputed"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train(data_path, config_path, out_dir, lambda_mi, tau, aggregator, folds,
          encoder_mode, epochs, seed):
    """K-fold adversarial cohort-regularized training."""
    cfg = _build(TrainConfig, _load_config_file(config_path, _TRAIN_ALLOWED), {
        "lambda_mi": lambda_mi, "tau": tau, "aggregator": aggregator,
        "folds": folds, "encoder_mode": encoder_mode, "epochs": epochs,
        "seed": seed,
    })
    dataset = _read_data(data_path)
    created = not os.path.exists(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        _write_resolved_config(cfg, os.path.join(out_dir, "config.json"))
    except OSError as e:
        _fail(EXIT_IO, f"cannot prepare output directory: {e}")
    try:
        report = run_training(dataset, cfg, out_dir=out_dir)
    except NumericError as e:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        _fail(EXIT_NUMERIC, f"non-finite value during training: {e}")
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    except ArtifactMismatchError as e:
        _fail(EXIT_MISMATCH, str(e))
    agg = report["aggregate"]
    click.echo(json.dumps(agg, sort_keys=True))


def _split_params(arrays: dict) -> tuple[dict, dict]:
    mil = {k: v for k, v in arrays.items() if k.startswith("mil.")}
    enc = {k: v for k, v in arrays.items() if k.startswith("enc.")}
    return mil, enc


def _features_for(dataset: Dataset, enc_params: dict, meta: dict):
    from .encoder import CaVitConfig, encode_tiles
    cfg = meta["config"]
    if cfg["encoder_mode"] == "precomputed":
        if dataset.payload != "features":
            raise ArtifactMismatchError("checkpoint expects a features dataset")
        return [np.asarray(b.features, dtype=np.float64) for b in dataset.bags]
    if dataset.payload != "tiles":
        raise ArtifactMismatchError("checkpoint expects a tiles dataset")
    if not enc_params:
        raise ArtifactMismatchError("checkpoint lacks encoder parameters")
    vit = CaVitConfig(side=dataset.side, channels=dataset.channels,
                      patch_size=cfg["patch_size"], dim=cfg["dim"],
                      depth=cfg["depth"], n_heads=cfg["n_heads"],
                      head_dim=cfg["head_dim"], mlp_ratio=cfg["mlp_ratio"],
                      n_cohorts=dataset.n_cohorts)
    mode = "cavit" if cfg["encoder_mode"] == "cavit" else "plain_vit"
    return [encode_tiles(b.tiles.astype(np.float64), b.cohort, enc_params, vit, mode)
            for b in dataset.bags]


def _load_model_spec(model_path: str):
    """A checkpoint file, or a fold directory with ranked members."""
    if os.path.isdir(model_path):
        report_path = os.path.join(model_path, "report.json")
        try:
            with open(report_path) as fh:
                fold_report = json.load(fh)
        except OSError as e:
            _fail(EXIT_IO, f"cannot read fold report: {e}")
        members = sorted(
            f for f in os.listdir(model_path)
            if f.startswith("model_top") and f.endswith(".ckpt"))
        if not members:
            _fail(EXIT_MISMATCH, "no checkpoints in fold directory")
        loaded = [load_arrays(os.path.join(model_path, m)) for m in members]
        return loaded, fold_report
    try:
        return [load_arrays(model_path)], None
    except DataFormatError as e:
        _fail(EXIT_IO, f"bad checkpoint: {e}")


def _check_dataset_match(meta: dict, dataset: Dataset):
    if meta.get("n_cohorts") != dataset.n_cohorts or \
       meta.get("n_classes") != dataset.n_classes:
        raise ArtifactMismatchError(
            f"checkpoint was trained for {meta.get('n_cohorts')} cohorts / "
            f"{meta.get('n_classes')} classes; dataset has {dataset.n_cohorts} / "
            f"{dataset.n_classes}")


def _select_bags(dataset: Dataset, fold_report, split: str):
    if split == "all" or fold_report is None:
        return list(range(len(dataset.bags)))
    pids = set(fold_report["split"][split])
    return [i for i, b in enumerate(dataset.bags) if b.patient_id in pids]


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(), required=True,
              help="Checkpoint file or fold directory.")
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]),
              default="all", help="Which stored split to evaluate (fold dirs only).")
@click.option("--out", "out_path", type=click.Path(), default=None)
def eval_cmd(model_path, data_path, split, out_path):
    """Evaluate a model or fold ensemble; prints and writes a JSON report."""
    dataset = _read_data(data_path)
    loaded, fold_report = _load_model_spec(model_path)
    meta = loaded[0][1]
    try:
        _check_dataset_match(meta, dataset)
        idx = _select_bags(dataset, fold_report, split)
        if not idx:
            raise ConfigError(f"no bags in split {split!r}")
        bags = [dataset.bags[i] for i in idx]
        mil_list, enc = [], None
        for arrays, m in loaded:
            mil, e = _split_params(arrays)
            mil_list.append(mil)
            if e:
                enc = e
        feats_all = _features_for(dataset, enc, meta)
        feats = [feats_all[i] for i in idx]
        mil_cfg = MilConfig(kind=meta["config"]["aggregator"], dim=meta["config"]["dim"],
                            n_classes=dataset.n_classes)
        report = evaluate(mil_list, mil_cfg, bags, feats,
                          dataset.n_classes, dataset.n_cohorts)
    except ArtifactMismatchError as e:
        _fail(EXIT_MISMATCH, str(e))
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    except NumericError as e:
        _fail(EXIT_NUMERIC, str(e))
    payload = report.to_dict()
    click.echo(json.dumps(payload, sort_keys=True))
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


@main.command()
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
def probe(model_path, data_path, out_path, seed):
    """Linear cohort probe on the model's slide representations."""
    dataset = _read_data(data_path)
    loaded, _ = _load_model_spec(model_path)
    arrays, meta = loaded[0]
    try:
        _check_dataset_match(meta, dataset)
        if dataset.n_cohorts < 2:
            raise ConfigError("cohort probe needs at least 2 cohorts in the data")
        mil, enc = _split_params(arrays)
        feats = _features_for(dataset, enc, meta)
        mil_cfg = MilConfig(kind=meta["config"]["aggregator"], dim=meta["config"]["dim"],
                            n_classes=dataset.n_classes)
        z = representations(mil, mil_cfg, feats)
        auc = cohort_probe(z, np.array([b.cohort for b in dataset.bags]), seed=seed)
    except ArtifactMismatchError as e:
        _fail(EXIT_MISMATCH, str(e))
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    except NumericError as e:
        _fail(EXIT_NUMERIC, str(e))
    payload = {"probe_auc": auc, "n_slides": len(dataset.bags)}
    click.echo(json.dumps(payload, sort_keys=True))
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


@main.command()
@click.option("--fast/--full", default=True,
              help="--full adds the heavier Gaussian MI oracle budget.")
def verify(fast):
    """Run the invariant suites; nonzero exit on any failure."""
    from . import verify as v
    suites = list(v.ALL_SUITES)
    if not fast:
        suites = [s for s in suites if s[0] != "mi_gaussian_quick"]
        suites.append(("mi_gaussian_full",
                       lambda: v.suite_mi_gaussian_quick(tol=0.1, n=10000,
                                                         steps=800, eval_batches=20)))
    rows = v.run_all(suites)
    failed = 0
    for name, ok, secs, detail in rows:
        status = "PASS" if ok else "FAIL"
        line = f"{name:26s} {status} {secs:7.2f}s"
        if detail:
            line += f"  {detail}"
        click.echo(line)
        failed += 0 if ok else 1
    if failed:
        _fail(EXIT_NUMERIC, f"{failed} suite(s) failed")


@main.command("sweep-lambda")
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--lambdas", default="0,0.25,0.5,1",
              help="Comma-separated lambda values.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
def sweep_lambda(data_path, out_dir, lambdas, config_path, seed):
    """Train once per lambda value and tabulate the aggregate metrics."""
    try:
        values = [float(x) for x in lambdas.split(",") if x.strip() != ""]
    except ValueError:
        _fail(EXIT_CONFIG, f"bad --lambdas list: {lambdas!r}")
    dataset = _read_data(data_path)
    base = _load_config_file(config_path, _TRAIN_ALLOWED)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for lam in values:
        cfg = _build(TrainConfig, base, {"lambda_mi": lam, "seed": seed})
        sub = os.path.join(out_dir, f"lambda_{lam:g}")
        os.makedirs(sub, exist_ok=True)
        _write_resolved_config(cfg, os.path.join(sub, "config.json"))
        try:
            report = run_training(dataset, cfg, out_dir=sub)
        except NumericError as e:
            _fail(EXIT_NUMERIC, f"non-finite value at lambda={lam}: {e}")
        agg = report["aggregate"]
        rows.append({"lambda": lam, "auc": agg["auc"], "probe_auc": agg["probe_auc"]})
        click.echo(f"lambda={lam:g} auc={agg['auc']['mean']} probe={agg['probe_auc']['mean']}")
    with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
