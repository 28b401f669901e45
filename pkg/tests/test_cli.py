import hashlib
import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from cohortmil.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth dataset + one short training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    synth_cfg = {"patients_per_cohort": 12, "tiles_per_slide": [4, 6], "seed": 3}
    cfg_path = root / "synth.json"
    cfg_path.write_text(json.dumps(synth_cfg))
    data = root / "data.jsonl"
    r = runner.invoke(main, ["synth", "--config", str(cfg_path), "--out", str(data)])
    assert r.exit_code == 0, r.output

    train_cfg = {"epochs": 2, "folds": 2, "pretrain_epochs": 1, "batch_size": 6,
                 "mlp_ratio": 2, "lambda_mi": 0.5, "seed": 1}
    tcfg_path = root / "train.json"
    tcfg_path.write_text(json.dumps(train_cfg))
    run_dir = root / "run"
    r = runner.invoke(main, ["train", "--data", str(data), "--config", str(tcfg_path),
                             "--out-dir", str(run_dir)])
    assert r.exit_code == 0, r.output
    return {"root": root, "data": data, "run": run_dir, "tcfg": tcfg_path,
            "synth_cfg": cfg_path}


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_synth_deterministic_checksums(workspace, tmp_path):
    runner = CliRunner()
    out = tmp_path / "again.jsonl"
    r = runner.invoke(main, ["synth", "--config", str(workspace["synth_cfg"]),
                             "--out", str(out)])
    assert r.exit_code == 0
    assert file_hash(out) == file_hash(workspace["data"])
    assert file_hash(str(out) + ".bin") == file_hash(str(workspace["data"]) + ".bin")


def test_synth_missing_out_usage_error():
    r = CliRunner().invoke(main, ["synth"])
    assert r.exit_code == 2


def test_flag_overrides_config_file(workspace, tmp_path):
    runner = CliRunner()
    out = tmp_path / "override.jsonl"
    # config file says seed 3; the flag wins, so checksums must differ
    r = runner.invoke(main, ["synth", "--config", str(workspace["synth_cfg"]),
                             "--out", str(out), "--seed", "4"])
    assert r.exit_code == 0
    assert file_hash(out) != file_hash(workspace["data"])
    resolved = json.load(open(str(out) + ".config.json"))
    assert resolved["seed"] == 4


def test_synth_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"patients_per_cohort": 4, "bogus_key": 1}))
    r = CliRunner().invoke(main, ["synth", "--config", str(bad),
                                  "--out", str(tmp_path / "x.jsonl")])
    assert r.exit_code == 2
    assert "bogus_key" in r.output


def test_synth_summary_matches_manifest(workspace):
    manifest = json.loads(open(workspace["data"]).readline())
    from cohortmil.data import read_dataset, summary
    s = summary(read_dataset(str(workspace["data"])))
    assert s["n_bags"] == manifest["n_bags"]


def test_train_writes_fold_dirs_and_config(workspace):
    run = workspace["run"]
    assert sorted(d for d in os.listdir(run) if d.startswith("fold")) == ["fold0", "fold1"]
    resolved = json.load(open(run / "config.json"))
    assert resolved["lambda_mi"] == 0.5
    assert (run / "report.json").exists()
    assert (run / "report.txt").exists()
    log_lines = (run / "fold0" / "training.log").read_text().splitlines()
    assert len(log_lines) == 2 and log_lines[0].startswith("fold=0 epoch=0 loss=")
    weights = (run / "fold0" / "weights.tsv").read_text().splitlines()
    assert weights[0] == "sample_id\traw_weight\tclipped_weight"
    assert len(weights) > 1


def test_train_nonfinite_data_exit4_removes_outputs(workspace, tmp_path):
    import numpy as np
    from cohortmil.data import Bag, Dataset, write_dataset
    rng = np.random.default_rng(0)
    bags = []
    for c in range(2):
        for p in range(6):
            feats = rng.standard_normal((4, 32)).astype(np.float32)
            if c == 0 and p == 0:
                feats[0, 0] = np.nan
            bags.append(Bag(f"c{c}p{p}", f"c{c}_pat{p}", c, p % 2,
                            features=feats, proxy=np.zeros(4, dtype=np.int32)))
    bad = tmp_path / "bad.jsonl"
    write_dataset(Dataset(bags, 2, 2, payload="features", feature_dim=32), str(bad))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "folds": 2, "batch_size": 6,
                               "encoder_mode": "precomputed", "lambda_mi": 0.0,
                               "seed": 0}))
    out = tmp_path / "doomed"
    r = CliRunner().invoke(main, ["train", "--data", str(bad), "--config", str(cfg),
                                  "--out-dir", str(out)])
    assert r.exit_code == 4
    assert not out.exists()


def test_train_rerun_identical_report(workspace, tmp_path):
    runner = CliRunner()
    second = tmp_path / "run2"
    r = runner.invoke(main, ["train", "--data", str(workspace["data"]),
                             "--config", str(workspace["tcfg"]),
                             "--out-dir", str(second)])
    assert r.exit_code == 0
    a = json.load(open(workspace["run"] / "report.json"))
    b = json.load(open(second / "report.json"))
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_eval_reproduces_stored_validation_metrics(workspace):
    runner = CliRunner()
    fold0 = workspace["run"] / "fold0"
    r = runner.invoke(main, ["eval", "--model", str(fold0), "--data",
                             str(workspace["data"]), "--split", "test"])
    assert r.exit_code == 0, r.output
    payload = json.loads(r.output.strip().splitlines()[-1])
    stored = json.load(open(fold0 / "report.json"))["report"]
    assert payload["auc"] == pytest.approx(stored["auc"], abs=1e-12)


def test_eval_mismatched_dataset_exit5(workspace, tmp_path):
    runner = CliRunner()
    other = tmp_path / "other.jsonl"
    cfg = tmp_path / "other.json"
    cfg.write_text(json.dumps({"patients_per_cohort": 8, "n_cohorts": 3,
                               "tiles_per_slide": [4, 4], "seed": 0}))
    r = runner.invoke(main, ["synth", "--config", str(cfg), "--out", str(other)])
    assert r.exit_code == 0
    r = runner.invoke(main, ["eval", "--model", str(workspace["run"] / "fold0"),
                             "--data", str(other)])
    assert r.exit_code == 5


def test_probe_outputs_auc_in_range(workspace):
    runner = CliRunner()
    ckpt = workspace["run"] / "fold0" / "model_top1.ckpt"
    r = runner.invoke(main, ["probe", "--model", str(ckpt), "--data",
                             str(workspace["data"])])
    assert r.exit_code == 0, r.output
    payload = json.loads(r.output.strip().splitlines()[-1])
    assert 0.0 <= payload["probe_auc"] <= 1.0


def test_probe_single_cohort_exit2(workspace, tmp_path):
    runner = CliRunner()
    mono = tmp_path / "mono.jsonl"
    cfg = tmp_path / "mono.json"
    cfg.write_text(json.dumps({"patients_per_cohort": 6, "n_cohorts": 1,
                               "tiles_per_slide": [4, 4], "seed": 0}))
    r = runner.invoke(main, ["synth", "--config", str(cfg), "--out", str(mono)])
    assert r.exit_code == 0
    r = runner.invoke(main, ["probe", "--model",
                             str(workspace["run"] / "fold0" / "model_top1.ckpt"),
                             "--data", str(mono)])
    assert r.exit_code in (2, 5)   # cohort-count mismatch detected first is fine


def test_missing_dataset_exit3(workspace):
    r = CliRunner().invoke(main, ["eval", "--model",
                                  str(workspace["run"] / "fold0"),
                                  "--data", "/nonexistent/data.jsonl"])
    assert r.exit_code == 3


def test_verify_lists_every_suite_exactly_once():
    from cohortmil.verify import ALL_SUITES, run_all
    names = [name for name, _ in ALL_SUITES]
    assert len(names) == len(set(names))
    fast = [(n, f) for n, f in ALL_SUITES
            if n in ("balancing", "auc_oracle", "estimator_identities")]
    rows = run_all(fast)
    assert [r[0] for r in rows] == [n for n, _ in fast]
    assert all(r[1] for r in rows)


def test_broken_gradient_fails_verify_suite(monkeypatch):
    """Mutation check: a sign flip in the clip gradient must trip the
    gradient suite."""
    import cohortmil.autodiff as ad
    from cohortmil.verify import suite_gradcheck_primitives

    real_clip = ad.clip

    def broken_clip(a, lo, hi):
        out = real_clip(a, lo, hi)
        node = out.graph._nodes[out.nid]
        real_vjp = node.vjp
        if real_vjp is not None:
            node.vjp = lambda g: tuple(-x for x in real_vjp(g))
        return out

    monkeypatch.setattr(ad, "clip", broken_clip)
    with pytest.raises(AssertionError, match="clip"):
        suite_gradcheck_primitives(instances=1)
