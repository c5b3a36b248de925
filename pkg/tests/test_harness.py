import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from dxa3d import harness
from dxa3d.cli import main
from dxa3d.config import load_config
from dxa3d.curves import CurveSet
from dxa3d.formats import load_volume
from dxa3d.metrics import reports_from_csv

TINY = """
[dataset]
n_samples = {n}
seed = 3
[model]
conv_channels = 4 4 8 8 8
attn_heads = 2
[train]
epochs = 2
lr = 1e-3
[eval]
figures = 2
"""


def tiny_cfg(tmp_path, n=20, **sections):
    cfg = load_config(text=TINY.format(n=n))
    cfg = replace(cfg, output_dir=str(tmp_path))
    for name, kw in sections.items():
        cfg = replace(cfg, **{name: replace(getattr(cfg, name), **kw)})
    return cfg


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    cfg = tiny_cfg(tmp_path_factory.mktemp("gen"), n=100)
    return cfg, harness.cmd_generate(cfg)


def test_split_sizes_and_strata(generated):
    _, recs = generated
    sizes = {s: [r for r in recs if r.split == s] for s in harness.SPLITS}
    assert [len(sizes[s]) for s in harness.SPLITS] == [80, 10, 10]
    assert sum(r.scoliosis_label for r in recs) == 20
    for s, rs in sizes.items():
        assert abs(sum(r.scoliosis_label for r in rs) - 0.2 * len(rs)) <= 1


def test_generate_is_deterministic(generated, tmp_path):
    cfg, recs = generated
    again = harness.cmd_generate(replace(cfg, output_dir=str(tmp_path)))
    assert harness.manifest_to_csv(again) == harness.manifest_to_csv(recs)
    a = harness.dataset_dir(cfg) / recs[0].render
    b = tmp_path / "dataset" / recs[0].render
    assert a.read_bytes() == b.read_bytes()


def test_manifest_roundtrip(generated):
    _, recs = generated
    assert harness.manifest_from_csv(harness.manifest_to_csv(recs)) == recs


def test_files_written(generated):
    cfg, recs = generated
    root = harness.dataset_dir(cfg)
    r = recs[0]
    assert load_volume(root / r.mask).occupancy.shape == (209, 224, 224)
    assert CurveSet.load(root / r.curves).is_valid()


def test_align_zero_perturbation_accepts_all(tmp_path):
    cfg = tiny_cfg(tmp_path, align={"max_theta": 0.0, "max_shift": 0.0})
    harness.cmd_generate(cfg)
    recs = harness.cmd_align(cfg)
    assert all(r.alignment_accepted == "1" for r in recs)
    rows = list(csv.DictReader(io.StringIO((harness.dataset_dir(cfg) / "alignment.csv").read_text())))
    assert list(rows[0]) == ["pair_id", "theta", "tx", "ty", "iou", "accepted"]
    assert all(float(r["iou"]) > 0.95 for r in rows)


def test_align_rigid_and_bend(tmp_path):
    cfg = tiny_cfg(tmp_path)
    harness.cmd_generate(cfg)
    assert all(r.alignment_accepted == "1" for r in harness.cmd_align(cfg))
    bent = replace(cfg, align=replace(cfg.align, bend_fraction=1.0, bend_amplitude=60.0))
    assert all(r.alignment_accepted == "0" for r in harness.cmd_align(bent))
    # rejected pairs are excluded downstream, splits untouched
    assert harness.usable(harness.load_manifest(bent)) == []


def test_stratified_folds_cover_and_balance():
    labels = np.array([1] * 10 + [0] * 40)
    fold = harness.stratified_folds(labels, 5, seed=0)
    for k in range(5):
        assert (fold == k).sum() == 10
        assert labels[fold == k].sum() == 2
    assert np.array_equal(fold, harness.stratified_folds(labels, 5, seed=0))


def test_train_folds_sweep_and_eval(tmp_path):
    cfg = tiny_cfg(tmp_path, n=30, run={"folds": 3, "sweep_sizes": (5, 10)})
    harness.cmd_generate(cfg)
    res = harness.cmd_train(cfg)
    out = harness.run_dir(cfg)
    assert len(list((out / "checkpoints").glob("fold*.ckpt"))) == 3
    assert len(res["folds"]) == 27 and set(res["folds"]) == {0, 1, 2}
    sweep = (out / "reports" / "sweep.csv").read_text().splitlines()
    assert len(sweep) == 3 and sweep[1].startswith("5,")
    hist = (out / "reports" / "history_model.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss,lr" and len(hist) == 3
    reports = harness.cmd_eval(cfg)
    assert {(r.target, r.model) for r in reports} == {(t, m) for t in harness.TARGETS for m in ("model", "mean-curve")}
    assert all(np.isfinite(r.mae_mean) for r in reports)
    parsed = reports_from_csv((out / "reports" / "metrics.csv").read_text())
    assert [r.target for r in parsed] == [r.target for r in reports]
    assert len(list((out / "figures").glob("*.svg"))) == 4
    text = harness.cmd_report(cfg)
    assert "Precision at 3D IoU thresholds" in text and (out / "summary.txt").exists()


def test_ground_truth_oracle_evaluation(generated):
    cfg, recs = generated
    root = harness.dataset_dir(cfg)
    test = [r for r in recs if r.split == "test"][:4]
    gts = [CurveSet.load(root / r.curves) for r in test]
    vols = [load_volume(root / r.mask) for r in test]
    reports = harness.evaluate_predictions(gts, gts, vols, "oracle", 2.197)
    for r in reports:
        assert r.mae_mean == 0 and r.re_mean == 0 and r.iou2d == 1.0
    vol = [r for r in reports if r.target == "3d"][0]
    assert vol.iou3d >= 0.95 and vol.deviation_voxels == 0


def test_cli_end_to_end(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text(TINY.format(n=20))
    base = ["--config", str(ini), "--seed", "5", "--out", str(tmp_path / "o")]
    for cmd in ("generate", "align", "train", "eval", "report"):
        assert main(base + [cmd]) == 0
    assert main(base + ["reconstruct", "--ids", "s00000"]) == 0
    assert (tmp_path / "o" / "runs" / "default" / "reconstructions" / "s00000.vol").exists()
    assert main(["--out", str(tmp_path / "empty"), "eval"]) == 2
    assert "error" in capsys.readouterr().err
