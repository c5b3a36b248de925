"""Experiment orchestration: dataset generation, alignment filtering, training,
evaluation, reconstruction and the run summary.

Layout under the output directory::

    dataset/manifest.csv
    dataset/{phantoms,masks,renders,curves}/<id>.{txt,vol,pgm,csv}
    dataset/alignment.csv, dataset/alignment/<id>.txt
    runs/<name>/{checkpoints,reports,figures}
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import formats
from .config import ExperimentConfig, config_to_text
from .curves import CurveSet, curveset_from_masks, mask_from_lateral_curves
from .metrics import (
    MetricReport,
    curve_deviation_3d,
    iou,
    map_at_thresholds,
    map_to_csv,
    relative_error,
    reports_from_csv,
    reports_to_csv,
)
from .phantom import (
    IMAGE_SIZE,
    N_LEVELS,
    crop_meta,
    generate_phantom,
    mri_coronal_image,
    project,
    rasterize,
    render_pseudo_dxa,
    sample_params,
)
from .reconstruction import centerline3d, curves_overlay_svg, reconstruct_volume, three_view_svg
from .registration import RigidTransform2D, align_pair, apply_to_image, bend_image, transform_mask
from .regressor import (
    build_model,
    history_to_csv,
    load_checkpoint,
    predict,
    save_checkpoint,
    to_curveset,
    train,
)

log = logging.getLogger("dxa3d")

SPLITS = ("train", "val", "test")
TARGETS = ("input", "coronal", "sagittal", "3d")


@dataclass
class SampleRecord:
    id: str
    seed: int
    scoliosis_label: int
    split: str
    alignment_accepted: str  # "" until aligned, then "1" / "0"
    phantom: str
    mask: str
    render: str
    curves: str


MANIFEST_FIELDS = [f.name for f in fields(SampleRecord)]


def manifest_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS)
    for r in records:
        w.writerow([getattr(r, k) for k in MANIFEST_FIELDS])
    return buf.getvalue()


def manifest_from_csv(text: str) -> list[SampleRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        row["seed"] = int(row["seed"])
        row["scoliosis_label"] = int(row["scoliosis_label"])
        out.append(SampleRecord(**row))
    return out


def dataset_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "dataset"


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "runs" / cfg.run.name


def load_manifest(cfg: ExperimentConfig) -> list[SampleRecord]:
    path = dataset_dir(cfg) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: run 'generate' first")
    return manifest_from_csv(path.read_text())


def save_manifest(cfg: ExperimentConfig, records) -> None:
    (dataset_dir(cfg) / "manifest.csv").write_text(manifest_to_csv(records))


# --- generate ----------------------------------------------------------------------

def draw_seed(seed: int, draw: int) -> int:
    return int(np.random.SeedSequence([seed, draw]).generate_state(1, dtype=np.uint32)[0])


def quota_draws(cfg: ExperimentConfig):
    """Phantoms drawn in seed order until both label quotas are filled.

    Yields (params, phantom) for exactly ``n_samples`` phantoms of which
    ``round(n * scoliosis_fraction)`` are scoliotic.
    """
    n = cfg.dataset.n_samples
    want = {True: int(round(n * cfg.split.scoliosis_fraction))}
    want[False] = n - want[True]
    draw = 0
    while want[True] + want[False] > 0:
        if draw > 1000 * max(n, 1):
            raise RuntimeError("label quota not reachable with the configured ranges")
        params = sample_params(draw_seed(cfg.dataset.seed, draw), cfg.ranges)
        draw += 1
        ph = generate_phantom(params)
        if want[ph.scoliosis_label] > 0:
            want[ph.scoliosis_label] -= 1
            yield params, ph


def stratified_split(labels, cfg: ExperimentConfig) -> list[str]:
    """Each label group shuffled with its own seeded stream, then cut 80:10:10."""
    labels = np.asarray(labels, dtype=bool)
    out = [""] * len(labels)
    for g in (False, True):
        idx = np.flatnonzero(labels == g)
        rng = np.random.default_rng([cfg.dataset.seed, 2, int(g)])
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(cfg.split.train * idx.size))
        n_val = int(round(cfg.split.val * idx.size))
        for k, i in enumerate(idx):
            out[i] = "train" if k < n_train else "val" if k < n_train + n_val else "test"
    return out


def cmd_generate(cfg: ExperimentConfig) -> list[SampleRecord]:
    root = dataset_dir(cfg)
    for sub in ("phantoms", "masks", "renders", "curves"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, (params, ph) in enumerate(quota_draws(cfg)):
        sid = f"s{i:05d}"
        paths = {
            "phantom": f"phantoms/{sid}.txt",
            "mask": f"masks/{sid}.vol",
            "render": f"renders/{sid}.pgm",
            "curves": f"curves/{sid}.csv",
        }
        try:
            vol = rasterize(ph)
            (root / paths["phantom"]).write_text(formats.params_to_text(params))
            formats.save_volume(vol, root / paths["mask"])
            formats.save_pgm(render_pseudo_dxa(ph, cfg.render, vol).grid, root / paths["render"])
            curveset_from_masks(project(vol, "coronal"), project(vol, "sagittal")).save(root / paths["curves"])
        except OSError as exc:
            raise OSError(f"sample {sid}: {exc}") from exc
        records.append(SampleRecord(sid, params.seed, int(ph.scoliosis_label), "", "", **paths))
    for r, s in zip(records, stratified_split([r.scoliosis_label for r in records], cfg)):
        r.split = s
    save_manifest(cfg, records)
    (root / "config.ini").write_text(config_to_text(cfg))
    counts = {s: sum(r.split == s for r in records) for s in SPLITS}
    log.info("generated %d samples: %s", len(records), counts)
    return records


# --- align ---------------------------------------------------------------------

def alignment_pair(cfg: ExperimentConfig, rec: SampleRecord, index: int):
    """(fixed image, moving image, fixed mask, moving mask, injected transform)."""
    root = dataset_dir(cfg)
    ph = generate_phantom(formats.params_from_text((root / rec.phantom).read_text()))
    vol = formats.load_volume(root / rec.mask)
    meta = crop_meta(ph)
    fixed = formats.load_pgm(root / rec.render)
    plane = project(vol, "coronal")
    fixed_mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    r, c = meta.row_offset, meta.col_offset
    fixed_mask[r : r + N_LEVELS, c:] = plane[:, : IMAGE_SIZE - c]
    mri = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    mri[:, c:] = mri_coronal_image(vol, r)[:, : IMAGE_SIZE - c]
    a = cfg.align
    rng = np.random.default_rng([cfg.dataset.seed, 3, index])
    pert = RigidTransform2D(
        rng.uniform(-a.max_theta, a.max_theta),
        rng.uniform(-a.max_shift, a.max_shift),
        rng.uniform(-a.max_shift, a.max_shift),
    )
    moving = apply_to_image(pert, mri)
    moving_mask = transform_mask(pert, fixed_mask)
    if a.bend_amplitude > 0 and rng.uniform() < a.bend_fraction:
        moving = bend_image(moving, moving_mask, a.bend_amplitude)
        moving_mask = bend_image(moving_mask, moving_mask, a.bend_amplitude) >= 0.5
    return fixed, moving, fixed_mask, moving_mask, pert


def cmd_align(cfg: ExperimentConfig) -> list[SampleRecord]:
    records = load_manifest(cfg)
    root = dataset_dir(cfg)
    (root / "alignment").mkdir(exist_ok=True)
    rows = ["pair_id,theta,tx,ty,iou,accepted"]
    for i, rec in enumerate(records):
        fixed, moving, fmask, mmask, _ = alignment_pair(cfg, rec, i)
        rep = align_pair(fixed, moving, fmask, mmask, threshold=cfg.align.iou_threshold)
        (root / "alignment" / f"{rec.id}.txt").write_text(rep.to_text())
        c = rep.composed
        rows.append(f"{rec.id},{c.theta:.6f},{c.tx:.6f},{c.ty:.6f},{rep.mask_iou:.6f},{int(rep.accepted)}")
        rec.alignment_accepted = "1" if rep.accepted else "0"
    (root / "alignment.csv").write_text("\n".join(rows) + "\n")
    save_manifest(cfg, records)
    rejected = sum(r.alignment_accepted == "0" for r in records)
    rate = rejected / max(len(records), 1)
    print(f"alignment: {rejected}/{len(records)} pairs rejected ({100 * rate:.1f}%)")
    return records


# --- data loading --------------------------------------------------------------

def usable(records, split: str | None = None) -> list[SampleRecord]:
    return [
        r for r in records
        if (split is None or r.split == split) and r.alignment_accepted != "0"
    ]


def load_xy(cfg: ExperimentConfig, records) -> tuple[np.ndarray, np.ndarray]:
    root = dataset_dir(cfg)
    if not records:
        return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE)), np.zeros((0, N_LEVELS, 6))
    x = np.stack([formats.load_pgm(root / r.render) for r in records])
    y = np.stack([CurveSet.load(root / r.curves).values for r in records])
    return x, y


# --- train ---------------------------------------------------------------------

def stratified_folds(labels, k: int, seed: int) -> np.ndarray:
    """Fold index per sample; each label group dealt round-robin after a seeded shuffle."""
    labels = np.asarray(labels, dtype=bool)
    fold = np.zeros(labels.size, dtype=int)
    offset = 0
    for g in (False, True):
        idx = np.flatnonzero(labels == g)
        idx = idx[np.random.default_rng([seed, 4, int(g)]).permutation(idx.size)]
        fold[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    return fold


def _fit(cfg: ExperimentConfig, x, y, xv, yv, tag: str, out: Path):
    model = build_model(cfg.model, seed=cfg.train.seed)
    val = (xv, yv) if len(xv) else None
    hist = train(model, x, y, cfg.train, val=val,
                 log=lambda h: log.info("%s epoch %d loss %.4f val %.4f", tag, h.epoch, h.train_loss, h.val_loss))
    save_checkpoint(model, out / "checkpoints" / f"{tag}.ckpt")
    (out / "reports" / f"history_{tag}.csv").write_text(history_to_csv(hist))
    return model, hist


def _curve_errors(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    return {
        "coronal_mae": float(np.mean(np.abs(pred[..., :3] - gt[..., :3]))),
        "sagittal_mae": float(np.mean(np.abs(pred[..., 3:] - gt[..., 3:]))),
    }


def cmd_train(cfg: ExperimentConfig):
    records = load_manifest(cfg)
    out = run_dir(cfg)
    for sub in ("checkpoints", "reports", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_to_text(cfg))
    tr, va = usable(records, "train"), usable(records, "val")
    if not tr:
        raise ValueError("no usable training samples")
    x, y = load_xy(cfg, tr)
    xv, yv = load_xy(cfg, va)
    model, hist = _fit(cfg, x, y, xv, yv, "model", out)
    # per-level training mean: the comparison floor
    CurveSet(y.mean(axis=0)).save(out / "checkpoints" / "mean_curve.csv")
    result = {"model": model, "history": hist}

    if cfg.run.folds > 1:
        pool = tr + va
        px, py = np.concatenate([x, xv]), np.concatenate([y, yv])
        fold = stratified_folds([r.scoliosis_label for r in pool], cfg.run.folds, cfg.dataset.seed)
        rows = ["fold,n_train,n_val,coronal_mae,sagittal_mae"]
        for k in range(cfg.run.folds):
            held = fold == k
            m, _ = _fit(cfg, px[~held], py[~held], px[held], py[held], f"fold{k}", out)
            e = _curve_errors(predict(m, px[held]), py[held])
            rows.append(f"{k},{int((~held).sum())},{int(held.sum())},{e['coronal_mae']:.6f},{e['sagittal_mae']:.6f}")
        (out / "reports" / "cv.csv").write_text("\n".join(rows) + "\n")
        result["folds"] = fold

    if cfg.run.sweep_sizes:
        xt, yt = load_xy(cfg, usable(records, "test"))
        order = np.random.default_rng([cfg.dataset.seed, 5]).permutation(len(x))
        rows = ["n_train,coronal_mae,sagittal_mae,baseline_sagittal_mae"]
        for n in cfg.run.sweep_sizes:
            sel = order[: min(int(n), len(x))]
            m, _ = _fit(cfg, x[sel], y[sel], xv, yv, f"sweep{int(n)}", out)
            e = _curve_errors(predict(m, xt), yt)
            base = _curve_errors(np.broadcast_to(y[sel].mean(axis=0), yt.shape), yt)
            rows.append(f"{len(sel)},{e['coronal_mae']:.6f},{e['sagittal_mae']:.6f},{base['sagittal_mae']:.6f}")
        (out / "reports" / "sweep.csv").write_text("\n".join(rows) + "\n")
    return result


# --- eval ----------------------------------------------------------------------

def evaluate_predictions(preds, gts, volumes, model: str, voxel_size_mm: float, col_offsets=None):
    """MetricReports for the input-plane, coronal, sagittal and 3D blocks.

    ``preds``/``gts`` are lists of CurveSets; ``volumes`` the ground-truth
    VoxelMasks. The input-plane block scores the coronal curves in the
    render's column frame.
    """
    col_offsets = np.zeros(len(preds)) if col_offsets is None else np.asarray(col_offsets, float)
    blocks = {t: {"mae": [], "re": [], "iou": []} for t in TARGETS}
    iou3, dev = [], []
    for p, g, vol, off in zip(preds, gts, volumes, col_offsets):
        pv, gv = p.values, g.values
        for name, sl, shift in (("input", slice(0, 3), off), ("coronal", slice(0, 3), 0.0),
                                ("sagittal", slice(3, 6), 0.0), ("3d", slice(0, 6), 0.0)):
            b = blocks[name]
            b["mae"].append(float(np.mean(np.abs(gv[:, sl] - pv[:, sl]))))
            b["re"].append(relative_error(pv[:, sl] + shift, gv[:, sl] + shift))
        ic = iou(mask_from_lateral_curves(pv[:, 0], pv[:, 2]), mask_from_lateral_curves(gv[:, 0], gv[:, 2]))
        isg = iou(mask_from_lateral_curves(pv[:, 3], pv[:, 5]), mask_from_lateral_curves(gv[:, 3], gv[:, 5]))
        blocks["input"]["iou"].append(ic)
        blocks["coronal"]["iou"].append(ic)
        blocks["sagittal"]["iou"].append(isg)
        blocks["3d"]["iou"].append((ic + isg) / 2)
        iou3.append(iou(reconstruct_volume(p).occupancy, vol.occupancy))
        dev.append(curve_deviation_3d(centerline3d(p), centerline3d(g), voxel_size_mm)[0])
    reports = []
    for name in TARGETS:
        b = blocks[name]
        extra = {}
        if name == "3d":
            extra = dict(
                iou3d=float(np.mean(iou3)),
                deviation_voxels=float(np.mean(dev)),
                deviation_mm=float(np.mean(dev)) * voxel_size_mm,
                map_at=[float(v) for v in map_at_thresholds(iou3)],
            )
        reports.append(MetricReport.from_samples(name, model, b["mae"], b["re"], b["iou"], **extra))
    return reports


def cmd_eval(cfg: ExperimentConfig):
    records = load_manifest(cfg)
    out = run_dir(cfg)
    ckpt = out / "checkpoints" / "model.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt}: run 'train' first")
    model = load_checkpoint(ckpt)
    mean_curve = CurveSet.load(out / "checkpoints" / "mean_curve.csv")
    test = usable(records, "test")
    if not test:
        raise ValueError("test split is empty")
    root = dataset_dir(cfg)
    x, y = load_xy(cfg, test)
    vols, offs = [], []
    for r in test:
        try:
            vols.append(formats.load_volume(root / r.mask))
            ph = generate_phantom(formats.params_from_text((root / r.phantom).read_text()))
        except OSError as exc:
            raise OSError(f"sample {r.id}: {exc}") from exc
        offs.append(crop_meta(ph).col_offset)
    gts = [CurveSet(v) for v in y]
    preds = [to_curveset(v) for v in predict(model, x)]
    vs = cfg.eval.voxel_size_mm
    reports = evaluate_predictions(preds, gts, vols, "model", vs, offs)
    reports += evaluate_predictions([mean_curve] * len(gts), gts, vols, "mean-curve", vs, offs)
    rep_dir = out / "reports"
    rep_dir.mkdir(parents=True, exist_ok=True)
    (rep_dir / "metrics.csv").write_text(reports_to_csv(reports))
    (rep_dir / "metrics.txt").write_text("\n\n".join(r.text() for r in reports) + "\n")
    for r in reports:
        if r.target == "3d":
            (rep_dir / f"map_{r.model}.csv").write_text(map_to_csv(r.map_at))
    fig = out / "figures"
    fig.mkdir(exist_ok=True)
    for r, p, g, vol in list(zip(test, preds, gts, vols))[: cfg.eval.figures]:
        (fig / f"{r.id}_curves.svg").write_text(curves_overlay_svg(p, g))
        (fig / f"{r.id}_views.svg").write_text(three_view_svg(reconstruct_volume(p), vol))
    return reports


# --- reconstruct / report ------------------------------------------------------

def cmd_reconstruct(cfg: ExperimentConfig, curve_files=(), ids=()):
    """Volumes + figures from curve CSVs, or from dataset ids (predicted
    curves when the run has a checkpoint, ground truth otherwise)."""
    out = run_dir(cfg) / "reconstructions"
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(Path(f).stem, CurveSet.load(f)) for f in curve_files]
    if ids:
        records = {r.id: r for r in load_manifest(cfg)}
        ckpt = run_dir(cfg) / "checkpoints" / "model.ckpt"
        model = load_checkpoint(ckpt) if ckpt.exists() else None
        for sid in ids:
            if sid not in records:
                raise KeyError(f"unknown sample id {sid}")
            rec = records[sid]
            if model is not None:
                img = formats.load_pgm(dataset_dir(cfg) / rec.render)
                jobs.append((sid, to_curveset(predict(model, [img])[0])))
            else:
                jobs.append((sid, CurveSet.load(dataset_dir(cfg) / rec.curves)))
    written = []
    for stem, cs in jobs:
        vol = reconstruct_volume(cs)
        formats.save_volume(vol, out / f"{stem}.vol")
        (out / f"{stem}_views.svg").write_text(three_view_svg(vol))
        written.append(out / f"{stem}.vol")
    return written


def summary_text(reports, align_csv: str | None = None) -> str:
    lines = ["Curve regression on the test split", ""]
    head = f"{'target':<10}{'model':<12}{'MAE mean':>10}{'median':>9}{'sd':>8}{'RE mean':>10}{'median':>9}{'sd':>8}{'IoU':>8}"
    lines.append(head)
    for r in reports:
        lines.append(
            f"{r.target:<10}{r.model:<12}{r.mae_mean:>10.3f}{r.mae_median:>9.3f}{r.mae_sd:>8.3f}"
            f"{r.re_mean:>10.4f}{r.re_median:>9.4f}{r.re_sd:>8.4f}{r.iou2d:>8.3f}"
        )
    vol = [r for r in reports if r.target == "3d"]
    if vol:
        lines += ["", "3D reconstruction", f"{'model':<12}{'IoU':>8}{'dev vox':>10}{'dev mm':>9}"]
        for r in vol:
            lines.append(f"{r.model:<12}{r.iou3d:>8.3f}{r.deviation_voxels:>10.3f}{r.deviation_mm:>9.3f}")
        lines += ["", "Precision at 3D IoU thresholds",
                  f"{'model':<12}" + "".join(f"{t:>7.1f}" for t in np.arange(1, 10) / 10)]
        for r in vol:
            lines.append(f"{r.model:<12}" + "".join(f"{p:>7.3f}" for p in r.map_at))
    if align_csv:
        rows = list(csv.DictReader(io.StringIO(align_csv)))
        rej = sum(r["accepted"] == "0" for r in rows)
        lines += ["", f"Alignment filter: {rej}/{len(rows)} pairs rejected"]
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig) -> str:
    out = run_dir(cfg)
    metrics = out / "reports" / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"{metrics}: run 'eval' first")
    align = dataset_dir(cfg) / "alignment.csv"
    text = summary_text(reports_from_csv(metrics.read_text()), align.read_text() if align.exists() else None)
    (out / "summary.txt").write_text(text)
    return text


# --- in-memory experiment ------------------------------------------------------

def synthetic_pairs(cfg: ExperimentConfig, n: int, seed: int):
    """(images, curve targets, labels) for ``n`` quota-drawn phantoms, kept in memory."""
    sub = replace(cfg, dataset=replace(cfg.dataset, n_samples=n, seed=seed))
    x, y, lab = [], [], []
    for _, ph in quota_draws(sub):
        vol = rasterize(ph)
        x.append(render_pseudo_dxa(ph, cfg.render, vol).grid)
        y.append(curveset_from_masks(project(vol, "coronal"), project(vol, "sagittal")).values)
        lab.append(ph.scoliosis_label)
    return np.stack(x), np.stack(y), np.array(lab)


def learning_signal(cfg: ExperimentConfig, n_train: int = 500, n_test: int = 100, log_fn=None) -> dict:
    """Train on fresh phantoms and score held-out curves against the mean-curve baseline."""
    x, y, _ = synthetic_pairs(cfg, n_train, cfg.dataset.seed)
    xt, yt, _ = synthetic_pairs(cfg, n_test, cfg.dataset.seed + 1)
    model = build_model(cfg.model, seed=cfg.train.seed)
    hist = train(model, x, y, cfg.train, log=log_fn)
    pred = predict(model, xt)
    err = _curve_errors(pred, yt)
    base = _curve_errors(np.broadcast_to(y.mean(axis=0), yt.shape), yt)
    return {
        "coronal_mae": err["coronal_mae"],
        "sagittal_mae": err["sagittal_mae"],
        "baseline_coronal_mae": base["coronal_mae"],
        "baseline_sagittal_mae": base["sagittal_mae"],
        "history": hist,
    }
