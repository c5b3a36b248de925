"""Evaluation metrics: MAE, relative error, IoU, mAP over IoU thresholds, 3D curve deviation."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

VOXEL_SIZE_MM = 2.197
MAP_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(gt - pred)))


def relative_error(pred, gt) -> float:
    """Mean of |gt - pred| / pred; the denominator is the prediction.

    Not clamped: the value exceeds 1 whenever errors exceed predictions.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    if np.any(pred < 1e-6):
        raise ValueError("denominator underflow")
    return float(np.mean(np.abs(gt - pred) / pred))


def iou(a, b) -> float:
    """|A & B| / |A | B| for binary masks of any rank; two empty masks give 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def map_at_thresholds(ious, thresholds=MAP_THRESHOLDS) -> np.ndarray:
    """Fraction of samples with IoU >= tau, per threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("empty IoU list")
    if np.any((ious < 0) | (ious > 1)):
        raise ValueError("IoU values must lie in [0, 1]")
    return np.array([np.mean(ious >= t) for t in thresholds])


def curve_deviation_3d(pred, gt, voxel_size_mm: float = VOXEL_SIZE_MM) -> tuple[float, float]:
    """Mean Euclidean distance between index-matched 3D points, in voxels and mm."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must sample the same levels")
    vox = float(np.mean(np.linalg.norm(pred - gt, axis=1)))
    return vox, vox * voxel_size_mm


def summarize(values) -> tuple[float, float, float]:
    """(mean, median, population sd)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(np.median(v)), float(v.std())


@dataclass
class MetricReport:
    target: str
    model: str
    n: int
    mae_mean: float
    mae_median: float
    mae_sd: float
    re_mean: float
    re_median: float
    re_sd: float
    iou2d: float
    iou3d: float = float("nan")
    deviation_voxels: float = float("nan")
    deviation_mm: float = float("nan")
    map_at: list = field(default_factory=list)

    @classmethod
    def from_samples(cls, target, model, maes, res, ious2d, **extra) -> "MetricReport":
        m = summarize(maes)
        r = summarize(res)
        return cls(target, model, len(maes), *m, *r, float(np.mean(ious2d)), **extra)

    def row(self) -> dict:
        d = asdict(self)
        maps = d.pop("map_at")
        for t, p in zip(MAP_THRESHOLDS, maps or [float("nan")] * len(MAP_THRESHOLDS)):
            d[f"map@{t:.1f}"] = p
        return d

    def text(self) -> str:
        lines = [
            f"[{self.target} / {self.model}] n={self.n}",
            f"  abs error  mean={self.mae_mean:.4f} median={self.mae_median:.4f} sd={self.mae_sd:.4f}",
            f"  rel error  mean={self.re_mean:.4f} median={self.re_median:.4f} sd={self.re_sd:.4f}",
            f"  mask IoU 2D={self.iou2d:.4f} 3D={self.iou3d:.4f}",
            f"  3D curve deviation {self.deviation_voxels:.4f} voxels = {self.deviation_mm:.4f} mm",
        ]
        return "\n".join(lines)


REPORT_FIELDS = [
    "target", "model", "n",
    "mae_mean", "mae_median", "mae_sd",
    "re_mean", "re_median", "re_sd",
    "iou2d", "iou3d", "deviation_voxels", "deviation_mm",
] + [f"map@{t:.1f}" for t in MAP_THRESHOLDS]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    buf.write(",".join(REPORT_FIELDS) + "\n")
    for rep in reports:
        row = rep.row()
        buf.write(",".join(_fmt(row[k]) for k in REPORT_FIELDS) + "\n")
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        maps = [float(row[f"map@{t:.1f}"]) for t in MAP_THRESHOLDS]
        out.append(MetricReport(
            target=row["target"], model=row["model"], n=int(row["n"]),
            **{k: float(row[k]) for k in REPORT_FIELDS[3:13]},
            map_at=[] if all(np.isnan(maps)) else maps,
        ))
    return out


def map_to_csv(precisions, thresholds=MAP_THRESHOLDS) -> str:
    lines = ["threshold,precision"] + [f"{t:.1f},{p:.6f}" for t, p in zip(thresholds, precisions)]
    return "\n".join(lines) + "\n"
