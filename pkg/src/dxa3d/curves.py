"""Six-curve spine representation and mask <-> curve conversions.

A :class:`CurveSet` holds, for each of the 209 normalized levels, the coronal
triple ``x1 <= x2 <= x3`` (right bound, center, left bound) and the sagittal
triple ``y1 <= y2 <= y3`` (anterior bound, center, posterior bound), all in
1-based pixel coordinates.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import GRID_XY, N_LEVELS

COLUMNS = ("x1", "x2", "x3", "y1", "y2", "y3")


class NoSpineError(ValueError):
    pass


@dataclass
class CurveSet:
    values: np.ndarray  # (209, 6) in COLUMNS order

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_LEVELS, 6):
            raise ValueError(f"CurveSet needs shape ({N_LEVELS}, 6), got {self.values.shape}")

    @classmethod
    def from_planes(cls, coronal: np.ndarray, sagittal: np.ndarray) -> "CurveSet":
        return cls(np.concatenate([np.asarray(coronal), np.asarray(sagittal)], axis=1))

    @property
    def z(self) -> np.ndarray:
        return np.arange(1, N_LEVELS + 1, dtype=np.float64)

    @property
    def coronal(self) -> np.ndarray:
        return self.values[:, :3]

    @property
    def sagittal(self) -> np.ndarray:
        return self.values[:, 3:]

    def __getattr__(self, name):
        if name in COLUMNS:
            return self.values[:, COLUMNS.index(name)]
        raise AttributeError(name)

    def is_valid(self, width: int = GRID_XY) -> bool:
        v = self.values
        return bool(
            np.all(np.isfinite(v))
            and np.all(np.diff(v[:, :3], axis=1) >= 0)
            and np.all(np.diff(v[:, 3:], axis=1) >= 0)
            and v.min() >= 1.0
            and v.max() <= width
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(COLUMNS) + "\n")
        for row in self.values:
            buf.write(",".join(f"{v:.4f}" for v in row) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "CurveSet":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != COLUMNS:
                raise ValueError(f"{path}: unexpected header {header}")
            rows = [[float(v) for v in r] for r in reader if r]
        return cls(np.array(rows))


def _extrapolate(values: np.ndarray, occupied: np.ndarray) -> np.ndarray:
    """Fill rows outside (and gaps inside) the occupied range linearly."""
    idx = np.flatnonzero(occupied)
    rows = np.arange(values.shape[0])
    out = np.interp(rows, idx, values[idx])
    if idx.size >= 2:
        top, bot = idx[0], idx[-1]
        s_top = values[idx[1]] - values[idx[0]]
        s_bot = values[idx[-1]] - values[idx[-2]]
        # slopes per row between the two nearest occupied rows at each end
        s_top /= idx[1] - idx[0]
        s_bot /= idx[-1] - idx[-2]
        out[:top] = values[top] + s_top * (rows[:top] - top)
        out[bot + 1 :] = values[bot] + s_bot * (rows[bot + 1 :] - bot)
    return out


def curves_from_mask(mask: np.ndarray) -> np.ndarray:
    """Per-row (lo, center, hi) of a 2D binary mask, shape (rows, 3).

    lo/hi are the extreme set columns and center the mean set column, all as
    1-based coordinates. Rows without pixels are filled by linear
    extrapolation from the nearest occupied rows.
    """
    mask = np.asarray(mask, dtype=bool)
    occupied = mask.any(axis=1)
    if not occupied.any():
        raise NoSpineError("no spine")
    cols = np.arange(1, mask.shape[1] + 1, dtype=np.float64)
    count = mask.sum(axis=1)
    safe = np.maximum(count, 1)
    lo = np.where(occupied, np.argmax(mask, axis=1) + 1.0, 0.0)
    hi = np.where(occupied, mask.shape[1] - np.argmax(mask[:, ::-1], axis=1) + 0.0, 0.0)
    center = (mask * cols).sum(axis=1) / safe
    out = np.stack([_extrapolate(v, occupied) for v in (lo, center, hi)], axis=1)
    return np.sort(out, axis=1)


def occupied_range(mask: np.ndarray) -> tuple[int, int]:
    """First and last occupied row (0-based, inclusive)."""
    idx = np.flatnonzero(np.asarray(mask, dtype=bool).any(axis=1))
    if idx.size == 0:
        raise NoSpineError("no spine")
    return int(idx[0]), int(idx[-1])


def normalize_height(raw: np.ndarray, n_levels: int = N_LEVELS) -> np.ndarray:
    """Linearly resample curves of shape (n, k) (or (n,)) onto ``n_levels`` rows."""
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[0]
    if n < 2:
        raise ValueError("degenerate height range: need at least 2 rows")
    pos = np.linspace(0.0, n - 1.0, n_levels)
    src = np.arange(n, dtype=np.float64)
    if raw.ndim == 1:
        return np.interp(pos, src, raw)
    return np.stack([np.interp(pos, src, raw[:, j]) for j in range(raw.shape[1])], axis=1)


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(int)


def mask_from_lateral_curves(lo: np.ndarray, hi: np.ndarray, width: int = GRID_XY) -> np.ndarray:
    """Rows filled between rounded bounds: columns [round(lo), round(hi)] (1-based)."""
    lo_i = _round_half_up(lo)
    hi_i = _round_half_up(hi)
    cols = np.arange(1, width + 1)
    return (cols[None, :] >= lo_i[:, None]) & (cols[None, :] <= hi_i[:, None])


def curveset_from_masks(coronal: np.ndarray, sagittal: np.ndarray) -> CurveSet:
    return CurveSet.from_planes(curves_from_mask(coronal), curves_from_mask(sagittal))


def sort_triples(values: np.ndarray) -> np.ndarray:
    """Enforce the per-plane ordering invariant on a (n, 6) array."""
    v = np.asarray(values, dtype=np.float64)
    return np.concatenate([np.sort(v[:, :3], axis=1), np.sort(v[:, 3:], axis=1)], axis=1)
