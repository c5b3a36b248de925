"""3D spine recovery from coronal + sagittal curves by stacking axial ellipses.

Each level gets a quadrant-wise ellipse: the center comes from the two
mid-curves and each of the four quarter arcs has its own semi-axis, so the
boundary passes through all four lateral points even when the center is not
the midpoint of its bounds. Ellipses are axis-aligned; axial rotation is not
observable from two projections.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import CurveSet
from .phantom import GRID_XY, N_LEVELS, VoxelMask


@dataclass(frozen=True)
class AxialEllipse:
    cx: float
    cy: float
    a_right: float  # toward x1 (smaller x)
    a_left: float   # toward x3
    b_ant: float    # toward y1 (smaller y)
    b_post: float   # toward y3

    def __post_init__(self):
        for name in ("a_right", "a_left", "b_ant", "b_post"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative semi-axis {name}={getattr(self, name)}")

    @property
    def axes(self) -> tuple[float, float, float, float]:
        return self.a_right, self.a_left, self.b_ant, self.b_post

    def boundary(self, angles) -> np.ndarray:
        """Boundary points (x, y) at polar angles; 0 points toward +x."""
        t = np.asarray(angles, dtype=np.float64)
        c, s = np.cos(t), np.sin(t)
        a = np.where(c < 0, self.a_right, self.a_left)
        b = np.where(s < 0, self.b_ant, self.b_post)
        return np.stack([self.cx + a * c, self.cy + b * s], axis=-1)

    def contains(self, x, y) -> np.ndarray:
        """Membership of points (x, y); zero-axis quadrants keep only the axis line."""
        dx = np.asarray(x, dtype=np.float64) - self.cx
        dy = np.asarray(y, dtype=np.float64) - self.cy
        a = np.where(dx < 0, self.a_right, self.a_left)
        b = np.where(dy < 0, self.b_ant, self.b_post)
        return (_ratio_sq(dx, a) + _ratio_sq(dy, b)) <= 1.0


def _ratio_sq(d: np.ndarray, axis: np.ndarray) -> np.ndarray:
    # (d/axis)^2, with 0/0 -> 0 and d/0 -> inf
    d, axis = np.broadcast_arrays(d, axis)
    out = np.full(d.shape, np.inf)
    nz = axis > 0
    out[nz] = (d[nz] / axis[nz]) ** 2
    out[~nz & (d == 0)] = 0.0
    return out


def fit_axial_ellipse(z: int, curveset: CurveSet) -> AxialEllipse:
    """Ellipse at 1-based level ``z``."""
    x1, x2, x3, y1, y2, y3 = curveset.values[z - 1]
    # clamp tiny negative rounding so ordered curves always give valid axes
    return AxialEllipse(
        x2, y2, max(x2 - x1, 0.0), max(x3 - x2, 0.0), max(y2 - y1, 0.0), max(y3 - y2, 0.0)
    )


def reconstruct_volume(curveset: CurveSet, grid: int = GRID_XY) -> VoxelMask:
    """Occupancy (Z, X, Y), tested at voxel centers (1-based coordinates)."""
    v = curveset.values
    coords = np.arange(1, grid + 1, dtype=np.float64)
    occ = np.zeros((v.shape[0], grid, grid), dtype=bool)
    for k in range(v.shape[0]):
        e = fit_axial_ellipse(k + 1, curveset)
        x0 = max(int(np.floor(e.cx - e.a_right)) - 1, 0)
        x1 = min(int(np.ceil(e.cx + e.a_left)) + 1, grid)
        y0 = max(int(np.floor(e.cy - e.b_ant)) - 1, 0)
        y1 = min(int(np.ceil(e.cy + e.b_post)) + 1, grid)
        if x1 <= x0 or y1 <= y0:
            continue
        occ[k, x0:x1, y0:y1] = e.contains(coords[x0:x1, None], coords[None, y0:y1])
    return VoxelMask(occ)


def centerline3d(curveset: CurveSet) -> np.ndarray:
    """(209, 3) points (x2, y2, z)."""
    return np.stack([curveset.x2, curveset.y2, curveset.z], axis=1)


# --- SVG figures -----------------------------------------------------------

def _polyline(pts, color, width=1.0, dash=None) -> str:
    d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'


def cross_sections_svg(curveset: CurveSet, levels=None, size: int = GRID_XY, n_arc: int = 72) -> str:
    """Axial outlines of selected levels overlaid in one (x, y) panel."""
    levels = list(levels) if levels is not None else list(range(1, N_LEVELS + 1, 26))
    t = np.linspace(0, 2 * np.pi, n_arc + 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for i, z in enumerate(levels):
        shade = int(200 * i / max(len(levels) - 1, 1))
        e = fit_axial_ellipse(z, curveset)
        parts.append(_polyline(e.boundary(t), f"rgb({shade},0,{200 - shade})"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _silhouette_paths(mask2d: np.ndarray, ox: float, color: str) -> list[str]:
    # one rect-run per row keeps the file small and exact
    out = []
    for r, row in enumerate(mask2d):
        idx = np.flatnonzero(row)
        if idx.size == 0:
            continue
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.r_[idx[0], idx[breaks + 1]]
        ends = np.r_[idx[breaks], idx[-1]]
        for s, e in zip(starts, ends):
            out.append(f'<rect x="{ox + s}" y="{r}" width="{e - s + 1}" height="1" fill="{color}"/>')
    return out


def three_view_svg(volume: VoxelMask, reference: VoxelMask | None = None) -> str:
    """Coronal, sagittal and axial silhouettes side by side.

    With ``reference`` the reference silhouette is drawn in gray underneath.
    """
    occ = volume.occupancy
    z, nx, ny = occ.shape
    views = [occ.any(axis=2), occ.any(axis=1), occ.any(axis=0)]
    refs = None
    if reference is not None:
        r = reference.occupancy
        refs = [r.any(axis=2), r.any(axis=1), r.any(axis=0)]
    width = nx + ny + ny + 20
    height = max(z, nx)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    offsets = [0, nx + 10, nx + ny + 20]
    for i, (v, ox) in enumerate(zip(views, offsets)):
        if refs is not None:
            parts += _silhouette_paths(refs[i], ox, "#bbbbbb")
        parts += _silhouette_paths(v & ~refs[i] if refs is not None else v, ox, "#c0392b")
        if refs is not None:
            parts += _silhouette_paths(v & refs[i], ox, "#2c3e50")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def curves_overlay_svg(pred: CurveSet, gt: CurveSet | None = None) -> str:
    """Coronal (left) and sagittal (right) curves; ground truth dashed."""
    w = 2 * GRID_XY + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{N_LEVELS}" viewBox="0 0 {w} {N_LEVELS}">',
             f'<rect width="{w}" height="{N_LEVELS}" fill="white"/>']
    z = pred.z - 0.5
    for cs, color, dash in ((gt, "#888888", "3,2"), (pred, "#c0392b", None)):
        if cs is None:
            continue
        for j in range(6):
            ox = 0 if j < 3 else GRID_XY + 10
            parts.append(_polyline(zip(cs.values[:, j] - 0.5 + ox, z), color, dash=dash))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
