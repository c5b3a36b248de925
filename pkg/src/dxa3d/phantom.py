"""Parametric spine phantoms, voxel rasterization and pseudo-DXA rendering.

Coordinates are 1-based pixel/voxel-center coordinates: voxel index ``i`` has
its center at coordinate ``i + 1``. Levels ``z`` run 1..209 from top to bottom,
``x`` increases right->left in the coronal image and ``y`` increases
anterior->posterior.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

N_LEVELS = 209
GRID_XY = 224
MARGIN = 4
VOXEL_SIZE_MM = 2.197

IMAGE_SIZE = 224
SCANNER_SHAPE = (832, 320)

# One radius wobble period per vertebra (17 thoraco-lumbar levels).
VERTEBRA_COUNT = 17

# Posterior spine sits behind a fixed thoracic hub; rib circles are centered
# on the hub so the projected rib span equals the spine depth below the hub.
RIB_HUB_Y = 70.0
RIB_SWEEP = 2.0 * np.pi / 3.0
RIB_DROOP = 0.3
RIB_TILT_GAIN = 0.5

X_CENTER = (GRID_XY + 1) / 2.0
Y_BASE = 130.0

# Max lateral deviation above which a phantom is labelled scoliotic. Frozen
# from scripts/calibrate_scoliosis.py (80th percentile over 20k seeds).
SCOLIOSIS_THRESHOLD = 10.1290


class ParameterError(ValueError):
    """Phantom parameters violate the containment invariants."""


@dataclass(frozen=True)
class PhantomParams:
    coronal_amplitudes: tuple[float, ...] = (0.0,)
    coronal_phases: tuple[float, ...] = (0.0,)
    sagittal_amplitudes: tuple[float, ...] = (0.0,)
    sagittal_phases: tuple[float, ...] = (0.0,)
    lordosis_offset: float = 0.0
    radius_base_lat: float = 28.0
    radius_base_ap: float = 22.0
    radius_wobble: float = 0.0
    rib_count: int = 12
    seed: int = 0

    @property
    def num_coronal_modes(self) -> int:
        return len(self.coronal_amplitudes)

    def validate(self) -> None:
        if self.num_coronal_modes < 1:
            raise ParameterError("need at least one coronal mode")
        if len(self.coronal_phases) != self.num_coronal_modes:
            raise ParameterError("coronal amplitudes/phases length mismatch")
        if len(self.sagittal_phases) != len(self.sagittal_amplitudes):
            raise ParameterError("sagittal amplitudes/phases length mismatch")
        amps = list(self.coronal_amplitudes) + list(self.sagittal_amplitudes)
        if any(a < 0 for a in amps) or self.radius_wobble < 0:
            raise ParameterError("amplitudes must be non-negative")
        if self.radius_base_lat - self.radius_wobble <= 0 or self.radius_base_ap - self.radius_wobble <= 0:
            raise ParameterError("radii must stay positive")
        if self.rib_count < 0:
            raise ParameterError("rib_count must be >= 0")


@dataclass(frozen=True)
class PhantomRanges:
    """Sampling distribution for random phantoms."""

    coronal_scales: tuple[float, ...] = (5.0, 2.5, 1.2)
    sagittal_lo: tuple[float, ...] = (4.0, 0.0)
    sagittal_hi: tuple[float, ...] = (14.0, 5.0)
    lordosis: tuple[float, float] = (-6.0, 6.0)
    radius_lat: tuple[float, float] = (25.0, 31.0)
    radius_ap: tuple[float, float] = (20.0, 25.0)
    wobble: tuple[float, float] = (0.5, 1.5)
    rib_count: int = 12
    max_attempts: int = 100


@dataclass
class SpinePhantom:
    params: PhantomParams
    z: np.ndarray  # (209,) level coordinates 1..209
    cx: np.ndarray  # lateral centerline x(z)
    cy: np.ndarray  # sagittal centerline y(z)
    lat_radius: np.ndarray  # a(z)
    ap_radius: np.ndarray  # b(z)
    scoliosis_label: bool

    @property
    def centerline(self) -> np.ndarray:
        return np.stack([self.cx, self.cy], axis=1)


@dataclass
class VoxelMask:
    occupancy: np.ndarray  # bool (Z, X, Y)
    voxel_size_mm: float = VOXEL_SIZE_MM

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.occupancy.shape)


@dataclass(frozen=True)
class CropMeta:
    """Placement of the 224x224 crop window inside the nominal scanner frame."""

    origin_row: int
    origin_col: int
    row_offset: int  # image row (0-based) of level z=1
    col_offset: int  # image column (0-based) of voxel column 0
    scanner_shape: tuple[int, int] = SCANNER_SHAPE


@dataclass
class PseudoDxaImage:
    grid: np.ndarray  # (224, 224) float64, rows = z, cols = x
    crop_meta: CropMeta


@dataclass(frozen=True)
class RenderConfig:
    mu: float = 1.0
    ribs: bool = True
    rib_mu: float = 4.0
    rib_blur: float = 1.0
    noise_sigma: float = 0.5


def _levels() -> np.ndarray:
    return np.arange(1, N_LEVELS + 1, dtype=np.float64)


def coronal_offsets(amps, phases, z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z)
    for k, (a, p) in enumerate(zip(amps, phases), start=1):
        out += a * np.sin(np.pi * k * z / N_LEVELS + p)
    return out


def sagittal_offsets(amps, phases, z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z)
    for k, (b, p) in enumerate(zip(amps, phases), start=1):
        out += b * np.sin(2.0 * np.pi * k * z / N_LEVELS + p)
    return out


def max_lateral_deviation(cx: np.ndarray) -> float:
    return float(np.max(np.abs(cx - cx.mean())))


def _centerline(params: PhantomParams):
    z = _levels()
    dx = coronal_offsets(params.coronal_amplitudes, params.coronal_phases, z)
    # endpoints straddle the window center so the crop centering is exact
    cx = X_CENTER + dx - 0.5 * (dx[0] + dx[-1])
    cy = Y_BASE + params.lordosis_offset + sagittal_offsets(
        params.sagittal_amplitudes, params.sagittal_phases, z
    )
    wob = params.radius_wobble * np.sin(2.0 * np.pi * VERTEBRA_COUNT * z / N_LEVELS)
    return z, cx, cy, params.radius_base_lat + wob, params.radius_base_ap + wob


def _inside_margin(cx, cy, a, b) -> bool:
    lo, hi = 1.0 + MARGIN, GRID_XY - MARGIN
    return bool(
        np.all(np.isfinite(cx)) and np.all(np.isfinite(cy))
        and (cx - a).min() >= lo and (cx + a).max() <= hi
        and (cy - b).min() >= lo and (cy + b).max() <= hi
    )


def generate_phantom(params: PhantomParams, scoliosis_threshold: float = SCOLIOSIS_THRESHOLD) -> SpinePhantom:
    params.validate()
    z, cx, cy, a, b = _centerline(params)
    if not _inside_margin(cx, cy, a, b):
        raise ParameterError("spine leaves the 224x224 cross-section margin")
    return SpinePhantom(
        params=params,
        z=z,
        cx=cx,
        cy=cy,
        lat_radius=a,
        ap_radius=b,
        scoliosis_label=max_lateral_deviation(cx) > scoliosis_threshold,
    )


def sample_params(seed: int, ranges: PhantomRanges = PhantomRanges()) -> PhantomParams:
    """Draw random phantom parameters, resampling until the margin holds."""
    rng = np.random.default_rng(seed)
    for _ in range(ranges.max_attempts):
        n_cor = len(ranges.coronal_scales)
        params = PhantomParams(
            coronal_amplitudes=tuple(float(rng.exponential(s)) for s in ranges.coronal_scales),
            coronal_phases=tuple(float(p) for p in rng.uniform(0, 2 * np.pi, n_cor)),
            sagittal_amplitudes=tuple(
                float(rng.uniform(lo, hi)) for lo, hi in zip(ranges.sagittal_lo, ranges.sagittal_hi)
            ),
            sagittal_phases=tuple(float(p) for p in rng.uniform(0, 2 * np.pi, len(ranges.sagittal_lo))),
            lordosis_offset=float(rng.uniform(*ranges.lordosis)),
            radius_base_lat=float(rng.uniform(*ranges.radius_lat)),
            radius_base_ap=float(rng.uniform(*ranges.radius_ap)),
            radius_wobble=float(rng.uniform(*ranges.wobble)),
            rib_count=ranges.rib_count,
            seed=int(seed),
        )
        if _inside_margin(*_centerline(params)[1:]):
            return params
    raise ParameterError(f"no valid phantom after {ranges.max_attempts} attempts (seed={seed})")


def rasterize(phantom: SpinePhantom) -> VoxelMask:
    """Voxel (z,x,y) is set iff its center lies in the level's ellipse."""
    occ = np.zeros((N_LEVELS, GRID_XY, GRID_XY), dtype=bool)
    coords = np.arange(1, GRID_XY + 1, dtype=np.float64)
    for k in range(N_LEVELS):
        cx, cy = phantom.cx[k], phantom.cy[k]
        a, b = phantom.lat_radius[k], phantom.ap_radius[k]
        x0, x1 = max(int(np.floor(cx - a)) - 2, 0), min(int(np.ceil(cx + a)) + 1, GRID_XY)
        y0, y1 = max(int(np.floor(cy - b)) - 2, 0), min(int(np.ceil(cy + b)) + 1, GRID_XY)
        dx = (coords[x0:x1, None] - cx) / a
        dy = (coords[None, y0:y1] - cy) / b
        occ[k, x0:x1, y0:y1] = dx * dx + dy * dy <= 1.0
    return VoxelMask(occ)


def project(mask: VoxelMask, plane: str) -> np.ndarray:
    """Binary silhouette: coronal -> (Z, X), sagittal -> (Z, Y)."""
    if plane == "coronal":
        return mask.occupancy.any(axis=2)
    if plane == "sagittal":
        return mask.occupancy.any(axis=1)
    raise ValueError(f"unknown plane {plane!r}")


def crop_origin(endpoint_a, endpoint_b, window: int = IMAGE_SIZE) -> tuple[int, int]:
    """Window origin (row, col) centered on the midpoint of two (row, col) endpoints."""
    mid = (np.asarray(endpoint_a, float) + np.asarray(endpoint_b, float)) / 2.0
    origin = np.floor(mid - (window - 1) / 2.0 + 0.5).astype(int)
    return int(origin[0]), int(origin[1])


def _crop_meta(phantom: SpinePhantom) -> CropMeta:
    rng = np.random.default_rng([phantom.params.seed, 7])
    place_row = int(rng.integers(120, 480))
    place_col = int(SCANNER_SHAPE[1] // 2 - GRID_XY // 2)
    # scanner (row, col) of the centerline endpoints, 0-based
    top = (place_row, place_col + phantom.cx[0] - 1)
    bottom = (place_row + N_LEVELS - 1, place_col + phantom.cx[-1] - 1)
    r0, c0 = crop_origin(top, bottom)
    return CropMeta(origin_row=r0, origin_col=c0, row_offset=place_row - r0, col_offset=place_col - c0)


def _rib_layer(phantom: SpinePhantom, cfg: RenderConfig, meta: CropMeta) -> np.ndarray:
    layer = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    n = phantom.params.rib_count
    if n == 0:
        return layer
    slope = np.gradient(phantom.cy, phantom.z)
    z_att = 1.0 + (np.arange(n) + 0.5) * (N_LEVELS - 1) / n
    for zk in z_att:
        cx = np.interp(zk, phantom.z, phantom.cx)
        cy = np.interp(zk, phantom.z, phantom.cy)
        radius = max(cy - RIB_HUB_Y, 5.0)
        tilt = np.tan(RIB_DROOP + RIB_TILT_GAIN * np.arctan(np.interp(zk, phantom.z, slope)))
        n_pts = int(np.ceil(radius * RIB_SWEEP * 4))
        phi = np.linspace(0.0, RIB_SWEEP, n_pts)
        step = radius * RIB_SWEEP / (n_pts - 1)
        rows = zk - 1 + meta.row_offset + radius * (1 - np.cos(phi)) * tilt
        for side in (-1.0, 1.0):
            cols = cx - 1 + meta.col_offset + side * radius * np.sin(phi)
            _splat(layer, rows, cols, cfg.rib_mu * step)
    if cfg.rib_blur > 0:
        layer = ndimage.gaussian_filter(layer, cfg.rib_blur, mode="constant")
    return layer


def _splat(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, w: float) -> None:
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr, fc = rows - r0, cols - c0
    h, wd = img.shape
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (1, 0, fr * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < wd)
        np.add.at(img, (rr[ok], cc[ok]), w * wt[ok])


def render_pseudo_dxa(
    phantom: SpinePhantom,
    cfg: RenderConfig = RenderConfig(),
    mask: VoxelMask | None = None,
) -> PseudoDxaImage:
    """Coronal attenuation image: line integral through the spine plus rib arcs."""
    if mask is None:
        mask = rasterize(phantom)
    meta = _crop_meta(phantom)
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    column_sum = cfg.mu * mask.occupancy.sum(axis=2, dtype=np.float64)
    r, c = meta.row_offset, meta.col_offset
    img[r : r + N_LEVELS, c : c + GRID_XY] = column_sum[:, : IMAGE_SIZE - c]
    if cfg.ribs:
        img += _rib_layer(phantom, cfg, meta)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng([phantom.params.seed, 1])
        img += rng.normal(0.0, cfg.noise_sigma, img.shape)
        np.clip(img, 0.0, None, out=img)
    return PseudoDxaImage(grid=img, crop_meta=meta)


def mri_coronal_image(mask: VoxelMask, row_offset: int = (IMAGE_SIZE - N_LEVELS) // 2) -> np.ndarray:
    """Coronal projection of the MRI volume in the 224x224 crop frame (no ribs, no noise)."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    img[row_offset : row_offset + N_LEVELS] = mask.occupancy.sum(axis=2, dtype=np.float64)
    return img


def embed_levels(plane_mask: np.ndarray, row_offset: int = (IMAGE_SIZE - N_LEVELS) // 2) -> np.ndarray:
    """Place a (209, 224) plane into the 224x224 image frame."""
    out = np.zeros((IMAGE_SIZE, plane_mask.shape[1]), dtype=plane_mask.dtype)
    out[row_offset : row_offset + plane_mask.shape[0]] = plane_mask
    return out


def with_sagittal(params: PhantomParams, amplitudes, phases=None) -> PhantomParams:
    """Copy of ``params`` with a different sagittal profile."""
    phases = params.sagittal_phases if phases is None else phases
    return replace(params, sagittal_amplitudes=tuple(amplitudes), sagittal_phases=tuple(phases))


def crop_meta(phantom: SpinePhantom) -> CropMeta:
    """Placement of the render window for ``phantom`` (as used by render_pseudo_dxa)."""
    return _crop_meta(phantom)
