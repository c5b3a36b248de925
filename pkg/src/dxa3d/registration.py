"""Two-stage rigid 2D alignment and the IoU rejection filter.

Points are ``(x, z)`` pairs: ``x`` is the 1-based column coordinate and ``z``
the 1-based row coordinate. A :class:`RigidTransform2D` maps a point ``p`` to
``R(theta) (p - c) + c + t`` with ``c`` the rotation center (the image center by
default). Because rows point down, positive ``theta`` turns content clockwise
on screen.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .curves import occupied_range
from .metrics import iou

IMAGE_CENTER = (112.5, 112.5)
STAGE1_ANGLES = np.linspace(-2.0, 2.0, 10)
STAGE1_FACTOR = 4
IOU_THRESHOLD = 0.70
CONTOUR_POINTS = 64


class DegenerateCorrelationError(ValueError):
    pass


class DegenerateFitWarning(UserWarning):
    pass


def _rot(theta_deg: float) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RigidTransform2D:
    theta: float = 0.0  # degrees
    tx: float = 0.0
    ty: float = 0.0
    center: tuple[float, float] = field(default=IMAGE_CENTER)

    @classmethod
    def identity(cls, center=IMAGE_CENTER) -> "RigidTransform2D":
        return cls(0.0, 0.0, 0.0, tuple(center))

    @property
    def rotation(self) -> np.ndarray:
        return _rot(self.theta)

    def matrix(self) -> np.ndarray:
        r = self.rotation
        c = np.asarray(self.center, dtype=np.float64)
        m = np.eye(3)
        m[:2, :2] = r
        m[:2, 2] = c - r @ c + np.array([self.tx, self.ty])
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray, center=IMAGE_CENTER) -> "RigidTransform2D":
        r = m[:2, :2]
        c = np.asarray(center, dtype=np.float64)
        t = m[:2, 2] - (c - r @ c)
        theta = float(np.rad2deg(np.arctan2(r[1, 0], r[0, 0])))
        return cls(theta, float(t[0]), float(t[1]), tuple(center))

    def compose(self, first: "RigidTransform2D") -> "RigidTransform2D":
        """``self`` applied after ``first``."""
        return RigidTransform2D.from_matrix(self.matrix() @ first.matrix(), self.center)

    def inverse(self) -> "RigidTransform2D":
        return RigidTransform2D.from_matrix(np.linalg.inv(self.matrix()), self.center)

    def to_text(self, prefix: str = "") -> str:
        return (
            f"{prefix}theta={self.theta:.6f}\n{prefix}tx={self.tx:.6f}\n{prefix}ty={self.ty:.6f}\n"
        )


def apply_to_points(t: RigidTransform2D, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    c = np.asarray(t.center)
    return (pts - c) @ t.rotation.T + c + np.array([t.tx, t.ty])


def apply_to_image(t: RigidTransform2D, img: np.ndarray, order: int = 1) -> np.ndarray:
    """Resample so that ``out(T p) = img(p)``; bilinear, zero outside the frame."""
    img = np.asarray(img, dtype=np.float64)
    inv = np.linalg.inv(t.matrix())
    # out pixel (row i, col j) sits at point (x, z) = (j + 1, i + 1)
    # source point = inv @ (x, z); source index (row, col) = (z - 1, x - 1)
    a = inv[:2, :2]
    off = inv[:2, 2]
    # index-space map: [r_src, c_src] = M [r, c] + o
    m_idx = np.array([[a[1, 1], a[1, 0]], [a[0, 1], a[0, 0]]])
    o_idx = np.array([off[1] + a[1, 0] + a[1, 1] - 1.0, off[0] + a[0, 0] + a[0, 1] - 1.0])
    return ndimage.affine_transform(img, m_idx, offset=o_idx, order=order, mode="constant", cval=0.0)


def apply_transform(t: RigidTransform2D, target: np.ndarray, kind: str | None = None) -> np.ndarray:
    """Apply ``t`` to a (n, 2) point array or a 2D image.

    ``kind`` may be ``"points"`` or ``"image"``; by default arrays of shape
    (n, 2) are treated as points.
    """
    target = np.asarray(target)
    if kind is None:
        kind = "points" if target.ndim == 2 and target.shape[1] == 2 else "image"
    if kind == "points":
        return apply_to_points(t, target)
    return apply_to_image(t, target)


def transform_mask(t: RigidTransform2D, mask: np.ndarray) -> np.ndarray:
    return apply_to_image(t, np.asarray(mask, dtype=np.float64)) >= 0.5


# --- stage 1 -----------------------------------------------------------------


def _block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // factor, w // factor
    return img[: h2 * factor, : w2 * factor].reshape(h2, factor, w2, factor).mean(axis=(1, 3))


def _standardize(img: np.ndarray) -> np.ndarray:
    z = img - img.mean()
    norm = np.sqrt((z * z).sum())
    if not np.isfinite(norm) or norm <= 1e-12 * max(1.0, np.abs(img).max()):
        raise DegenerateCorrelationError("degenerate correlation")
    return z / norm


def ncc_map(fixed: np.ndarray, moving: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense normalized cross-correlation over all integer shifts.

    Returns ``(scores, lags)`` where ``scores[i, j]`` is the correlation of
    ``fixed`` with ``moving`` shifted by ``(lags[0][i], lags[1][j])`` rows/cols.
    Zero-mean, unit-norm images, zero padded; invariant to affine intensity
    rescaling with positive gain.
    """
    f = _standardize(np.asarray(fixed, dtype=np.float64))
    g = _standardize(np.asarray(moving, dtype=np.float64))
    scores = signal.correlate(f, g, mode="full", method="fft")
    row_lags = np.arange(scores.shape[0]) - (g.shape[0] - 1)
    col_lags = np.arange(scores.shape[1]) - (g.shape[1] - 1)
    return scores, (row_lags, col_lags)


@dataclass(frozen=True)
class Stage1Candidate:
    theta: float
    shift: tuple[float, float]  # (tx, tz) in full-res pixels
    score: float


def stage1_scores(fixed: np.ndarray, moving: np.ndarray, angles=STAGE1_ANGLES, factor: int = STAGE1_FACTOR):
    """Best coarse (shift, score) per sampled angle."""
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ValueError("fixed and moving images must share dimensions")
    center = ((fixed.shape[1] + 1) / 2.0, (fixed.shape[0] + 1) / 2.0)
    _standardize(fixed)
    _standardize(moving)
    f_small = _block_mean(fixed, factor)
    out = []
    for theta in angles:
        rotated = apply_to_image(RigidTransform2D(float(theta), center=center), moving)
        scores, (rl, cl) = ncc_map(f_small, _block_mean(rotated, factor))
        i, j = np.unravel_index(np.argmax(scores), scores.shape)
        out.append(Stage1Candidate(float(theta), (float(cl[j] * factor), float(rl[i] * factor)), float(scores[i, j])))
    return out


def stage1_image_align(
    fixed: np.ndarray,
    moving: np.ndarray,
    angles=STAGE1_ANGLES,
    factor: int = STAGE1_FACTOR,
    refine: bool = True,
    subpixel: bool = False,
) -> RigidTransform2D:
    """Rotation grid search with dense correlation on downsampled images.

    The winning angle's coarse translation is refined at full resolution
    within one downsampling cell, so integer shifts are recovered exactly;
    ``subpixel`` adds a parabolic fit around the full-resolution peak.
    """
    cands = stage1_scores(fixed, moving, angles, factor)
    best = max(cands, key=lambda c: c.score)
    center = ((fixed.shape[1] + 1) / 2.0, (fixed.shape[0] + 1) / 2.0)
    tx, tz = best.shift
    if refine:
        rotated = apply_to_image(RigidTransform2D(best.theta, center=center), moving)
        scores, (rl, cl) = ncc_map(fixed, rotated)
        rwin = np.abs(rl - tz) <= factor
        cwin = np.abs(cl - tx) <= factor
        sub = scores[np.ix_(rwin, cwin)]
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        tz, tx = float(rl[rwin][i]), float(cl[cwin][j])
        if subpixel:
            ii = np.flatnonzero(rwin)[i]
            jj = np.flatnonzero(cwin)[j]
            tz += _parabolic_offset(scores[ii - 1 : ii + 2, jj])
            tx += _parabolic_offset(scores[ii, jj - 1 : jj + 2])
    return RigidTransform2D(best.theta, tx, tz, center)


def _parabolic_offset(v: np.ndarray) -> float:
    """Vertex offset of the parabola through three samples around a peak."""
    if v.size != 3:
        return 0.0
    denom = v[0] - 2.0 * v[1] + v[2]
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (v[0] - v[2]) / denom, -0.5, 0.5))


def stage1_score(fixed: np.ndarray, moving: np.ndarray, t: RigidTransform2D) -> float:
    """Normalized correlation of ``fixed`` with ``moving`` mapped through ``t``."""
    f = _standardize(np.asarray(fixed, dtype=np.float64))
    g = _standardize(apply_to_image(t, moving))
    return float((f * g).sum())


# --- stage 2 -----------------------------------------------------------------


def procrustes_2d(fixed_pts: np.ndarray, moving_pts: np.ndarray):
    """Least-squares rotation R and translation t with ``R m + t ~ f``.

    Returns ``(R, t, degenerate)``.
    """
    f = np.asarray(fixed_pts, dtype=np.float64)
    m = np.asarray(moving_pts, dtype=np.float64)
    if f.shape != m.shape or f.ndim != 2 or f.shape[1] != 2:
        raise ValueError("point sets must both be (n, 2)")
    if f.shape[0] < 2:
        raise ValueError("need at least 2 point pairs")
    mf, mm = f.mean(axis=0), m.mean(axis=0)
    fc, mc = f - mf, m - mm
    scale = max(np.abs(fc).max(), np.abs(mc).max())
    if scale <= 1e-12:
        return np.eye(2), mf - mm, True
    h = mc.T @ fc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, d]) @ u.T
    return r, mf - r @ mm, False


def stage2_curve_align(fixed_pts, moving_pts, center=IMAGE_CENTER) -> RigidTransform2D:
    """Closed-form rigid fit minimizing the mean squared point distance."""
    r, t0, degenerate = procrustes_2d(fixed_pts, moving_pts)
    if degenerate:
        warnings.warn("coincident points: rotation undefined, translation only", DegenerateFitWarning)
    theta = float(np.rad2deg(np.arctan2(r[1, 0], r[0, 0])))
    c = np.asarray(center, dtype=np.float64)
    t = t0 - c + r @ c
    return RigidTransform2D(theta, float(t[0]), float(t[1]), tuple(center))


def alignment_mse(fixed_pts, moving_pts, t: RigidTransform2D) -> float:
    d = apply_to_points(t, moving_pts) - np.asarray(fixed_pts, dtype=np.float64)
    return float(np.mean(np.sum(d * d, axis=1)))


def _full_rows(mask: np.ndarray) -> tuple[int, int]:
    """First/last row at least half as wide as the median occupied row.

    Rotated masks end in partial sliver rows whose extremes are meaningless
    as correspondences.
    """
    width = mask.sum(axis=1)
    occ = np.flatnonzero(width)
    if occ.size == 0:
        return occupied_range(mask)
    full = np.flatnonzero(width >= 0.5 * np.median(width[occ]))
    return int(full[0]), int(full[-1])


def weighted_centers(mask: np.ndarray) -> np.ndarray:
    """Per-row occupancy-weighted mean column (1-based); NaN on empty rows.

    Equals the mean set column for binary masks and moves continuously for
    resampled (soft) masks.
    """
    w = np.asarray(mask, dtype=np.float64)
    mass = w.sum(axis=1)
    cols = np.arange(1, w.shape[1] + 1, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (w * cols).sum(axis=1) / mass


def contour_points(mask: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Keypoints ``(x, z)`` on the spine mid-contour at 0-based ``rows``.

    Only the center curve is used: row-indexed matching of the lateral
    bounds is biased under rotation, since a rotated bound point slides by
    ``theta * half_width`` along the curve.
    """
    centers = weighted_centers(mask)
    idx = np.arange(centers.size)
    ok = np.isfinite(centers)
    return np.stack([np.interp(rows, idx[ok], centers[ok]), rows + 1.0], axis=1)


def end_edges(mask: np.ndarray, settle: int = 3, ref_rows: int = 15) -> tuple[float, float]:
    """Sub-pixel top/bottom edge rows of a (soft) mask by mass balance.

    For the top end: ``K - sum(mass[:K]) / ref`` where ``K`` is a few rows
    past the first half-width row and ``ref`` the median row mass just below
    it. Binary masks give the integer end rows; partially covered rows of a
    resampled mask shift the estimate continuously. Slanted ends are
    averaged over their width.
    """
    w = np.asarray(mask, dtype=np.float64)
    mass = w.sum(axis=1)
    top, bottom = _full_rows(w >= 0.5)
    k = top + settle
    ref = np.median(mass[k : k + ref_rows])
    top_edge = k - mass[:k].sum() / ref
    k = bottom - settle
    ref = np.median(mass[max(k - ref_rows + 1, 0) : k + 1])
    bottom_edge = k + mass[k + 1 :].sum() / ref
    return float(top_edge), float(bottom_edge)


def _truncated_ends(mask: np.ndarray) -> tuple[bool, bool]:
    m = np.asarray(mask) > 0.5
    return bool(m[0].any()), bool(m[-1].any())


def row_offset(fixed_mask, moving_soft, moving_original) -> float:
    """Row shift taking the moving spine ends onto the fixed ones.

    Ends cut by the frame in either original mask are ignored; with no usable
    end the offset is 0.
    """
    ef = end_edges(fixed_mask)
    em = end_edges(moving_soft)
    cut_f = _truncated_ends(fixed_mask)
    cut_m = _truncated_ends(moving_original)
    d = [ef[i] - em[i] for i in range(2) if not (cut_f[i] or cut_m[i])]
    return float(np.mean(d)) if d else 0.0


def keypoint_rows(fixed_mask, moving_mask, n_points: int = CONTOUR_POINTS, dz: float = 0.0, trim: int = 3):
    """Matched rows: equally spaced fixed rows and the moving rows ``dz`` above them.

    Covers the full-width range shared by both masks once the moving mask is
    shifted down by ``dz``, less ``trim`` rows at each end where frame cuts
    leave partially covered rows.
    """
    tf, bf = _full_rows(np.asarray(fixed_mask, dtype=bool))
    tm, bm = _full_rows(np.asarray(moving_mask, dtype=bool))
    top, bottom = max(tf, tm + dz) + trim, min(bf, bm + dz) - trim
    if bottom <= top:
        raise ValueError("masks share no rows after coarse alignment")
    rows = np.linspace(top, bottom, n_points)
    return rows, rows - dz


# --- pair alignment ------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentReport:
    stage1: RigidTransform2D
    stage2: RigidTransform2D
    composed: RigidTransform2D
    mask_iou: float
    accepted: bool

    def to_text(self) -> str:
        lines = [
            self.stage1.to_text("stage1."),
            self.stage2.to_text("stage2."),
            self.composed.to_text("composed."),
            f"mask_iou={self.mask_iou:.6f}\naccepted={int(self.accepted)}\n",
        ]
        return "".join(lines)


def accept(mask_iou: float, threshold: float = IOU_THRESHOLD) -> bool:
    """Pairs are discarded only when IoU is strictly below the threshold."""
    return bool(mask_iou >= threshold)


def align_pair(
    fixed_img: np.ndarray,
    moving_img: np.ndarray,
    fixed_mask: np.ndarray,
    moving_mask: np.ndarray,
    threshold: float = IOU_THRESHOLD,
    n_points: int = CONTOUR_POINTS,
    stage2_iterations: int = 3,
) -> AlignmentReport:
    """Image-level alignment, then curve-level refinement, then the IoU filter."""
    fixed_img = np.asarray(fixed_img, dtype=np.float64)
    if not (fixed_img.shape == np.shape(moving_img) == np.shape(fixed_mask) == np.shape(moving_mask)):
        raise ValueError("inconsistent dimensions")
    s1 = stage1_image_align(fixed_img, moving_img, subpixel=True)
    s2 = RigidTransform2D.identity(s1.center)
    moving_soft = np.asarray(moving_mask, dtype=np.float64)
    # mid-curve keypoints weight the mask by image intensity: a binary mask
    # alone cannot resolve rotations below ~0.3 deg over the spine length
    moving_w = moving_soft * np.clip(np.asarray(moving_img, dtype=np.float64), 0.0, None)
    if not moving_w.any():
        moving_w = moving_soft
    for _ in range(stage2_iterations):
        current = apply_to_image(s2.compose(s1), moving_soft)
        current_w = apply_to_image(s2.compose(s1), moving_w)
        dz = row_offset(fixed_mask, current, moving_soft)
        rows_f, rows_m = keypoint_rows(fixed_mask, current >= 0.5, n_points, dz)
        step = stage2_curve_align(
            contour_points(fixed_mask, rows_f), contour_points(current_w, rows_m), s1.center
        )
        s2 = step.compose(s2)
    composed = s2.compose(s1)
    aligned = transform_mask(composed, moving_mask)
    score = iou(np.asarray(fixed_mask, dtype=bool), aligned)
    return AlignmentReport(s1, s2, composed, score, accept(score, threshold))


def bend_image(img: np.ndarray, range_mask: np.ndarray, amplitude: float) -> np.ndarray:
    """Non-rigid lateral bend: row shifts by ``amplitude * sin(pi * s)``.

    ``s`` runs 0..1 over the occupied rows of ``range_mask``, so the ends stay
    put and the middle moves by ``amplitude`` pixels.
    """
    img = np.asarray(img, dtype=np.float64)
    top, bottom = occupied_range(np.asarray(range_mask) > 0.5)
    rows = np.arange(img.shape[0], dtype=np.float64)
    s = np.clip((rows - top) / max(bottom - top, 1), 0.0, 1.0)
    shift = amplitude * np.sin(np.pi * s)
    rr, cc = np.meshgrid(rows, np.arange(img.shape[1], dtype=np.float64), indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc - shift[:, None]], order=1, mode="constant", cval=0.0)


def bend_mask(mask: np.ndarray, amplitude: float) -> np.ndarray:
    return bend_image(mask, mask, amplitude) >= 0.5


def bent_pair_iou(fixed_img, fixed_mask, amplitude: float, threshold: float = IOU_THRESHOLD) -> AlignmentReport:
    """Align a copy of the pair whose moving side is bent by ``amplitude``."""
    fixed_mask = np.asarray(fixed_mask, dtype=bool)
    moving_img = bend_image(fixed_img, fixed_mask, amplitude)
    moving_mask = bend_mask(fixed_mask, amplitude)
    return align_pair(fixed_img, moving_img, fixed_mask, moving_mask, threshold=threshold)


def calibrate_bend(fixed_img, fixed_mask, target: float = IOU_THRESHOLD, lo: float = 0.0, hi: float = 60.0,
                   iterations: int = 12) -> tuple[float, float]:
    """Bisect the bend amplitude whose post-alignment IoU crosses ``target``.

    Returns ``(a_below, a_above)``: the largest amplitude found with IoU >=
    target and the smallest with IoU < target.
    """
    if bent_pair_iou(fixed_img, fixed_mask, hi, target).mask_iou >= target:
        raise ValueError("upper amplitude does not push IoU below the target")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if bent_pair_iou(fixed_img, fixed_mask, mid, target).mask_iou >= target:
            lo = mid
        else:
            hi = mid
    return lo, hi
