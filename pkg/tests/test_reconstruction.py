import numpy as np
import pytest
from hypothesis import given, strategies as st

from dxa3d.curves import CurveSet, curveset_from_masks, mask_from_lateral_curves
from dxa3d.metrics import iou
from dxa3d.phantom import N_LEVELS, generate_phantom, project, rasterize, sample_params
from dxa3d.reconstruction import (
    AxialEllipse, centerline3d, cross_sections_svg, curves_overlay_svg, fit_axial_ellipse,
    reconstruct_volume, three_view_svg,
)


def constant_curves(x, y):
    return CurveSet(np.tile(np.array(list(x) + list(y), float), (N_LEVELS, 1)))


def test_symmetric_example():
    e = fit_axial_ellipse(1, constant_curves((98, 100, 102), (99, 100, 101)))
    assert (e.cx, e.cy) == (100, 100)
    assert e.axes == (2, 2, 1, 1)
    pts = e.boundary([np.pi, 0.0, -np.pi / 2, np.pi / 2])
    assert np.allclose(pts, [[98, 100], [102, 100], [100, 99], [100, 101]], atol=1e-9)


def test_off_center_example():
    e = fit_axial_ellipse(7, constant_curves((98, 99, 102), (90, 100, 110)))
    assert e.a_right == 1 and e.a_left == 3
    assert np.allclose(e.boundary([np.pi, 0.0]), [[98, 100], [102, 100]], atol=1e-9)


def test_zero_width_level_is_sagittal_segment():
    cs = constant_curves((100, 100, 100), (95, 100, 105))
    occ = reconstruct_volume(cs).occupancy[0]
    xs, ys = np.nonzero(occ)
    assert set(xs + 1) == {100}
    assert set(ys + 1) == set(range(95, 106))


def test_negative_axis_rejected():
    with pytest.raises(ValueError):
        AxialEllipse(0, 0, -1, 1, 1, 1)


@given(st.floats(5, 200), st.floats(5, 200), st.floats(0, 20), st.floats(0, 20), st.floats(0, 20), st.floats(0, 20))
def test_boundary_interpolates_four_points(cx, cy, ar, al, ba, bp):
    cs = constant_curves((cx - ar, cx, cx + al), (cy - ba, cy, cy + bp))
    e = fit_axial_ellipse(1, cs)
    v = cs.values[0]
    got = e.boundary([np.pi, 0.0, -np.pi / 2, np.pi / 2])
    want = [[v[0], cy], [v[2], cy], [cx, v[3]], [cx, v[5]]]
    assert np.allclose(got, want, atol=1e-9)
    # continuity across quadrant seams
    eps = 1e-9
    for t in (0.0, np.pi / 2, np.pi, -np.pi / 2):
        assert np.allclose(e.boundary([t - eps]), e.boundary([t + eps]), atol=1e-6)


def test_constant_curves_make_prism():
    cs = constant_curves((90, 100.3, 112), (110, 121.7, 130))
    occ = reconstruct_volume(cs).occupancy
    assert occ.sum() == N_LEVELS * occ[0].sum()
    assert occ[0].sum() > 0


@given(st.integers(0, N_LEVELS - 1), st.integers(0, 5), st.floats(0.1, 6))
def test_monotone_in_bounds(level, col, grow):
    base = np.tile([95.0, 100.0, 106.0, 118.0, 122.0, 127.0], (N_LEVELS, 1))
    bigger = base.copy()
    if col in (0, 3):
        bigger[level, col] -= grow
    elif col in (2, 5):
        bigger[level, col] += grow
    else:
        return
    a = reconstruct_volume(CurveSet(base)).occupancy.sum()
    b = reconstruct_volume(CurveSet(bigger)).occupancy.sum()
    assert b >= a


def test_centerline3d():
    cs = constant_curves((90, 100, 110), (110, 120, 130))
    c = centerline3d(cs)
    assert c.shape == (N_LEVELS, 3)
    assert np.all(c[:, 0] == 100) and np.all(c[:, 1] == 120) and np.array_equal(c[:, 2], np.arange(1, 210))


@pytest.mark.parametrize("seed", range(6))
def test_phantom_roundtrip(seed):
    ph = generate_phantom(sample_params(seed))
    vol = rasterize(ph)
    cs = curveset_from_masks(project(vol, "coronal"), project(vol, "sagittal"))
    rec = reconstruct_volume(cs)
    assert iou(rec.occupancy, vol.occupancy) >= 0.94
    c = centerline3d(cs)
    assert np.max(np.abs(c[:, 0] - ph.cx)) <= 1 and np.max(np.abs(c[:, 1] - ph.cy)) <= 1
    # projection consistency: the quadrant ellipses miss the extreme column only
    # when the center is off the voxel lattice, so the bound is rounding-limited
    cor = iou(project(rec, "coronal"), mask_from_lateral_curves(cs.x1, cs.x3))
    sag = iou(project(rec, "sagittal"), mask_from_lateral_curves(cs.y1, cs.y3))
    assert cor >= 0.95 and sag >= 0.95


def test_projection_consistency_typical():
    vals = []
    for seed in range(20):
        vol = rasterize(generate_phantom(sample_params(seed)))
        cs = curveset_from_masks(project(vol, "coronal"), project(vol, "sagittal"))
        rec = reconstruct_volume(cs)
        vals.append(iou(project(rec, "coronal"), mask_from_lateral_curves(cs.x1, cs.x3)))
        vals.append(iou(project(rec, "sagittal"), mask_from_lateral_curves(cs.y1, cs.y3)))
    assert np.median(vals) >= 0.97


def test_svg_emitters(mask0):
    cs = curveset_from_masks(project(mask0, "coronal"), project(mask0, "sagittal"))
    for text in (cross_sections_svg(cs), curves_overlay_svg(cs, cs), three_view_svg(reconstruct_volume(cs), mask0)):
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
