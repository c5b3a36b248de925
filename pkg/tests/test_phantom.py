import numpy as np
import pytest
from hypothesis import given, strategies as st

from dxa3d.curves import curves_from_mask
from dxa3d.phantom import (
    GRID_XY, MARGIN, N_LEVELS, ParameterError, PhantomParams, PhantomRanges, RenderConfig, VoxelMask,
    crop_origin, generate_phantom, mri_coronal_image, project, rasterize, render_pseudo_dxa,
    sample_params, with_sagittal,
)

QUIET = RenderConfig(noise_sigma=0.0, ribs=False)


def test_zero_amplitudes_give_straight_centerline():
    ph = generate_phantom(PhantomParams())
    assert np.ptp(ph.cx) == 0 and np.ptp(ph.cy) == 0


def test_determinism():
    p = sample_params(11)
    a, b = generate_phantom(p), generate_phantom(p)
    assert np.array_equal(a.cx, b.cx) and np.array_equal(a.lat_radius, b.lat_radius)
    assert np.array_equal(rasterize(a).occupancy, rasterize(b).occupancy)
    assert np.array_equal(render_pseudo_dxa(a).grid, render_pseudo_dxa(b).grid)
    assert sample_params(11) == p


def test_scoliosis_rate_near_twenty_percent():
    labels = [generate_phantom(sample_params(s)).scoliosis_label for s in range(1000)]
    assert abs(np.mean(labels) - 0.2) <= 0.03


def test_invalid_params_rejected():
    with pytest.raises(ParameterError):
        generate_phantom(PhantomParams(coronal_amplitudes=(-1.0,)))
    with pytest.raises(ParameterError):
        generate_phantom(PhantomParams(coronal_amplitudes=(200.0,)))  # leaves the grid
    with pytest.raises(ParameterError):
        sample_params(0, PhantomRanges(radius_lat=(120.0, 130.0), max_attempts=5))


def test_unit_circle_counts():
    ph = generate_phantom(PhantomParams(radius_base_lat=1.0, radius_base_ap=1.0))
    counts = rasterize(ph).occupancy.sum(axis=(1, 2))
    assert set(np.unique(counts)) <= {1, 2, 3, 4, 5}


@given(st.integers(0, 10_000))
def test_rasterize_matches_bruteforce_and_margin(seed):
    ph = generate_phantom(sample_params(seed))
    occ = rasterize(ph).occupancy
    k = seed % N_LEVELS
    x = np.arange(1, GRID_XY + 1)[:, None]
    y = np.arange(1, GRID_XY + 1)[None, :]
    ref = ((x - ph.cx[k]) / ph.lat_radius[k]) ** 2 + ((y - ph.cy[k]) / ph.ap_radius[k]) ** 2 <= 1
    assert np.array_equal(occ[k], ref)
    assert not occ[:, :MARGIN].any() and not occ[:, -MARGIN:].any()
    assert not occ[:, :, :MARGIN].any() and not occ[:, :, -MARGIN:].any()
    assert occ.sum() > 0
    assert np.all(ph.lat_radius > 0) and np.all(ph.ap_radius > 0)


def test_straight_render_is_chord_length_and_z_invariant():
    ph = generate_phantom(PhantomParams(radius_base_lat=20.0, radius_base_ap=20.0))
    m = rasterize(ph)
    img = render_pseudo_dxa(ph, QUIET, m)
    r = img.crop_meta.row_offset
    spine = img.grid[r : r + N_LEVELS]
    assert np.all(spine == spine[0])
    assert np.array_equal(spine[0][img.crop_meta.col_offset:], m.occupancy[0].sum(axis=1)[: GRID_XY - img.crop_meta.col_offset])


def test_noiseless_render_equals_axis_sum(mask0, phantom0):
    img = render_pseudo_dxa(phantom0, QUIET, mask0)
    assert np.array_equal(img.grid, mri_coronal_image(mask0, img.crop_meta.row_offset))
    noisy = render_pseudo_dxa(phantom0, RenderConfig(), mask0).grid
    assert np.all(noisy >= 0) and np.all(np.isfinite(noisy))


@pytest.mark.parametrize("ribs", [False, True])
def test_depth_changes_render(ribs):
    p = sample_params(5)
    q = with_sagittal(p, [a + 6.0 for a in p.sagittal_amplitudes])
    cfg = RenderConfig(noise_sigma=0.0, ribs=ribs)
    a = render_pseudo_dxa(generate_phantom(p), cfg).grid
    b = render_pseudo_dxa(generate_phantom(q), cfg).grid
    assert np.abs(a - b).sum() > 0


def test_project_examples():
    occ = np.zeros((N_LEVELS, GRID_XY, GRID_XY), bool)
    m = VoxelMask(occ)
    assert not project(m, "coronal").any()
    occ[10, 20, 30] = True
    assert np.argwhere(project(m, "coronal")).tolist() == [[10, 20]]
    assert np.argwhere(project(m, "sagittal")).tolist() == [[10, 30]]
    with pytest.raises(ValueError):
        project(m, "axial")


def test_projection_area_bounds_slices(mask0):
    occ = mask0.occupancy
    cor = project(mask0, "coronal")
    assert cor.sum() >= max(occ[:, :, j].sum() for j in range(GRID_XY))


def test_projection_matches_analytic_bounds(phantom0, mask0):
    cur = curves_from_mask(project(mask0, "coronal"))
    assert np.all(np.abs(cur[:, 0] - (phantom0.cx - phantom0.lat_radius)) <= 1.0)
    assert np.all(np.abs(cur[:, 2] - (phantom0.cx + phantom0.lat_radius)) <= 1.0)


def test_crop_origin_centers_midpoint():
    assert crop_origin((100, 50), (308, 60), 224) == (93, -56)
