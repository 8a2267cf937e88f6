import numpy as np
import pytest
from scipy.spatial.distance import pdist

from zstack_mitosis.seeding import derive_rng, derive_seed
from zstack_mitosis.simkit import MIN_SPACING_UM, SimConfig, SpacingError, generate_slide, \
    make_slides, mode_planes, render_planes, with_overrides

SMALL = SimConfig(slide_w_um=1500.0, slide_h_um=1500.0, n_mitoses=60, n_test_slides=2, n_runs=2)


def test_derive_seed_is_path_dependent_and_stable():
    a = derive_seed(0, "slide", "test", 1)
    assert a == derive_seed(0, "slide", "test", 1)
    assert a != derive_seed(0, "slide", "test", 2)
    assert a != derive_seed(1, "slide", "test", 1)
    assert derive_seed(0, "forest", 3) != derive_seed(0, "negatives", 3)
    assert derive_rng(5, "x").integers(1 << 30) == derive_rng(5, "x").integers(1 << 30)


def test_generate_slide_deterministic():
    a, b = generate_slide(SMALL, 42), generate_slide(SMALL, 42)
    for f in ("obj_x", "obj_y", "obj_depth", "seg", "scores", "cand_x"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(generate_slide(SMALL, 43).obj_x, a.obj_x)


def test_slide_invariants():
    s = generate_slide(SMALL, 1)
    n = len(s.obj_ids)
    assert s.is_mitosis.sum() == SMALL.n_mitoses
    assert len(s.ground_truth) == SMALL.n_mitoses
    assert pdist(np.column_stack([s.obj_x, s.obj_y])).min() >= MIN_SPACING_UM
    assert np.abs(s.obj_depth).max() <= SMALL.mitosis_depth_range_um
    assert s.seg.shape == (n, 5) and s.scores.shape == (n, 5, len(SMALL.model_ids))
    assert ((s.seg >= 0) & (s.seg <= 1)).all()
    assert ((s.cand_x >= 0) & (s.cand_x <= SMALL.slide_w_um)).all()
    assert s.peak[~s.is_mitosis].max() <= 1.0
    assert s.peak[s.is_mitosis].min() >= 1.0 - SMALL.defocus.peak_spread


def test_noise_free_peak_plane_tracks_depth():
    cfg = with_overrides(SMALL, noise_sd=0.0, loc_sd_um=0.0)
    s = generate_slide(cfg, 2)
    planes = np.asarray(s.plane_offsets)
    best = planes[np.argmax(s.seg, axis=1)]
    nearest = planes[np.argmin(np.abs(planes[None, :] - s.obj_depth[:, None]), axis=1)]
    np.testing.assert_array_equal(best, nearest)


def test_single_plane_config_adds_reference_plane():
    cfg = SimConfig(slide_w_um=500, slide_h_um=500, n_mitoses=5, plane_offsets_um=(0.0,))
    assert generate_slide(cfg, 0).plane_offsets == (0.0,)
    assert mode_planes(SMALL, "single") == (0.0,)
    assert mode_planes(SMALL, "zstack") == SMALL.plane_offsets_um


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_mitoses=0)
    with pytest.raises(ValueError):
        SimConfig(slide_w_um=-1)
    with pytest.raises(ValueError):
        SimConfig(plane_offsets_um=(0.0, 0.5, 1.5))
    with pytest.raises(SpacingError):
        generate_slide(SimConfig(slide_w_um=50, slide_h_um=50, n_mitoses=100), 0)


def test_profiles():
    assert SMALL.profile("single").n_planes == 1
    assert SMALL.profile("zstack").plane_offsets_um == SMALL.plane_offsets_um


def test_with_overrides_routes_defocus_keys():
    cfg = with_overrides(SMALL, sigma_um=0.5, n_runs=3)
    assert cfg.defocus.sigma_um == 0.5 and cfg.n_runs == 3
    assert cfg.defocus.noise_sd == SMALL.defocus.noise_sd


def test_make_slides_fixed_names():
    slides = make_slides(SMALL)
    assert list(slides) == ["calib", "test00", "test01"]
    assert slides["test00"].seed == derive_seed(0, "slide", "test", 0)


def test_render_planes_peaks():
    cfg = SimConfig(slide_w_um=100, slide_h_um=100, n_mitoses=3, defocus=SMALL.defocus)
    s = generate_slide(cfg, 4)
    planes = render_planes(s)
    assert set(planes) == set(s.plane_offsets)
    img = planes[0.0]
    assert img.shape == (400, 400)
    assert img.max() <= s.seg[:, s.plane_index(0.0)].max() + 1e-12
    with pytest.raises(ValueError):
        render_planes(s, max_pixels=10)
