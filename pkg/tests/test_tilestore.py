import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zstack_mitosis.scanmodel import SCANNER_PROFILES, PointUm, ScanProfile, WorkingResolution
from zstack_mitosis.tilestore import BoundsError, PlaneEntry, StoreError, StoreManifest, ingest, \
    open_store, plan_tiles, read_tile, rescale_plane, write_store

ZPROF = ScanProfile("T", 0.25, (-0.6, 0.0, 0.6), 0.6)
SPROF = ScanProfile("T", 0.25, (0.0,))


def _planes(rng, h=300, w=420, dtype=np.uint8, top=255):
    return {z: rng.integers(0, top, size=(h, w)).astype(dtype) for z in ZPROF.plane_offsets_um}


@pytest.mark.parametrize("fmt,dtype,top", [("png8", np.uint8, 255), ("raw16", np.uint16, 65535)])
def test_roundtrip(tmp_path, rng, fmt, dtype, top):
    planes = _planes(rng, dtype=dtype, top=top)
    write_store(tmp_path / "s", "s1", ZPROF, planes, tile_size_px=128, tile_format=fmt,
                checksums=True)
    h = open_store(tmp_path / "s")
    assert h.plane_offsets == (-0.6, 0.0, 0.6)
    for z, arr in planes.items():
        np.testing.assert_array_equal(h.read_plane(z), arr)
    # a region straddling four tiles
    np.testing.assert_array_equal(h.read_region(0.0, 100, 120, 60, 30),
                                  planes[0.0][120:150, 100:160])
    assert h.value_at(0.6, PointUm(1.0, 2.0)) == float(planes[0.6][8, 4])


def test_bounds_and_plane_errors(tmp_path, rng):
    write_store(tmp_path / "s", "s1", ZPROF, _planes(rng), tile_size_px=128)
    h = open_store(tmp_path / "s")
    with pytest.raises(BoundsError):
        h.read_region(0.0, 400, 0, 30, 10)
    with pytest.raises(BoundsError):
        h.read_region(0.0, -1, 0, 3, 3)
    with pytest.raises(StoreError):
        h.read_region(1.2, 0, 0, 3, 3)


def test_missing_tile_and_manifest(tmp_path, rng):
    write_store(tmp_path / "s", "s1", ZPROF, _planes(rng), tile_size_px=128)
    (tmp_path / "s" / "plane_01" / "t_1_1.png").unlink()
    with pytest.raises(StoreError, match="missing tile"):
        open_store(tmp_path / "s")
    with pytest.raises(StoreError, match="missing manifest"):
        open_store(tmp_path / "nothing")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "manifest.json").write_text("{oops")
    with pytest.raises(StoreError, match="malformed"):
        open_store(tmp_path / "bad")


def test_checksum_mismatch(tmp_path, rng):
    write_store(tmp_path / "s", "s1", SPROF, {0.0: _planes(rng)[0.0]}, tile_size_px=128,
                checksums=True)
    f = tmp_path / "s" / "plane_00" / "t_0_0.png"
    from PIL import Image
    Image.fromarray(np.zeros((128, 128), np.uint8)).save(f)
    h = open_store(tmp_path / "s")
    with pytest.raises(StoreError, match="checksum"):
        h.read_region(0.0, 0, 0, 4, 4)


def test_manifest_validation(tmp_path, rng):
    write_store(tmp_path / "s", "s1", SPROF, {0.0: _planes(rng)[0.0]}, tile_size_px=128)
    m = json.loads((tmp_path / "s" / "manifest.json").read_text())
    for key in ("slide_id", "width_px", "tile_format", "planes"):
        d = dict(m)
        del d[key]
        (tmp_path / "s" / "manifest.json").write_text(json.dumps(d))
        with pytest.raises(StoreError):
            open_store(tmp_path / "s")


def test_write_store_plane_mismatch(tmp_path, rng):
    with pytest.raises(StoreError):
        write_store(tmp_path / "s", "s1", ZPROF, {0.0: np.zeros((10, 10), np.uint8)})
    with pytest.raises(StoreError):
        write_store(tmp_path / "s", "s1", ZPROF,
                    {z: np.zeros((10, 10 + i), np.uint8) for i, z in enumerate((-0.6, 0.0, 0.6))})


@given(st.integers(1, 700), st.integers(1, 700), st.sampled_from([(64, 8), (128, 16), (100, 0)]))
def test_plan_tiles_cores_partition(w, h, ts_halo):
    ts, halo = ts_halo
    m = StoreManifest("s", SPROF, w, h, 512, "png8", (PlaneEntry(0.0, "plane_00"),), 0.25, None)
    cover = np.zeros((h, w), np.int32)
    specs = plan_tiles(m, ts, halo)
    for s in specs:
        assert s.width_px <= ts and s.height_px <= ts
        assert s.x0_px >= 0 and s.y0_px >= 0
        assert s.x0_px + s.width_px <= w and s.y0_px + s.height_px <= h
        assert s.x0_px <= s.core_x0_px and s.core_x0_px + s.core_width_px <= s.x0_px + s.width_px
        cover[s.core_y0_px:s.core_y0_px + s.core_height_px,
              s.core_x0_px:s.core_x0_px + s.core_width_px] += 1
    assert (cover == 1).all()
    assert len({s.tile_id for s in specs}) == len(specs)


def test_plan_tiles_rejects_bad_halo():
    m = StoreManifest("s", SPROF, 10, 10, 512, "png8", (PlaneEntry(0.0, "plane_00"),), 0.25, None)
    with pytest.raises(ValueError):
        plan_tiles(m, 64, 32)
    with pytest.raises(ValueError):
        plan_tiles(m, 64, -1)


def test_read_tile_matches_plane(tmp_path, rng):
    planes = _planes(rng)
    h = write_store(tmp_path / "s", "s1", ZPROF, planes, tile_size_px=128)
    for spec in plan_tiles(h.manifest, 96, 16):
        t = read_tile(h, spec)
        np.testing.assert_array_equal(
            t.data, planes[spec.plane_offset_um][spec.y0_px:spec.y0_px + spec.height_px,
                                                 spec.x0_px:spec.x0_px + spec.width_px])


def test_ingest_rescales(tmp_path):
    prof = SCANNER_PROFILES[("GT450", "single")]
    img = np.full((263, 526), 200, np.uint8)
    h = ingest({0.0: img}, tmp_path / "s", "g", prof)
    assert (h.manifest.height_px, h.manifest.width_px) == (277, 553)
    assert h.manifest.mpp == WorkingResolution().mpp
    assert (h.read_plane(0.0) == 200).all()
    with pytest.raises(StoreError):
        ingest({0.3: img}, tmp_path / "t", "g", prof)


def test_rescale_identity():
    a = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(rescale_plane(a, 1.0), a)
    assert rescale_plane(a, 2.0).shape == (6, 8)
