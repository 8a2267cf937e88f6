"""On-disk multi-plane raster store and the tiling planner.

Layout::

    <store>/manifest.json
    <store>/<plane dir>/t_<col>_<row>.png    (png8)
    <store>/<plane dir>/t_<col>_<row>.raw    (raw16, little-endian uint16)

Rasters are held at working resolution; rescaling from the native scanner
resolution happens once, at ingest, with bilinear interpolation.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .scanmodel import DEFAULT_WORKING_MPP, PointUm, ScanProfile, WorkingResolution, rescale_factor

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TILE_FORMATS = {"png8": ("png", np.uint8), "raw16": ("raw", np.uint16)}
DEFAULT_TILE_SIZE = 512
DEFAULT_HALO = 64


class StoreError(Exception):
    """Missing or malformed store content."""


class BoundsError(StoreError):
    pass


@dataclass(frozen=True)
class PlaneEntry:
    z_offset_um: float
    dir: str


@dataclass(frozen=True)
class StoreManifest:
    slide_id: str
    profile: ScanProfile
    width_px: int
    height_px: int
    tile_size_px: int
    tile_format: str
    planes: tuple[PlaneEntry, ...]
    mpp: float = DEFAULT_WORKING_MPP
    checksums: Optional[Mapping[str, str]] = None

    @property
    def plane_offsets(self) -> tuple[float, ...]:
        return tuple(p.z_offset_um for p in self.planes)

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(n_cols, n_rows) of the stored tile grid."""
        return (math.ceil(self.width_px / self.tile_size_px),
                math.ceil(self.height_px / self.tile_size_px))

    def plane_dir(self, offset_um: float, tol: float = 1e-6) -> str:
        for p in self.planes:
            if abs(p.z_offset_um - offset_um) <= tol:
                return p.dir
        raise StoreError(f"plane {offset_um:+g} um not in store {self.slide_id!r}")

    def tile_name(self, col: int, row: int) -> str:
        return f"t_{col}_{row}.{TILE_FORMATS[self.tile_format][0]}"

    def to_dict(self) -> dict:
        d = {
            "slide_id": self.slide_id,
            "mpp": self.mpp,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "tile_size_px": self.tile_size_px,
            "tile_format": self.tile_format,
            "planes": [{"z_offset_um": p.z_offset_um, "dir": p.dir} for p in self.planes],
            "profile": self.profile.to_dict(),
        }
        if self.checksums:
            d["checksums"] = dict(sorted(self.checksums.items()))
        return d


def parse_manifest(d: dict) -> StoreManifest:
    problems = []

    def need(key, kind):
        if key not in d:
            problems.append(f"missing field {key!r}")
            return None
        v = d[key]
        if kind is int and not (isinstance(v, int) and not isinstance(v, bool) and v > 0):
            problems.append(f"field {key!r} must be a positive integer, got {v!r}")
            return None
        if kind is float and not (isinstance(v, (int, float)) and v > 0):
            problems.append(f"field {key!r} must be a positive number, got {v!r}")
            return None
        return v

    slide_id = need("slide_id", str)
    mpp = need("mpp", float)
    w = need("width_px", int)
    h = need("height_px", int)
    ts = need("tile_size_px", int)
    fmt = d.get("tile_format")
    if fmt not in TILE_FORMATS:
        problems.append(f"field 'tile_format' must be one of {sorted(TILE_FORMATS)}, got {fmt!r}")
    planes_raw = d.get("planes")
    planes = []
    if not isinstance(planes_raw, list) or not planes_raw:
        problems.append("field 'planes' must be a non-empty list")
    else:
        for k, p in enumerate(planes_raw):
            try:
                planes.append(PlaneEntry(float(p["z_offset_um"]), str(p["dir"])))
            except (KeyError, TypeError, ValueError):
                problems.append(f"planes[{k}] needs z_offset_um and dir")
    profile = None
    if "profile" in d:
        try:
            profile = ScanProfile.from_dict(d["profile"])
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"invalid profile: {exc}")
    elif planes:
        offsets = tuple(p.z_offset_um for p in planes)
        step = None if len(offsets) < 2 else round(offsets[1] - offsets[0], 9)
        try:
            profile = ScanProfile(str(slide_id), float(mpp or 1.0), offsets, step)
        except ValueError as exc:
            problems.append(f"invalid plane offsets: {exc}")
    if profile is not None and planes:
        if len(planes) != profile.n_planes:
            problems.append(f"plane-count mismatch: profile declares {profile.n_planes} planes, "
                            f"manifest lists {len(planes)} plane dirs")
        elif any(abs(a - b.z_offset_um) > 1e-6 for a, b in zip(profile.plane_offsets_um, planes)):
            problems.append("plane offsets differ between profile and plane list")
    if problems:
        raise StoreError("; ".join(problems))
    return StoreManifest(slide_id, profile, w, h, ts, fmt, tuple(planes), float(mpp),
                         d.get("checksums"))


def _decode(raw: bytes, fmt: str, shape) -> np.ndarray:
    if fmt == "png8":
        import io
        arr = np.asarray(Image.open(io.BytesIO(raw)))
    else:
        arr = np.frombuffer(raw, dtype="<u2")
        if arr.size != shape[0] * shape[1]:
            raise StoreError(f"raw16 tile has {arr.size} samples, expected {shape[0] * shape[1]}")
        arr = arr.reshape(shape)
    if arr.shape[:2] != tuple(shape):
        raise StoreError(f"tile shape {arr.shape[:2]} differs from expected {tuple(shape)}")
    return arr


@dataclass(frozen=True)
class TileSpec:
    """A tile to process: its full extent including halo, and its core.

    Cores of all tiles of a plane partition the slide; the halo adds context
    around the core and is clipped at slide edges.
    """

    plane_offset_um: float
    x0_px: int
    y0_px: int
    width_px: int
    height_px: int
    halo_px: int
    core_x0_px: int
    core_y0_px: int
    core_width_px: int
    core_height_px: int
    col: int = 0
    row: int = 0

    @property
    def tile_id(self) -> str:
        return f"z{self.plane_offset_um:+.3f}_c{self.col}_r{self.row}"

    def in_core(self, x_px: float, y_px: float) -> bool:
        return (self.core_x0_px <= x_px < self.core_x0_px + self.core_width_px
                and self.core_y0_px <= y_px < self.core_y0_px + self.core_height_px)


@dataclass(frozen=True)
class TileImage:
    data: np.ndarray
    x0_px: int
    y0_px: int
    mpp: float
    plane_offset_um: float

    def to_um(self, col: float, row: float) -> PointUm:
        """Tile pixel (col, row) -> slide position in um."""
        return PointUm((self.x0_px + col) * self.mpp, (self.y0_px + row) * self.mpp)


class StoreHandle:
    def __init__(self, path: Path, manifest: StoreManifest):
        self.path = Path(path)
        self.manifest = manifest
        self._read_stored = lru_cache(maxsize=256)(self._read_stored_uncached)

    @property
    def plane_offsets(self):
        return self.manifest.plane_offsets

    def has_plane(self, offset_um: float) -> bool:
        return any(abs(z - offset_um) <= 1e-6 for z in self.plane_offsets)

    def _stored_shape(self, col, row):
        m = self.manifest
        w = min(m.tile_size_px, m.width_px - col * m.tile_size_px)
        h = min(m.tile_size_px, m.height_px - row * m.tile_size_px)
        return h, w

    def _tile_path(self, offset_um, col, row) -> Path:
        return self.path / self.manifest.plane_dir(offset_um) / self.manifest.tile_name(col, row)

    def _read_stored_uncached(self, offset_um: float, col: int, row: int) -> np.ndarray:
        p = self._tile_path(offset_um, col, row)
        try:
            raw = p.read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read tile {p}: {exc}") from None
        sums = self.manifest.checksums
        if sums:
            rel = str(p.relative_to(self.path))
            want = sums.get(rel)
            if want is not None and hashlib.sha256(raw).hexdigest() != want:
                raise StoreError(f"checksum mismatch for tile {rel}")
        arr = _decode(raw, self.manifest.tile_format, self._stored_shape(col, row))
        arr.setflags(write=False)
        return arr

    def read_region(self, offset_um: float, x0: int, y0: int, w: int, h: int) -> np.ndarray:
        m = self.manifest
        if not self.has_plane(offset_um):
            raise StoreError(f"plane {offset_um:+g} um not in store {m.slide_id!r}")
        if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > m.width_px or y0 + h > m.height_px:
            raise BoundsError(f"region ({x0}, {y0}, {w}, {h}) outside "
                              f"{m.width_px}x{m.height_px} slide {m.slide_id!r}")
        ts = m.tile_size_px
        first = self._read_stored(offset_um, x0 // ts, y0 // ts)
        out = np.empty((h, w) + first.shape[2:], dtype=first.dtype)
        for row in range(y0 // ts, (y0 + h - 1) // ts + 1):
            for col in range(x0 // ts, (x0 + w - 1) // ts + 1):
                tile = self._read_stored(offset_um, col, row)
                tx0, ty0 = col * ts, row * ts
                ax0, ay0 = max(x0, tx0), max(y0, ty0)
                ax1 = min(x0 + w, tx0 + tile.shape[1])
                ay1 = min(y0 + h, ty0 + tile.shape[0])
                out[ay0 - y0:ay1 - y0, ax0 - x0:ax1 - x0] = tile[ay0 - ty0:ay1 - ty0,
                                                                 ax0 - tx0:ax1 - tx0]
        return out

    def read_plane(self, offset_um: float) -> np.ndarray:
        m = self.manifest
        return self.read_region(offset_um, 0, 0, m.width_px, m.height_px)

    def value_at(self, offset_um: float, p: PointUm) -> float:
        m = self.manifest
        col = min(max(int(p.x_um / m.mpp), 0), m.width_px - 1)
        row = min(max(int(p.y_um / m.mpp), 0), m.height_px - 1)
        return float(self.read_region(offset_um, col, row, 1, 1).ravel()[0])

    def missing_tiles(self) -> list[str]:
        m = self.manifest
        n_cols, n_rows = m.grid_shape
        missing = []
        for p in m.planes:
            for row in range(n_rows):
                for col in range(n_cols):
                    f = self.path / p.dir / m.tile_name(col, row)
                    if not f.is_file():
                        missing.append(str(f.relative_to(self.path)))
        return missing


def open_store(path, validate: bool = True) -> StoreHandle:
    path = Path(path)
    mpath = path / MANIFEST_NAME if path.is_dir() or not path.suffix else path
    root = mpath.parent
    if not mpath.is_file():
        raise StoreError(f"missing manifest: {mpath}")
    try:
        d = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"malformed manifest {mpath}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise StoreError(f"malformed manifest {mpath}: not an object")
    handle = StoreHandle(root, parse_manifest(d))
    if validate:
        missing = handle.missing_tiles()
        if missing:
            raise StoreError(f"{len(missing)} missing tile(s): " + ", ".join(missing))
    return handle


def read_tile(handle: StoreHandle, spec: TileSpec) -> TileImage:
    data = handle.read_region(spec.plane_offset_um, spec.x0_px, spec.y0_px,
                              spec.width_px, spec.height_px)
    return TileImage(data, spec.x0_px, spec.y0_px, handle.manifest.mpp, spec.plane_offset_um)


def plan_tiles(manifest: StoreManifest, tile_size_px: int = DEFAULT_TILE_SIZE,
               halo_px: int = DEFAULT_HALO) -> list[TileSpec]:
    """Cover every plane with tiles whose cores partition the slide.

    Core stride is ``tile_size - 2*halo``, so interior tiles (core plus halo on
    both sides) are exactly ``tile_size`` wide.  Order: plane by plane, each
    plane row-major.
    """
    if halo_px < 0:
        raise ValueError("halo_px must be >= 0")
    if tile_size_px <= 2 * halo_px:
        raise ValueError(f"tile size {tile_size_px} must exceed twice the halo ({halo_px})")
    w, h = manifest.width_px, manifest.height_px
    if w <= 0 or h <= 0:
        log.warning("degenerate slide %s (%dx%d): empty tile plan", manifest.slide_id, w, h)
        return []
    stride = tile_size_px - 2 * halo_px
    n_cols, n_rows = math.ceil(w / stride), math.ceil(h / stride)
    out = []
    for z in manifest.plane_offsets:
        for row in range(n_rows):
            for col in range(n_cols):
                cx0, cy0 = col * stride, row * stride
                cw, ch = min(stride, w - cx0), min(stride, h - cy0)
                x0, y0 = max(cx0 - halo_px, 0), max(cy0 - halo_px, 0)
                x1, y1 = min(cx0 + cw + halo_px, w), min(cy0 + ch + halo_px, h)
                out.append(TileSpec(z, x0, y0, x1 - x0, y1 - y0, halo_px,
                                    cx0, cy0, cw, ch, col, row))
    return out


def write_store(path, slide_id: str, profile: ScanProfile, planes: Mapping[float, np.ndarray],
                tile_size_px: int = DEFAULT_TILE_SIZE, tile_format: str = "png8",
                mpp: float = DEFAULT_WORKING_MPP, checksums: bool = False) -> StoreHandle:
    """Write working-resolution plane rasters as a tiled store (single writer)."""
    if tile_format not in TILE_FORMATS:
        raise ValueError(f"unknown tile format {tile_format!r}")
    offsets = sorted(planes)
    if len(offsets) != profile.n_planes:
        raise StoreError(f"plane-count mismatch: profile has {profile.n_planes}, got {len(offsets)}")
    if any(abs(a - b) > 1e-6 for a, b in zip(offsets, profile.plane_offsets_um)):
        raise StoreError(f"plane offsets {offsets} differ from profile {profile.plane_offsets_um}")
    ext, dtype = TILE_FORMATS[tile_format]
    shapes = {planes[z].shape[:2] for z in offsets}
    if len(shapes) != 1:
        raise StoreError(f"planes differ in shape: {sorted(shapes)}")
    h, w = shapes.pop()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries, sums = [], {}
    for k, z in enumerate(offsets):
        arr = np.asarray(planes[z])
        if arr.dtype != dtype:
            info = np.iinfo(dtype)
            arr = np.clip(np.rint(arr), info.min, info.max).astype(dtype)
        d = f"plane_{k:02d}"
        (root / d).mkdir(exist_ok=True)
        entries.append(PlaneEntry(float(z), d))
        for row in range(math.ceil(h / tile_size_px)):
            for col in range(math.ceil(w / tile_size_px)):
                tile = np.ascontiguousarray(arr[row * tile_size_px:(row + 1) * tile_size_px,
                                                col * tile_size_px:(col + 1) * tile_size_px])
                f = root / d / f"t_{col}_{row}.{ext}"
                if tile_format == "png8":
                    Image.fromarray(tile).save(f, format="PNG")
                else:
                    f.write_bytes(tile.astype("<u2").tobytes())
                if checksums:
                    sums[f"{d}/{f.name}"] = hashlib.sha256(f.read_bytes()).hexdigest()
    manifest = StoreManifest(slide_id, profile, int(w), int(h), tile_size_px, tile_format,
                             tuple(entries), float(mpp), sums or None)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return StoreHandle(root, manifest)


def rescale_plane(img: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resampling of a native-resolution raster by ``factor``."""
    img = np.asarray(img)
    if abs(factor - 1.0) < 1e-12:
        return img.copy()
    out_h = max(1, int(round(img.shape[0] * factor)))
    out_w = max(1, int(round(img.shape[1] * factor)))
    zoom = (out_h / img.shape[0], out_w / img.shape[1]) + (1,) * (img.ndim - 2)
    out = ndimage.zoom(img.astype(np.float64), zoom, order=1, mode="nearest", grid_mode=True)
    return out


def ingest(images: Mapping[float, np.ndarray], dest, slide_id: str, profile: ScanProfile,
           working: WorkingResolution = WorkingResolution(), tile_size_px: int = DEFAULT_TILE_SIZE,
           tile_format: str = "png8") -> StoreHandle:
    """Build a store from native-resolution plane images (one per plane offset)."""
    if len(images) != profile.n_planes:
        raise StoreError(f"plane-count mismatch: profile has {profile.n_planes}, got {len(images)}")
    for z in images:
        if not profile.has_plane(z):
            raise StoreError(f"image for plane {z:+g} um has no matching profile offset")
    factor = rescale_factor(profile, working)
    planes = {float(z): rescale_plane(img, factor) for z, img in images.items()}
    return write_store(dest, slide_id, profile, planes, tile_size_px, tile_format, working.mpp)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    return np.asarray(Image.open(path))
