"""Scan profiles and physical/pixel coordinate handling.

Every cross-module coordinate is a :class:`PointUm`; pixels only appear at
the tile-store and detector boundaries.  A plane is identified by its focal
offset in micrometres, never by its index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

DEFAULT_WORKING_MPP = 0.25
SPACING_TOL = 1e-9


class InvalidGeometryError(ValueError):
    """Raised for non-finite coordinates or inconsistent scan geometry."""


@dataclass(frozen=True)
class ScanProfile:
    scanner_id: str
    native_mpp: float
    plane_offsets_um: tuple[float, ...]
    interplane_um: Optional[float] = None
    objective: str = ""

    def __post_init__(self):
        offsets = tuple(float(z) for z in self.plane_offsets_um)
        object.__setattr__(self, "plane_offsets_um", offsets)
        if not (math.isfinite(self.native_mpp) and self.native_mpp > 0):
            raise InvalidGeometryError(f"native_mpp must be positive, got {self.native_mpp}")
        if len(offsets) == 0:
            raise InvalidGeometryError("a profile needs at least one plane offset")
        if not all(math.isfinite(z) for z in offsets):
            raise InvalidGeometryError("plane offsets must be finite")
        for a, b in zip(offsets, offsets[1:]):
            if not b > a:
                raise InvalidGeometryError(f"plane offsets must be strictly increasing: {offsets}")
        if len(offsets) == 1:
            if self.interplane_um is not None:
                raise InvalidGeometryError("single-plane profiles carry no interplane distance")
            return
        if self.interplane_um is None:
            raise InvalidGeometryError("multi-plane profiles need interplane_um")
        for a, b in zip(offsets, offsets[1:]):
            if abs((b - a) - self.interplane_um) > SPACING_TOL:
                raise InvalidGeometryError(
                    f"offset step {b - a:g} differs from interplane_um {self.interplane_um:g}"
                )

    @property
    def n_planes(self) -> int:
        return len(self.plane_offsets_um)

    @property
    def is_zstack(self) -> bool:
        return self.n_planes > 1

    def has_plane(self, offset_um: float, tol: float = 1e-6) -> bool:
        return any(abs(z - offset_um) <= tol for z in self.plane_offsets_um)

    def to_dict(self) -> dict:
        return {
            "scanner_id": self.scanner_id,
            "native_mpp": self.native_mpp,
            "plane_offsets_um": list(self.plane_offsets_um),
            "interplane_um": self.interplane_um,
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanProfile":
        return cls(
            scanner_id=str(d["scanner_id"]),
            native_mpp=float(d["native_mpp"]),
            plane_offsets_um=tuple(d["plane_offsets_um"]),
            interplane_um=None if d.get("interplane_um") is None else float(d["interplane_um"]),
            objective=str(d.get("objective", "")),
        )


def zstack_offsets(n_planes: int, step_um: float) -> tuple[float, ...]:
    """Symmetric offsets around 0, e.g. 5 planes at 0.6 -> (-1.2, ..., 1.2)."""
    half = (n_planes - 1) / 2.0
    return tuple(round((i - half) * step_um, 9) for i in range(n_planes))


def _profile(name, mpp, n_planes, step, objective):
    if n_planes == 1:
        return ScanProfile(name, mpp, (0.0,), None, objective)
    return ScanProfile(name, mpp, zstack_offsets(n_planes, step), step, objective)


# Scanner settings for single-layer and 5-plane z-stack acquisition.
SCANNER_PROFILES: dict[tuple[str, str], ScanProfile] = {
    ("P480DX", "single"): _profile("P480DX", 0.121, 1, None, "41x, WI"),
    ("P480DX", "zstack"): _profile("P480DX", 0.121, 5, 0.6, "41x, WI"),
    ("GT450", "single"): _profile("GT450", 0.263, 1, None, "40x, Air"),
    ("GT450", "zstack"): _profile("GT450", 0.263, 5, 0.75, "40x, Air"),
    ("AxioScan7", "single"): _profile("AxioScan7", 0.086, 1, None, "40x, Air"),
    ("AxioScan7", "zstack"): _profile("AxioScan7", 0.086, 5, 0.6, "40x, Air"),
}


@dataclass(frozen=True)
class PointUm:
    x_um: float
    y_um: float

    def __post_init__(self):
        if not (math.isfinite(self.x_um) and math.isfinite(self.y_um)):
            raise InvalidGeometryError(f"non-finite point ({self.x_um}, {self.y_um})")

    def distance(self, other: "PointUm") -> float:
        return math.hypot(self.x_um - other.x_um, self.y_um - other.y_um)


@dataclass(frozen=True)
class PointPx:
    x_px: float
    y_px: float


@dataclass(frozen=True)
class WorkingResolution:
    mpp: float = DEFAULT_WORKING_MPP

    def __post_init__(self):
        if not (math.isfinite(self.mpp) and self.mpp > 0):
            raise InvalidGeometryError(f"mpp must be positive, got {self.mpp}")


def um_to_px(p: PointUm, res: WorkingResolution = WorkingResolution()) -> PointPx:
    if not (math.isfinite(p.x_um) and math.isfinite(p.y_um)):
        raise InvalidGeometryError("non-finite point")
    return PointPx(p.x_um / res.mpp, p.y_um / res.mpp)


def px_to_um(p: PointPx, res: WorkingResolution = WorkingResolution()) -> PointUm:
    if not (math.isfinite(p.x_px) and math.isfinite(p.y_px)):
        raise InvalidGeometryError("non-finite pixel point")
    return PointUm(p.x_px * res.mpp, p.y_px * res.mpp)


def rescale_factor(src: ScanProfile, to: WorkingResolution = WorkingResolution()) -> float:
    """Multiply native pixel coordinates by this to get working-resolution pixels."""
    return src.native_mpp / to.mpp


def check_offsets(offsets: Sequence[float]) -> tuple[float, ...]:
    """Validate a bare offset list with the same rules as :class:`ScanProfile`."""
    offsets = tuple(float(z) for z in offsets)
    step = None if len(offsets) < 2 else offsets[1] - offsets[0]
    ScanProfile("check", 1.0, offsets, step)
    return offsets
