"""Candidate records and the JSON Lines score-exchange format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .scanmodel import PointUm

SOURCES = ("external", "synthetic")


class AdapterError(ValueError):
    """A score-exchange file is missing, malformed or incomplete."""


@dataclass(frozen=True, slots=True)
class Candidate:
    """A proposed mitosis on one focal plane.

    ``tile`` is only set while candidates still carry the id of the tile
    that produced them (before halo de-duplication).
    """

    id: str
    x_um: float
    y_um: float
    plane_offset_um: float
    seg_score: float
    source: str = "synthetic"
    tile: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.seg_score <= 1.0:
            raise ValueError(f"seg_score out of [0, 1]: {self.seg_score}")

    @property
    def pos(self) -> PointUm:
        return PointUm(self.x_um, self.y_um)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "x_um": self.x_um,
            "y_um": self.y_um,
            "plane_um": self.plane_offset_um,
            "model": None,
            "seg": self.seg_score,
            "score": None,
        }


@dataclass(frozen=True)
class ScoreVector:
    model_ids: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.model_ids) != len(self.scores):
            raise ValueError("model_ids and scores differ in length")
        for s in self.scores:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score out of [0, 1]: {s}")


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise AdapterError(f"score file not found: {path}")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AdapterError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            _check_record(rec, f"{path}:{lineno}")
            records.append(rec)
    return records


def _check_record(rec, where):
    if not isinstance(rec, dict):
        raise AdapterError(f"{where}: record is not an object")
    for key in ("x_um", "y_um", "plane_um"):
        v = rec.get(key)
        if not isinstance(v, (int, float)) or not math.isfinite(v):
            raise AdapterError(f"{where}: field {key!r} missing or not a finite number")
    for key in ("seg", "score"):
        v = rec.get(key)
        if v is None:
            continue
        if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
            raise AdapterError(f"{where}: field {key!r} must be a number in [0, 1]")
    if rec.get("score") is not None and not isinstance(rec.get("model"), str):
        raise AdapterError(f"{where}: a record with a score needs a model name")


def write_candidates(path, cands: Iterable[Candidate]) -> None:
    with Path(path).open("w") as fh:
        for c in cands:
            fh.write(json.dumps(c.to_record(), sort_keys=True) + "\n")


def read_candidates(path, source: str = "external") -> list[Candidate]:
    out = []
    for i, rec in enumerate(read_jsonl(path)):
        seg = rec.get("seg")
        out.append(Candidate(
            id=str(rec.get("id") or f"c{i:07d}"),
            x_um=float(rec["x_um"]),
            y_um=float(rec["y_um"]),
            plane_offset_um=float(rec["plane_um"]),
            seg_score=1.0 if seg is None else float(seg),
            source=source,
        ))
    return out
