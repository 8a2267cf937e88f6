"""Candidate generation and patch scoring.

Three detectors share one interface (``detect_plane`` / ``score_patch``):

* :class:`ExternalScoreAdapter` reads precomputed segmentation and CNN scores
  from a JSON Lines exchange file, so any out-of-process model can be used.
* :class:`SyntheticDefocusDetector` answers analytically from a simulated
  slide (see :mod:`zstack_mitosis.simkit`).
* :class:`RasterBlobDetector` runs on a rendered tile store, tile by tile.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .candidate import AdapterError, Candidate, ScoreVector, read_jsonl
from .scanmodel import PointUm
from .tilestore import StoreHandle, plan_tiles, read_tile
from .zmerge import DEFAULT_MERGE_RADIUS_UM, dedup_in_order, strip_halo_duplicates

DEFAULT_MODEL_IDS = ("effnet_b3", "effnet_b5", "effnetv2_s", "effnetv2_m")


class DetectorError(Exception):
    pass


@dataclass(frozen=True)
class DefocusParams:
    """Knobs of the simulated defocus detector.

    ``imposter_scale`` multiplies a Beta(2, 5) draw to give each imposter its
    mimicry level; ``loc_sd_um`` is the per-plane localisation jitter.  A
    mitosis's in-focus level is ``base_detectability * (1 - peak_spread * U)``
    with ``U ~ Uniform(0, 1)``.
    """

    sigma_um: float = 1.0
    base_detectability: float = 1.0
    seg_threshold: float = 0.5
    noise_sd: float = 0.08
    imposter_rate: float = 3.0
    imposter_scale: float = 1.7
    loc_sd_um: float = 0.3
    peak_spread: float = 0.5

    def __post_init__(self):
        if not self.sigma_um > 0:
            raise ValueError("sigma_um must be > 0")
        if not 0 < self.base_detectability <= 1:
            raise ValueError("base_detectability must lie in (0, 1]")
        if not 0 < self.seg_threshold < 1:
            raise ValueError("seg_threshold must lie in (0, 1)")
        if self.noise_sd < 0 or self.imposter_rate < 0 or self.loc_sd_um < 0:
            raise ValueError("noise_sd, imposter_rate and loc_sd_um must be >= 0")
        if not 0 <= self.peak_spread < 1:
            raise ValueError("peak_spread must lie in [0, 1)")
        if not self.imposter_scale > 0:
            raise ValueError("imposter_scale must be > 0")


def defocus_response(dz_um, sigma_um: float):
    """Detectability falloff exp(-dz^2 / (2 sigma^2)); 1 in focus."""
    if not sigma_um > 0:
        raise ValueError("sigma_um must be > 0")
    dz = np.asarray(dz_um, dtype=np.float64)
    out = np.exp(-dz * dz / (2.0 * sigma_um * sigma_um))
    return float(out) if out.ndim == 0 else out


class Detector(Protocol):
    def detect_plane(self, store, plane_offset_um: float) -> list[Candidate]: ...

    def score_patch(self, store, pos: PointUm, plane_offset_um: float,
                    model_ids: Sequence[str]) -> ScoreVector: ...


def detect_plane(detector: Detector, store, plane_offset_um: float) -> list[Candidate]:
    return detector.detect_plane(store, plane_offset_um)


def score_patch(detector: Detector, store, pos: PointUm, plane_offset_um: float,
                model_ids: Sequence[str]) -> ScoreVector:
    return detector.score_patch(store, pos, plane_offset_um, model_ids)


def _plane_key(z: float) -> float:
    return round(float(z), 6)


class ExternalScoreAdapter:
    """Score lookup from a score-exchange JSONL file.

    Records: ``{"x_um", "y_um", "plane_um", "model", "seg", "score"}``; one per
    (candidate, plane, model).  Records without a model only propose candidates.
    """

    def __init__(self, path, mpp: float = 0.25, radius_um: float = DEFAULT_MERGE_RADIUS_UM):
        self.path = str(path)
        self.records = read_jsonl(path)
        self.match_tol_um = mpp  # one working-resolution pixel
        self.radius_um = radius_um
        self._lookup = None

    def detect_plane(self, store, plane_offset_um: float) -> list[Candidate]:
        key = _plane_key(plane_offset_um)
        if store is not None and hasattr(store, "has_plane") and not store.has_plane(plane_offset_um):
            raise DetectorError(f"plane {plane_offset_um:+g} um not in store")
        seen = set()
        cands = []
        for lineno, rec in enumerate(self.records, 1):
            if _plane_key(rec["plane_um"]) != key:
                continue
            xy = (rec["x_um"], rec["y_um"])
            if xy in seen:
                continue
            seen.add(xy)
            seg = rec.get("seg")
            if seg is None:
                raise AdapterError(f"{self.path}: record {lineno} proposes a candidate without 'seg'")
            cands.append(Candidate(
                id=str(rec.get("id") or f"ext_{key:+.3f}_{len(cands):06d}"),
                x_um=float(rec["x_um"]), y_um=float(rec["y_um"]),
                plane_offset_um=float(plane_offset_um), seg_score=float(seg),
                source="external",
            ))
        return dedup_in_order(cands, self.radius_um)

    def _build_lookup(self):
        groups = defaultdict(list)
        for rec in self.records:
            if rec.get("model") is None or rec.get("score") is None:
                continue
            groups[(_plane_key(rec["plane_um"]), rec["model"])].append(rec)
        self._lookup = {}
        for k, recs in groups.items():
            xy = np.array([(r["x_um"], r["y_um"]) for r in recs], dtype=np.float64)
            self._lookup[k] = (cKDTree(xy), np.array([r["score"] for r in recs]))

    def score_patch(self, store, pos: PointUm, plane_offset_um: float,
                    model_ids: Sequence[str]) -> ScoreVector:
        if self._lookup is None:
            self._build_lookup()
        out = []
        for m in model_ids:
            entry = self._lookup.get((_plane_key(plane_offset_um), m))
            hit = None
            if entry is not None:
                d, i = entry[0].query((pos.x_um, pos.y_um))
                if d <= self.match_tol_um:
                    hit = float(entry[1][i])
            if hit is None:
                raise AdapterError(
                    f"{self.path}: no score for model {m!r} on plane {plane_offset_um:+g} um "
                    f"within 1 px of ({pos.x_um:.3f}, {pos.y_um:.3f})")
            out.append(hit)
        return ScoreVector(tuple(model_ids), tuple(out))


class SyntheticDefocusDetector:
    """Analytic detector over a :class:`~zstack_mitosis.simkit.SyntheticSlide`.

    Candidates on a plane are the objects whose per-plane segmentation score
    reaches the threshold.  The ``store`` argument is the slide itself.
    """

    def __init__(self, lookup_radius_um: float = 5.0,
                 radius_um: float = DEFAULT_MERGE_RADIUS_UM):
        self.lookup_radius_um = lookup_radius_um
        self.radius_um = radius_um

    def detect_plane(self, slide, plane_offset_um: float) -> list[Candidate]:
        p = slide.plane_index(plane_offset_um)
        tau = slide.params.seg_threshold
        seg = slide.seg[:, p]
        idx = np.nonzero(seg >= tau)[0]
        xs, ys = slide.cand_x[idx, p], slide.cand_y[idx, p]
        idx = idx[np.lexsort((xs, ys))]
        z = float(slide.plane_offsets[p])
        cands = [Candidate(id=f"{slide.slide_id}:{slide.obj_ids[k]}@{z:+.2f}",
                           x_um=float(slide.cand_x[k, p]), y_um=float(slide.cand_y[k, p]),
                           plane_offset_um=z, seg_score=float(seg[k]), source="synthetic")
                 for k in idx.tolist()]
        return dedup_in_order(cands, self.radius_um)

    def score_patch(self, slide, pos: PointUm, plane_offset_um: float,
                    model_ids: Sequence[str]) -> ScoreVector:
        p = slide.plane_index(plane_offset_um)
        cols = [slide.model_index(m) for m in model_ids]
        k = slide.nearest_object(pos, self.lookup_radius_um)
        if k is None:
            vals = slide.background_scores(pos, p, cols)
        else:
            vals = slide.scores[k, p, cols]
        return ScoreVector(tuple(model_ids), tuple(float(v) for v in vals))


def _derived_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


class RasterBlobDetector:
    """Blob detector over a rendered tile store.

    Pixel values (scaled to [0, 1]) act as segmentation confidence: local
    maxima at or above the threshold become candidates.  Patch scores are the
    pixel value at the position plus per-model noise seeded by
    ``(seed, position on a 1 um grid, plane, model)``.
    """

    def __init__(self, seg_threshold: float = 0.5, noise_sd: float = 0.0, seed: int = 0,
                 tile_size_px: int = 512, halo_px: int = 64, peak_size_px: int = 5,
                 radius_um: float = DEFAULT_MERGE_RADIUS_UM):
        self.seg_threshold = seg_threshold
        self.noise_sd = noise_sd
        self.seed = seed
        self.tile_size_px = tile_size_px
        self.halo_px = halo_px
        self.peak_size_px = peak_size_px
        self.radius_um = radius_um

    @staticmethod
    def _scale(handle: StoreHandle) -> float:
        return 255.0 if handle.manifest.tile_format == "png8" else 65535.0

    def detect_tile(self, handle: StoreHandle, spec) -> list[Candidate]:
        tile = read_tile(handle, spec)
        img = tile.data.astype(np.float64) / self._scale(handle)
        if img.ndim == 3:
            img = img.mean(axis=2)
        peaks = (img == ndimage.maximum_filter(img, size=self.peak_size_px, mode="nearest"))
        peaks &= img >= self.seg_threshold
        rows, cols = np.nonzero(peaks)
        out = []
        for r, c in zip(rows.tolist(), cols.tolist()):
            # halo pixels are context only; their peaks belong to the neighbouring core
            if not spec.in_core(tile.x0_px + c, tile.y0_px + r):
                continue
            p = tile.to_um(c + 0.5, r + 0.5)
            out.append(Candidate(
                id=f"{handle.manifest.slide_id}:{tile.x0_px + c}_{tile.y0_px + r}@{spec.plane_offset_um:+.2f}",
                x_um=p.x_um, y_um=p.y_um, plane_offset_um=spec.plane_offset_um,
                seg_score=float(min(1.0, img[r, c])), source="synthetic", tile=spec.tile_id))
        return out

    def detect_plane(self, handle: StoreHandle, plane_offset_um: float) -> list[Candidate]:
        if not handle.has_plane(plane_offset_um):
            raise DetectorError(f"plane {plane_offset_um:+g} um not in store")
        specs = [s for s in plan_tiles(handle.manifest, self.tile_size_px, self.halo_px)
                 if abs(s.plane_offset_um - plane_offset_um) <= 1e-6]
        per_tile = {s.tile_id: self.detect_tile(handle, s) for s in specs}
        cands = strip_halo_duplicates(per_tile, self.radius_um)
        return sorted(cands, key=lambda c: (c.y_um, c.x_um))

    def score_patch(self, handle: StoreHandle, pos: PointUm, plane_offset_um: float,
                    model_ids: Sequence[str]) -> ScoreVector:
        if not handle.has_plane(plane_offset_um):
            raise DetectorError(f"plane {plane_offset_um:+g} um not in store")
        m = handle.manifest
        if not (0 <= pos.x_um < m.width_px * m.mpp and 0 <= pos.y_um < m.height_px * m.mpp):
            raise DetectorError(f"position ({pos.x_um}, {pos.y_um}) outside slide")
        base = handle.value_at(plane_offset_um, pos) / self._scale(handle)
        plane_idx = handle.plane_offsets.index(
            min(handle.plane_offsets, key=lambda z: abs(z - plane_offset_um)))
        out = []
        for mi, _ in enumerate(model_ids):
            noise = 0.0
            if self.noise_sd > 0:
                rng = _derived_rng(self.seed, math.floor(pos.x_um), math.floor(pos.y_um),
                                   plane_idx, mi)
                noise = rng.normal(0.0, self.noise_sd)
            out.append(float(np.clip(base + noise, 0.0, 1.0)))
        return ScoreVector(tuple(model_ids), tuple(out))
