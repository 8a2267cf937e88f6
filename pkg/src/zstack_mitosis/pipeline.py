"""Slide-level pipeline shared by the simulator and the CLI.

detect on every plane -> merge across planes -> score every plane with every
model at the representative -> fuse with a forest recalibrated on one slide
-> match against ground truth.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .evalstats import (DEFAULT_CUTOFF_UM, MatchResult, MetricSample, match_detections,
                        pool_matches, precision, sensitivity)
from .fusion import (FeatureLayout, ForestHyper, ForestModel, LabeledSet, assemble_matrix,
                     recalibrate)
from .seeding import derive_rng, derive_seed
from .zmerge import DEFAULT_MERGE_RADIUS_UM, MergedCandidate, merge_candidates

log = logging.getLogger(__name__)


@dataclass
class SlideData:
    """One slide processed in one layer mode, ready for fusion."""

    slide_id: str
    merged: list[MergedCandidate]
    X: np.ndarray
    gts: list  # (id, x_um, y_um) tuples
    layout: FeatureLayout
    plane_candidates: Optional[dict] = None  # plane -> list[Candidate], kept for diagnostics


def process_slide(slide_id: str, detector, store, plane_offsets: Sequence[float],
                  model_ids: Sequence[str], gts, radius_um: float = DEFAULT_MERGE_RADIUS_UM,
                  keep_plane_candidates: bool = False) -> SlideData:
    per_plane = {float(z): detector.detect_plane(store, z) for z in plane_offsets}
    cands = [c for z in plane_offsets for c in per_plane[float(z)]]
    merged = merge_candidates(cands, radius_um)
    X = assemble_matrix(merged, detector, store, plane_offsets, model_ids)
    layout = FeatureLayout(tuple(float(z) for z in plane_offsets), tuple(model_ids))
    return SlideData(slide_id, merged, X, list(gts), layout,
                     per_plane if keep_plane_candidates else None)


def calibration_set(sd: SlideData, cutoff_um: float = DEFAULT_CUTOFF_UM,
                    neg_ratio: Optional[float] = None,
                    rng: Optional[np.random.Generator] = None) -> LabeledSet:
    """Label a calibration slide's merged candidates.

    Positives are candidates matched to ground truth.  Negatives are
    candidates farther than ``cutoff_um`` from every ground-truth point;
    unmatched candidates inside the cutoff (duplicates) are left out.
    ``neg_ratio`` caps negatives at that multiple of the positive count.
    """
    m = match_detections(sd.merged, sd.gts, cutoff_um)
    matched = {d for d, _, _ in m.pairs}
    ids = [mc.rep.id for mc in sd.merged]
    pos = np.array([i in matched for i in ids], dtype=bool)
    if sd.gts:
        from scipy.spatial import cKDTree
        gxy = np.array([(g[1], g[2]) for g in sd.gts], dtype=np.float64)
        rxy = np.array([(mc.rep.x_um, mc.rep.y_um) for mc in sd.merged]).reshape(-1, 2)
        dist, _ = cKDTree(gxy).query(rxy) if len(rxy) else (np.empty(0), None)
        neg = ~pos & (dist > cutoff_um)
    else:
        neg = ~pos
    neg_idx = np.nonzero(neg)[0]
    if neg_ratio is not None and rng is not None:
        cap = int(round(neg_ratio * pos.sum()))
        if neg_idx.size > cap:
            neg_idx = np.sort(rng.choice(neg_idx, size=cap, replace=False))
    rows = np.sort(np.concatenate([np.nonzero(pos)[0], neg_idx]))
    return LabeledSet(sd.X[rows], pos[rows].astype(np.int8), sd.layout)


def evaluate_slide(model, sd: SlideData, cutoff_um: float = DEFAULT_CUTOFF_UM) -> MatchResult:
    if len(sd.merged):
        keep = model.predict(sd.X)
        dets = [mc for mc, k in zip(sd.merged, keep) if k]
    else:
        dets = []
    return match_detections(dets, sd.gts, cutoff_um)


@dataclass(frozen=True)
class ConditionSpec:
    scanner: str
    pipeline: str
    layer_mode: str
    hyper: ForestHyper = ForestHyper()
    cutoff_um: float = DEFAULT_CUTOFF_UM
    neg_ratio: Optional[float] = None
    recalibrate_mode: str = "refit"
    per_slide: bool = False  # also emit one sample per test slide


def _run_one(args):
    spec, calib, tests, master_seed, run, base = args
    # forest and negative-sampling seeds do not depend on the layer mode, so a
    # single-plane z-stack reduces exactly to the single-layer path
    forest_seed = derive_seed(master_seed, "forest", run)
    neg_rng = derive_rng(master_seed, "negatives", run)
    calib_set = calibration_set(calib, spec.cutoff_um, spec.neg_ratio, neg_rng)
    model = recalibrate(spec.hyper, calib_set, forest_seed, mode=spec.recalibrate_mode, base=base)
    results = [evaluate_slide(model, sd, spec.cutoff_um) for sd in tests]
    scored = [("", pool_matches(results))]
    if spec.per_slide:
        scored += [(sd.slide_id, m) for sd, m in zip(tests, results)]
    return [MetricSample(spec.scanner, spec.pipeline, spec.layer_mode, run, name, float(fn(m)), sid)
            for sid, m in scored for name, fn in (("sensitivity", sensitivity),
                                                   ("precision", precision))]


def run_condition(spec: ConditionSpec, calib: SlideData, tests: Sequence[SlideData],
                  n_runs: int, master_seed: int, workers: int = 1,
                  base: Optional[ForestModel] = None) -> list[MetricSample]:
    """Repeat recalibrate -> predict -> match ``n_runs`` times for one condition.

    With ``recalibrate_mode="threshold"`` every run re-tunes the decision
    threshold of ``base`` on that run's calibration set.
    """
    if spec.recalibrate_mode not in ("refit", "threshold"):
        raise ValueError(f"unknown recalibrate_mode {spec.recalibrate_mode!r}")
    if spec.recalibrate_mode == "threshold" and base is None:
        raise ValueError("threshold recalibration needs a base model")
    jobs = [(spec, calib, list(tests), master_seed, r, base) for r in range(1, n_runs + 1)]
    if workers > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_one, jobs))
    else:
        parts = [_run_one(j) for j in jobs]
    return [s for part in parts for s in part]


def candidate_recall(sd: SlideData, cutoff_um: float = DEFAULT_CUTOFF_UM) -> float:
    """Fraction of ground truth covered by a merged candidate (before fusion)."""
    if not sd.gts:
        return float("nan")
    m = match_detections(sd.merged, sd.gts, cutoff_um)
    return m.tp / len(sd.gts)
