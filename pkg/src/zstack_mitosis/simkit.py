"""Synthetic multi-plane slides with known ground truth.

Every object (mitosis or imposter) sits at a random depth inside the
section.  Its score on a focal plane falls off with the plane's distance to
that depth (:func:`~zstack_mitosis.detector.defocus_response`).  Mitoses
peak at ``base_detectability * (1 - peak_spread * U)`` with U uniform, so
some are faint even in focus; imposters peak at a mimicry level drawn from
``imposter_scale * Beta(2, 5)``, which stays below the segmentation
threshold on average.  Segmentation and each verification model see
independent Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.spatial import cKDTree

from .detector import DEFAULT_MODEL_IDS, DefocusParams, SyntheticDefocusDetector, defocus_response
from .evalstats import DEFAULT_CUTOFF_UM, MetricSample
from .fusion import ForestHyper
from .pipeline import ConditionSpec, SlideData, candidate_recall, process_slide, run_condition
from .scanmodel import PointUm, ScanProfile, check_offsets, zstack_offsets
from .seeding import derive_seed
from .zmerge import DEFAULT_MERGE_RADIUS_UM

if TYPE_CHECKING:
    from .registration import GlobalTransform

MIN_SPACING_UM = 10.0


class SpacingError(ValueError):
    """Requested object density cannot honour the minimum spacing."""


@dataclass(frozen=True)
class SimConfig:
    slide_w_um: float = 10_000.0
    slide_h_um: float = 10_000.0
    n_mitoses: int = 289
    mitosis_depth_range_um: float = 1.5
    defocus: DefocusParams = DefocusParams()
    plane_offsets_um: tuple[float, ...] = zstack_offsets(5, 0.6)
    n_runs: int = 20
    master_seed: int = 0
    n_test_slides: int = 3
    model_ids: tuple[str, ...] = DEFAULT_MODEL_IDS
    hyper: ForestHyper = ForestHyper()
    cutoff_um: float = DEFAULT_CUTOFF_UM
    merge_radius_um: float = DEFAULT_MERGE_RADIUS_UM
    neg_ratio: Optional[float] = None
    scanner: str = "SIM"
    pipeline: str = "synthetic"
    per_slide_samples: bool = False

    def __post_init__(self):
        if not (self.slide_w_um > 0 and self.slide_h_um > 0):
            raise ValueError("slide dimensions must be positive")
        if self.n_mitoses < 1:
            raise ValueError("n_mitoses must be >= 1")
        if self.mitosis_depth_range_um < 0:
            raise ValueError("mitosis_depth_range_um must be >= 0")
        object.__setattr__(self, "plane_offsets_um", check_offsets(self.plane_offsets_um))
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        if self.n_runs < 1 or self.n_test_slides < 1:
            raise ValueError("n_runs and n_test_slides must be >= 1")

    def profile(self, layer_mode: str) -> ScanProfile:
        if layer_mode == "single":
            return ScanProfile(self.scanner, 0.25, (0.0,))
        offs = self.plane_offsets_um
        step = None if len(offs) == 1 else offs[1] - offs[0]
        return ScanProfile(self.scanner, 0.25, offs, step)


@dataclass
class SyntheticSlide:
    slide_id: str
    width_um: float
    height_um: float
    plane_offsets: tuple[float, ...]
    model_ids: tuple[str, ...]
    params: DefocusParams
    seed: int
    obj_ids: list[str]
    obj_x: np.ndarray
    obj_y: np.ndarray
    obj_depth: np.ndarray
    is_mitosis: np.ndarray
    peak: np.ndarray          # in-focus score level per object
    seg: np.ndarray           # (n_obj, P)
    cand_x: np.ndarray        # (n_obj, P) localisation per plane
    cand_y: np.ndarray
    scores: np.ndarray        # (n_obj, P, M)
    _tree: Optional[cKDTree] = field(default=None, repr=False)

    @property
    def ground_truth(self) -> list[tuple[str, float, float]]:
        k = np.nonzero(self.is_mitosis)[0]
        return [(self.obj_ids[i], float(self.obj_x[i]), float(self.obj_y[i])) for i in k.tolist()]

    @property
    def gt_depths(self) -> np.ndarray:
        return self.obj_depth[self.is_mitosis]

    @property
    def n_imposters(self) -> int:
        return int((~self.is_mitosis).sum())

    def plane_index(self, offset_um: float) -> int:
        for i, z in enumerate(self.plane_offsets):
            if abs(z - offset_um) <= 1e-6:
                return i
        raise KeyError(f"plane {offset_um:+g} um not simulated on slide {self.slide_id}")

    def has_plane(self, offset_um: float) -> bool:
        return any(abs(z - offset_um) <= 1e-6 for z in self.plane_offsets)

    def model_index(self, model_id: str) -> int:
        try:
            return self.model_ids.index(model_id)
        except ValueError:
            raise KeyError(f"model {model_id!r} not simulated") from None

    def nearest_object(self, pos: PointUm, radius_um: float) -> Optional[int]:
        if self._tree is None:
            self._tree = cKDTree(np.column_stack([self.obj_x, self.obj_y]))
        d, k = self._tree.query((pos.x_um, pos.y_um))
        return int(k) if d <= radius_um else None

    def background_scores(self, pos: PointUm, plane_idx: int, model_cols) -> np.ndarray:
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, int(math.floor(pos.x_um)) & 0xFFFFFFFF,
                                     int(math.floor(pos.y_um)) & 0xFFFFFFFF, plane_idx])
        vals = rng.beta(1.0, 9.0, size=len(self.model_ids))
        return vals[list(model_cols)]


def _place_points(rng: np.random.Generator, n: int, w: float, h: float,
                  spacing: float) -> np.ndarray:
    """Uniform dart throwing with a minimum pairwise spacing."""
    if n == 0:
        return np.empty((0, 2))
    # hexagonal packing of discs of diameter `spacing` bounds what is reachable
    disc = math.pi * (spacing / 2.0) ** 2
    if n * disc > 0.5 * (w + spacing) * (h + spacing):
        raise SpacingError(f"{n} objects with {spacing} um spacing do not fit in {w}x{h} um")
    cell = spacing / math.sqrt(2.0)  # at most one accepted point per cell
    grid: dict[tuple[int, int], int] = {}
    pts = np.empty((n, 2))
    count = 0
    attempts = 0
    max_attempts = 50 * n + 1000
    reach = int(math.ceil(spacing / cell))
    while count < n:
        if attempts > max_attempts:
            raise SpacingError(f"placed only {count} of {n} objects at {spacing} um spacing")
        batch = rng.uniform((0.0, 0.0), (w, h), size=(max(64, n - count), 2))
        for x, y in batch.tolist():
            attempts += 1
            gx, gy = int(x // cell), int(y // cell)
            ok = True
            for dx in range(-reach, reach + 1):
                for dy in range(-reach, reach + 1):
                    j = grid.get((gx + dx, gy + dy))
                    if j is not None and (pts[j, 0] - x) ** 2 + (pts[j, 1] - y) ** 2 < spacing ** 2:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                grid[(gx, gy)] = count
                pts[count] = (x, y)
                count += 1
                if count == n:
                    break
    return pts


def generate_slide(cfg: SimConfig, seed: int, slide_id: str = "sim") -> SyntheticSlide:
    p = cfg.defocus
    rng = np.random.default_rng(seed)
    area_mm2 = cfg.slide_w_um * cfg.slide_h_um / 1e6
    n_imp = int(rng.poisson(p.imposter_rate * area_mm2)) if p.imposter_rate > 0 else 0
    n = cfg.n_mitoses + n_imp
    xy = _place_points(rng, n, cfg.slide_w_um, cfg.slide_h_um, MIN_SPACING_UM)
    is_mit = np.zeros(n, dtype=bool)
    is_mit[:cfg.n_mitoses] = True
    r = cfg.mitosis_depth_range_um
    depth = rng.uniform(-r, r, size=n)
    mit_peak = p.base_detectability * (1.0 - p.peak_spread * rng.uniform(size=n))
    imp_peak = np.minimum(1.0, p.imposter_scale * rng.beta(2.0, 5.0, size=n))
    peak = np.where(is_mit, mit_peak, imp_peak)

    planes = tuple(sorted(set(cfg.plane_offsets_um) | {0.0}))
    P, M = len(planes), len(cfg.model_ids)
    dz = np.asarray(planes)[None, :] - depth[:, None]
    mean = peak[:, None] * defocus_response(dz, p.sigma_um)
    seg = np.clip(mean + rng.normal(0.0, p.noise_sd, size=(n, P)), 0.0, 1.0)
    scores = np.clip(mean[:, :, None] + rng.normal(0.0, p.noise_sd, size=(n, P, M)), 0.0, 1.0)
    jx = rng.normal(0.0, p.loc_sd_um, size=(n, P)) if p.loc_sd_um > 0 else np.zeros((n, P))
    jy = rng.normal(0.0, p.loc_sd_um, size=(n, P)) if p.loc_sd_um > 0 else np.zeros((n, P))
    cand_x = np.clip(xy[:, [0]] + jx, 0.0, cfg.slide_w_um)
    cand_y = np.clip(xy[:, [1]] + jy, 0.0, cfg.slide_h_um)
    ids = [f"m{k:05d}" if is_mit[k] else f"i{k - cfg.n_mitoses:05d}" for k in range(n)]
    return SyntheticSlide(slide_id, cfg.slide_w_um, cfg.slide_h_um, planes, cfg.model_ids, p,
                          int(seed), ids, xy[:, 0].copy(), xy[:, 1].copy(), depth, is_mit, peak,
                          seg, cand_x, cand_y, scores)


def render_planes(slide: SyntheticSlide, mpp: float = 0.25, blob_sd_um: float = 1.5,
                  max_pixels: int = 50_000_000) -> dict[float, np.ndarray]:
    """Rasterise each plane as Gaussian blobs whose peak equals the object's seg score."""
    w_px = int(math.ceil(slide.width_um / mpp))
    h_px = int(math.ceil(slide.height_um / mpp))
    if w_px * h_px * len(slide.plane_offsets) > max_pixels:
        raise ValueError(f"rendering {w_px}x{h_px}x{len(slide.plane_offsets)} px exceeds "
                         f"{max_pixels}; use the analytic detector for large slides")
    half = int(math.ceil(4 * blob_sd_um / mpp))
    out = {}
    for p, z in enumerate(slide.plane_offsets):
        img = np.zeros((h_px, w_px))
        for k in range(len(slide.obj_ids)):
            cx, cy = slide.cand_x[k, p] / mpp, slide.cand_y[k, p] / mpp
            x0, x1 = max(0, int(cx) - half), min(w_px, int(cx) + half + 1)
            y0, y1 = max(0, int(cy) - half), min(h_px, int(cy) + half + 1)
            if x0 >= x1 or y0 >= y1:
                continue
            xs = (np.arange(x0, x1) + 0.5 - cx) * mpp
            ys = (np.arange(y0, y1) + 0.5 - cy) * mpp
            blob = slide.seg[k, p] * np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2)
                                             / (2 * blob_sd_um ** 2))
            np.maximum(img[y0:y1, x0:x1], blob, out=img[y0:y1, x0:x1])
        out[float(z)] = img
    return out


def render_store(slide: SyntheticSlide, dest, profile: Optional[ScanProfile] = None,
                 mpp: float = 0.25, tile_size_px: int = 512, tile_format: str = "raw16"):
    from .tilestore import write_store
    if profile is None:
        offs = slide.plane_offsets
        profile = ScanProfile("SIM", mpp, offs, None if len(offs) == 1 else offs[1] - offs[0])
    planes = render_planes(slide, mpp)
    scale = 255.0 if tile_format == "png8" else 65535.0
    data = {z: planes[z] * scale for z in profile.plane_offsets_um}
    return write_store(dest, slide.slide_id, profile, data, tile_size_px, tile_format, mpp)


def annotations_rows(slide: SyntheticSlide) -> list[tuple[str, float, float, str]]:
    return [(slide.slide_id, x, y, "mitosis") for _, x, y in slide.ground_truth]


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    samples: list[MetricSample]
    candidate_recall: dict[str, dict[str, float]]  # mode -> slide id -> recall
    slides: dict[str, SyntheticSlide]
    data: dict[str, dict[str, SlideData]]          # mode -> slide id -> processed slide


def make_slides(cfg: SimConfig) -> dict[str, SyntheticSlide]:
    slides = {"calib": generate_slide(cfg, derive_seed(cfg.master_seed, "slide", "calib"), "calib")}
    for i in range(cfg.n_test_slides):
        sid = f"test{i:02d}"
        slides[sid] = generate_slide(cfg, derive_seed(cfg.master_seed, "slide", "test", i), sid)
    return slides


def mode_planes(cfg: SimConfig, layer_mode: str) -> tuple[float, ...]:
    return (0.0,) if layer_mode == "single" else cfg.plane_offsets_um


def run_experiment_detailed(cfg: SimConfig, workers: int = 1) -> ExperimentResult:
    slides = make_slides(cfg)
    det = SyntheticDefocusDetector(radius_um=cfg.merge_radius_um)
    samples, recall, data = [], {}, {}
    for mode in ("single", "zstack"):
        planes = mode_planes(cfg, mode)
        data[mode] = {sid: process_slide(sid, det, s, planes, cfg.model_ids, s.ground_truth,
                                         cfg.merge_radius_um, keep_plane_candidates=True)
                      for sid, s in slides.items()}
        recall[mode] = {sid: candidate_recall(sd, cfg.cutoff_um) for sid, sd in data[mode].items()}
        spec = ConditionSpec(cfg.scanner, cfg.pipeline, mode, cfg.hyper, cfg.cutoff_um,
                             cfg.neg_ratio, per_slide=cfg.per_slide_samples)
        tests = [data[mode][sid] for sid in slides if sid != "calib"]
        samples.extend(run_condition(spec, data[mode]["calib"], tests, cfg.n_runs,
                                     cfg.master_seed, workers))
    samples.sort(key=lambda s: (s.run_index, s.layer_mode, s.slide_id, s.metric))
    return ExperimentResult(samples, recall, slides, data)


def run_experiment(cfg: SimConfig, workers: int = 1) -> list[MetricSample]:
    """Paired single-layer vs z-stack experiment on simulated slides."""
    return run_experiment_detailed(cfg, workers).samples


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    defocus_keys = set(DefocusParams.__dataclass_fields__)
    dkw = {k: kw.pop(k) for k in list(kw) if k in defocus_keys}
    if dkw:
        kw["defocus"] = replace(cfg.defocus, **dkw)
    return replace(cfg, **kw)


# --------------------------------------------------------------------------
# registration fixtures
# --------------------------------------------------------------------------

GLASS_LEVEL = 0.95


@dataclass
class RegistrationPair:
    ref: np.ndarray
    tgt: np.ndarray
    mpp: float
    truth: "GlobalTransform"
    points: list[PointUm]


def tissue_raster(size_um: float, mpp: float, seed: int) -> np.ndarray:
    """Textured tissue section on glass, a stand-in for a grey thumbnail of H&E."""
    from .registration import texture_raster
    n = int(round(size_um / mpp))
    rng = np.random.default_rng(seed)
    tex = texture_raster((n, n), int(rng.integers(2**31)))
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / n - 0.5
    # irregular section outline: an ellipse with a smooth random wobble
    ang = np.arctan2(yy, xx)
    wob = sum(rng.uniform(0.0, 0.04) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
              for k in range(2, 6))
    r = np.hypot(xx / 0.38, yy / 0.33)
    tissue = 1.0 / (1.0 + np.exp((r - 1.0 - wob) / 0.02))
    return GLASS_LEVEL * (1 - tissue) + (0.15 + 0.6 * tex) * tissue


def registration_pair(seed: int, size_um: float = 4000.0, mpp: float = 2.0,
                      max_shift_um: float = 800.0, max_rot_deg: float = 2.0,
                      scale_range: tuple[float, float] = (0.97, 1.03), n_points: int = 200,
                      noise_sd: float = 0.02) -> RegistrationPair:
    """Reference raster, a similarity-warped target with known truth, and tissue points.

    The target also gets a brightness/contrast change and independent noise.
    Points lie inside the section and map inside the target.
    """
    from .registration import GlobalTransform, warp_image
    rng = np.random.default_rng(seed)
    base = tissue_raster(size_um, mpp, int(rng.integers(2**31)))
    c = size_um / 2.0
    s = float(rng.uniform(*scale_range))
    th = float(rng.uniform(-max_rot_deg, max_rot_deg))
    ang = rng.uniform(0, 2 * np.pi)
    shift = rng.uniform(0, max_shift_um) * np.array([np.cos(ang), np.sin(ang)])
    shift = np.clip(shift, -max_shift_um, max_shift_um)
    # rotate/scale about the slide centre, then shift
    rs = GlobalTransform(s, th)
    off = np.array([c, c]) - rs.matrix @ np.array([c, c]) + shift
    truth = GlobalTransform(s, th, float(off[0]), float(off[1]))
    tgt = warp_image(base, mpp, truth, base.shape, order=3, cval=GLASS_LEVEL)
    tgt = np.where(np.isfinite(tgt), tgt, GLASS_LEVEL)
    gain, bias = rng.uniform(0.8, 1.2), rng.uniform(-0.1, 0.1)
    tgt = gain * tgt + bias + rng.normal(0.0, noise_sd, tgt.shape)
    ref = base + rng.normal(0.0, noise_sd, base.shape)
    pts: list[PointUm] = []
    margin = 0.5 * 64.0 + 16.0 + 8.0
    while len(pts) < n_points:
        x, y = rng.uniform(margin, size_um - margin, size=2)
        if base[int(y / mpp), int(x / mpp)] > 0.8:  # glass
            continue
        mx, my = truth.apply((x, y))
        if margin <= mx <= size_um - margin and margin <= my <= size_um - margin:
            pts.append(PointUm(float(x), float(y)))
    return RegistrationPair(ref, tgt, mpp, truth, pts)
