"""Command-line entry point.

Every subcommand reads the same structured config (JSON or YAML), with
precedence flags > config file > built-in defaults.  The config path comes
from ``--config`` or the ``ZSTACK_MITOSIS_CONFIG`` environment variable.
Each command writes its outputs plus a run-manifest (resolved config, its
hash, seeds, package versions and output checksums, no timestamps), so a
run can be repeated from the manifest alone: pass it back as ``--config``.

On failure a one-line JSON error goes to stderr and the exit status is
non-zero (2 for invalid configuration, 1 for a failing stage).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import platform
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .candidate import AdapterError, Candidate, read_candidates, write_candidates
from .detector import (DEFAULT_MODEL_IDS, DefocusParams, DetectorError, ExternalScoreAdapter,
                       RasterBlobDetector)
from .evalstats import (BOOTSTRAP_UNITS, LAYER_MODES, METRICS, NumericError, ReportError,
                        build_report, match_detections, precision, read_samples_csv, sensitivity,
                        write_samples_csv)
from .fusion import (FeatureLayout, ForestError, ForestHyper, ForestModel, assemble_matrix,
                     train_forest)
from .pipeline import (ConditionSpec, SlideData, calibration_set, candidate_recall, process_slide,
                       run_condition)
from .registration import (Annotation, RegistrationError, read_annotations_csv, register_images,
                           thumbnail, write_annotations_csv, write_transfer_csv)
from .scanmodel import SCANNER_PROFILES, InvalidGeometryError, ScanProfile, WorkingResolution
from .seeding import derive_seed
from .simkit import (SimConfig, SpacingError, annotations_rows, mode_planes, render_planes,
                     run_experiment_detailed)
from .tilestore import StoreError, ingest, load_image, open_store, write_store
from .zmerge import MergedCandidate, merge_candidates

log = logging.getLogger("zstack_mitosis")

ENV_CONFIG = "ZSTACK_MITOSIS_CONFIG"
MANIFEST_NAME = "run-manifest.json"
COMMANDS = ("ingest", "simulate", "detect", "merge", "fuse-train", "fuse-predict", "register",
            "evaluate", "report", "run-all")
DETECTOR_KINDS = ("synthetic", "raster", "external")


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, artifact: Optional[str] = None):
        self.stage = stage
        self.artifact = artifact
        super().__init__(message)


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def _sim_defaults() -> dict:
    c = SimConfig()
    return {
        "slide_w_um": c.slide_w_um,
        "slide_h_um": c.slide_h_um,
        "n_mitoses": c.n_mitoses,
        "mitosis_depth_range_um": c.mitosis_depth_range_um,
        "plane_offsets_um": list(c.plane_offsets_um),
        "n_test_slides": c.n_test_slides,
        "scanner": c.scanner,
        "pipeline": c.pipeline,
        "neg_ratio": c.neg_ratio,
        "defocus": asdict(c.defocus),
    }


def default_config() -> dict:
    h = ForestHyper()
    return {
        "master_seed": 0,
        "n_runs": 20,
        "output_dir": "out",
        "merge_radius_um": 2.5,
        "cutoff_um": 7.5,
        "n_boot": 10_000,
        "bootstrap_unit": "runs",
        "forest": {**asdict(h), "recalibrate_mode": "refit"},
        "detector": {"kind": "synthetic", "seg_threshold": 0.5, "noise_sd": 0.0,
                     "model_ids": list(DEFAULT_MODEL_IDS), "scores_name": "scores.jsonl"},
        "simulation": _sim_defaults(),
        "stores": {},
        "annotations": None,
        "calibration_slide": None,
        "pipeline": "pipeline",
        "registration": {"raster_mpp": 2.0, "thumb_mpp": 32.0, "refine": True},
    }


def _merge(base: dict, over: dict, path: str, errors: list) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            errors.append(f"{key}: unknown key")
            continue
        if isinstance(base[k], dict) and k not in ("stores",):
            if not isinstance(v, dict):
                errors.append(f"{key}: expected a mapping")
                continue
            out[k] = _merge(base[k], v, key + ".", errors)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"config: cannot read {p}: {exc.strerror}"]) from None
    try:
        if p.suffix in (".yaml", ".yml"):
            import yaml
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except Exception as exc:  # parse errors of either format
        raise ConfigError([f"config: cannot parse {p}: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["config: top level must be a mapping"])
    # a run-manifest carries the full resolved config
    if "config" in data and "config_sha256" in data:
        data = data["config"]
    return data


def _num(cfg, key, errors, lo=None, hi=None, integer=False, lo_open=False):
    v = cfg
    for part in key.split("."):
        v = v[part]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
    if integer:
        ok = ok and float(v).is_integer()
    if not ok:
        errors.append(f"{key}: expected {'an integer' if integer else 'a number'}, got {v!r}")
        return
    if lo is not None and (v <= lo if lo_open else v < lo):
        errors.append(f"{key}: must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        errors.append(f"{key}: must be <= {hi}, got {v}")


def validate_config(cfg: dict, check_paths: bool = True, errors: Optional[list] = None) -> None:
    """Raise :class:`ConfigError` listing every violation (plus any in ``errors``)."""
    errors = list(errors or [])
    _num(cfg, "master_seed", errors, 0, integer=True)
    _num(cfg, "n_runs", errors, 1, integer=True)
    _num(cfg, "n_boot", errors, 1, integer=True)
    if cfg["bootstrap_unit"] not in BOOTSTRAP_UNITS:
        errors.append(f"bootstrap_unit: must be one of {BOOTSTRAP_UNITS}, "
                      f"got {cfg['bootstrap_unit']!r}")
    _num(cfg, "merge_radius_um", errors, 0, lo_open=True)
    _num(cfg, "cutoff_um", errors, 0, lo_open=True)
    _num(cfg, "forest.n_trees", errors, 1, integer=True)
    _num(cfg, "forest.max_depth", errors, 0, integer=True)
    _num(cfg, "forest.min_leaf", errors, 1, integer=True)
    _num(cfg, "forest.decision_threshold", errors, 0, 1, lo_open=True)
    if cfg["forest"]["features_per_split"] is not None:
        _num(cfg, "forest.features_per_split", errors, 1, integer=True)
    if cfg["forest"]["recalibrate_mode"] not in ("refit", "threshold"):
        errors.append("forest.recalibrate_mode: must be 'refit' or 'threshold'")
    det = cfg["detector"]
    if det["kind"] not in DETECTOR_KINDS:
        errors.append(f"detector.kind: must be one of {DETECTOR_KINDS}, got {det['kind']!r}")
    _num(cfg, "detector.seg_threshold", errors, 0, 1, lo_open=True)
    _num(cfg, "detector.noise_sd", errors, 0)
    if not (isinstance(det["model_ids"], list) and det["model_ids"]
            and all(isinstance(m, str) for m in det["model_ids"])):
        errors.append("detector.model_ids: expected a non-empty list of names")
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        errors.append("output_dir: expected a path")
    for k in ("raster_mpp", "thumb_mpp"):
        _num(cfg, f"registration.{k}", errors, 0, lo_open=True)
    try:
        sim_config(cfg)
    except (ValueError, TypeError) as exc:
        errors.append(f"simulation: {exc}")
    stores = cfg["stores"]
    if not isinstance(stores, dict):
        errors.append("stores: expected a mapping scanner -> layer mode -> slide id -> path")
        stores = {}
    for scanner, modes in stores.items():
        if not isinstance(modes, dict):
            errors.append(f"stores.{scanner}: expected a mapping of layer modes")
            continue
        for mode, slides in modes.items():
            key = f"stores.{scanner}.{mode}"
            if mode not in LAYER_MODES:
                errors.append(f"{key}: layer mode must be one of {LAYER_MODES}")
            if not isinstance(slides, dict) or not slides:
                errors.append(f"{key}: expected a mapping slide id -> store path")
                continue
            for sid, path in slides.items():
                if check_paths and not (Path(str(path)) / "manifest.json").is_file():
                    errors.append(f"{key}.{sid}: store not found at {path}")
    if stores:
        ann = cfg["annotations"]
        if not isinstance(ann, str):
            errors.append("annotations: path to an annotations CSV required with stores")
        elif check_paths and not Path(ann).is_file():
            errors.append(f"annotations: file not found at {ann}")
        calib = cfg["calibration_slide"]
        if not isinstance(calib, str):
            errors.append("calibration_slide: slide id required with stores")
        else:
            for scanner, modes in stores.items():
                for mode, slides in (modes.items() if isinstance(modes, dict) else ()):
                    if isinstance(slides, dict) and calib not in slides:
                        errors.append(f"stores.{scanner}.{mode}: calibration slide {calib!r} missing")
                    if isinstance(slides, dict) and len(slides) < 2:
                        errors.append(f"stores.{scanner}.{mode}: needs the calibration slide "
                                      "and at least one test slide")
        if det["kind"] == "synthetic":
            errors.append("detector.kind: 'synthetic' scores simulated slides only; use "
                          "'raster' or 'external' with stores")
    if errors:
        raise ConfigError(errors)


def resolve_config(path: Optional[str], overrides: dict, check_paths: bool = True) -> dict:
    """defaults <- config file <- flag overrides, then validation."""
    errors: list[str] = []
    cfg = default_config()
    if path:
        cfg = _merge(cfg, read_config_file(path), "", errors)
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None}, "", errors)
    try:
        validate_config(cfg, check_paths, errors)
    except (KeyError, TypeError) as exc:  # malformed structure the checks could not walk
        raise ConfigError(errors + [f"config: malformed value near {exc}"]) from None
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sim_config(cfg: dict) -> SimConfig:
    s = cfg["simulation"]
    f = cfg["forest"]
    hyper = ForestHyper(**{k: f[k] for k in (x.name for x in fields(ForestHyper))})
    return SimConfig(
        slide_w_um=float(s["slide_w_um"]), slide_h_um=float(s["slide_h_um"]),
        n_mitoses=int(s["n_mitoses"]), mitosis_depth_range_um=float(s["mitosis_depth_range_um"]),
        defocus=DefocusParams(**s["defocus"]), plane_offsets_um=tuple(s["plane_offsets_um"]),
        n_runs=int(cfg["n_runs"]), master_seed=int(cfg["master_seed"]),
        n_test_slides=int(s["n_test_slides"]), model_ids=tuple(cfg["detector"]["model_ids"]),
        hyper=hyper, cutoff_um=float(cfg["cutoff_um"]),
        merge_radius_um=float(cfg["merge_radius_um"]), neg_ratio=s["neg_ratio"],
        scanner=str(s["scanner"]), pipeline=str(s["pipeline"]),
        per_slide_samples=cfg["bootstrap_unit"] == "slides",
    )


def forest_hyper(cfg: dict) -> ForestHyper:
    f = cfg["forest"]
    return ForestHyper(**{k: f[k] for k in (x.name for x in fields(ForestHyper))})


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def versions() -> dict:
    import scipy
    return {"zstack_mitosis": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(dest: Path, command: str, args: dict, cfg: dict, seeds: dict,
                   outputs: list[Path]) -> Path:
    base = dest if dest.is_dir() else dest.parent
    doc = {
        "command": command,
        "args": args,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "master_seed": cfg["master_seed"],
        "seeds": seeds,
        "versions": versions(),
        "outputs": {os.path.relpath(p, base): _sha(p) for p in sorted(outputs)
                    if p.is_file()},
    }
    mpath = dest / MANIFEST_NAME if dest.is_dir() else dest.with_name(dest.name + ".manifest.json")
    mpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return mpath


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def experiment_seeds(cfg: dict, n_test: int) -> dict:
    m = cfg["master_seed"]
    seeds = {"slide/calib": derive_seed(m, "slide", "calib")}
    for i in range(n_test):
        seeds[f"slide/test/{i}"] = derive_seed(m, "slide", "test", i)
    for r in range(1, cfg["n_runs"] + 1):
        seeds[f"forest/{r}"] = derive_seed(m, "forest", r)
        seeds[f"negatives/{r}"] = derive_seed(m, "negatives", r)
    return seeds


def write_reports(samples, cfg: dict, out: Path) -> list[Path]:
    paths = []
    for metric in METRICS:
        rep = build_report(samples, metric, cfg["n_boot"], cfg["master_seed"], cfg["cutoff_um"],
                           unit=cfg["bootstrap_unit"])
        paths.append(_write(out / f"report_{metric}.csv", rep.to_csv()))
        print(f"[{metric}]\n{rep.to_table()}")
    return paths


# --------------------------------------------------------------------------
# helpers shared by commands
# --------------------------------------------------------------------------

def make_detector(cfg: dict, store_path: Optional[Path] = None):
    d = cfg["detector"]
    if d["kind"] == "raster":
        return RasterBlobDetector(seg_threshold=d["seg_threshold"], noise_sd=d["noise_sd"],
                                  seed=derive_seed(cfg["master_seed"], "detector"),
                                  radius_um=cfg["merge_radius_um"])
    if d["kind"] == "external":
        if store_path is None:
            raise StageError("detect", "external scores need a store directory")
        f = Path(store_path) / d["scores_name"]
        if not f.is_file():
            raise StageError("detect", "score file not found", str(f))
        return ExternalScoreAdapter(f, radius_um=cfg["merge_radius_um"])
    raise StageError("detect", "the synthetic detector only runs inside simulate/run-all")


def _open(path, stage: str):
    try:
        return open_store(path)
    except StoreError as exc:
        raise StageError(stage, str(exc), str(path)) from None


def load_annotations(path, slide_id: Optional[str] = None) -> list[Annotation]:
    try:
        anns = read_annotations_csv(Path(path).read_text())
    except OSError as exc:
        raise StageError("annotations", exc.strerror or str(exc), str(path)) from None
    except ValueError as exc:
        raise StageError("annotations", str(exc), str(path)) from None
    if slide_id is not None:
        anns = [a for a in anns if a.slide_id == slide_id]
    return anns


def gts_of(anns) -> list[tuple[str, float, float]]:
    return [(f"{a.slide_id}:{k:05d}", a.x_um, a.y_um) for k, a in enumerate(anns)
            if a.cls == "mitosis"]


def merged_records(merged: list[MergedCandidate]) -> list[dict]:
    out = []
    for mc in merged:
        rec = mc.rep.to_record()
        rec["members"] = [m.id for m in mc.members]
        rec["planes"] = list(mc.planes_present)
        out.append(rec)
    return out


def write_jsonl(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(canonical_json(r) + "\n")
    return path


def read_merged(path) -> list[Candidate]:
    """Representatives of a merged-candidates file (one per line)."""
    try:
        return read_candidates(path)
    except (OSError, ValueError) as exc:
        raise StageError("merge", str(exc), str(path)) from None


def store_planes(handle, mode: Optional[str]) -> tuple[float, ...]:
    if mode == "single":
        if not handle.has_plane(0.0):
            raise StageError("detect", "single-layer processing needs the 0 um plane",
                             str(handle.path))
        return (0.0,)
    return tuple(handle.plane_offsets)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


def _plane_images(paths: list[str]) -> list[str]:
    """Expand a single directory argument into its images, sorted by name."""
    if len(paths) == 1 and Path(paths[0]).is_dir():
        found = sorted(str(p) for p in Path(paths[0]).iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            raise ConfigError([f"--images: no images in directory {paths[0]}"])
        return found
    return list(paths)


def cmd_ingest(cfg, a) -> list[Path]:
    a.images = _plane_images(a.images)
    key = (a.scanner, a.mode)
    known = SCANNER_PROFILES.get(key)
    offs = tuple(sorted(a.offsets)) if a.offsets else (known.plane_offsets_um if known else None)
    if offs is None:
        raise ConfigError([f"--offsets: required for unknown scanner {a.scanner!r}"])
    if len(offs) != len(a.images):
        raise ConfigError([f"--images: {len(a.images)} image(s) for {len(offs)} plane offset(s)"])
    mpp = a.native_mpp if a.native_mpp is not None else (known.native_mpp if known else None)
    if mpp is None:
        raise ConfigError([f"--native-mpp: required for unknown scanner {a.scanner!r}"])
    try:
        if known is not None and mpp == known.native_mpp and offs == known.plane_offsets_um:
            profile = known
        else:
            step = None if len(offs) == 1 else offs[1] - offs[0]
            profile = ScanProfile(a.scanner, mpp, offs, step)
    except InvalidGeometryError as exc:
        raise ConfigError([f"--offsets: {exc}"]) from None
    images = {}
    for z, p in zip(offs, a.images):
        try:
            images[z] = load_image(p)
        except OSError as exc:
            raise StageError("ingest", exc.strerror or str(exc), p) from None
    out = Path(a.out)
    try:
        h = ingest(images, out, a.slide_id, profile, WorkingResolution(), a.tile_size, a.tile_format)
    except (StoreError, ValueError) as exc:
        raise StageError("ingest", str(exc), str(out)) from None
    return sorted(p for p in h.path.rglob("*") if p.is_file())


def cmd_simulate(cfg, a) -> list[Path]:
    sc = sim_config(cfg)
    out = Path(cfg["output_dir"])
    res = run_experiment_detailed(sc, a.workers)
    paths = [_write(out / "samples.csv", write_samples_csv(res.samples))]
    rows = []
    for sid, slide in res.slides.items():
        rows.extend(Annotation(*r) for r in annotations_rows(slide))
    paths.append(_write(out / "annotations.csv", write_annotations_csv(rows)))
    paths.append(_write(out / "candidate_recall.json",
                        json.dumps(res.candidate_recall, indent=2, sort_keys=True) + "\n"))
    if a.render:
        for sid, slide in res.slides.items():
            for mode in LAYER_MODES:
                planes = mode_planes(sc, mode)
                prof = sc.profile(mode)
                sub = out / "stores" / mode / sid
                try:
                    rendered = render_planes(slide)
                    data = {z: rendered[z] * 65535.0 for z in planes}
                    write_store(sub, sid, prof, data, tile_format="raw16")
                except ValueError as exc:
                    raise StageError("simulate", str(exc), str(sub)) from None
                paths.extend(p for p in sub.rglob("*") if p.is_file())
    return paths


def cmd_detect(cfg, a) -> list[Path]:
    h = _open(a.store, "detect")
    det = make_detector(cfg, h.path)
    planes = store_planes(h, a.mode)
    cands = []
    for z in planes:
        cands.extend(det.detect_plane(h, z))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_candidates(out, cands)
    return [out]


def cmd_merge(cfg, a) -> list[Path]:
    try:
        cands = read_candidates(a.input)
    except (OSError, ValueError) as exc:
        raise StageError("merge", str(exc), str(a.input)) from None
    merged = merge_candidates(cands, cfg["merge_radius_um"])
    return [write_jsonl(Path(a.out), merged_records(merged))]


def _slide_data(cfg, store_path, merged_path, anns, mode) -> tuple[SlideData, Any, Any]:
    h = _open(store_path, "fuse")
    det = make_detector(cfg, h.path)
    reps = read_merged(merged_path)
    merged = [MergedCandidate(r, (r,)) for r in reps]
    planes = store_planes(h, mode)
    ids = tuple(cfg["detector"]["model_ids"])
    X = assemble_matrix(merged, det, h, planes, ids)
    layout = FeatureLayout(tuple(float(z) for z in planes), ids)
    return SlideData(h.manifest.slide_id, merged, X, gts_of(anns), layout), det, h


def cmd_fuse_train(cfg, a) -> list[Path]:
    h = _open(a.store, "fuse-train")
    anns = load_annotations(a.annotations, h.manifest.slide_id)
    sd, _, _ = _slide_data(cfg, a.store, a.merged, anns, a.mode)
    neg_rng = np.random.default_rng(derive_seed(cfg["master_seed"], "negatives", 1))
    calib = calibration_set(sd, cfg["cutoff_um"], cfg["simulation"]["neg_ratio"], neg_rng)
    try:
        model = train_forest(calib, forest_hyper(cfg), derive_seed(cfg["master_seed"], "forest", 1),
                             a.workers)
    except ValueError as exc:
        raise StageError("fuse-train", str(exc), str(a.merged)) from None
    return [_write(Path(a.out), model.to_json() + "\n")]


def cmd_fuse_predict(cfg, a) -> list[Path]:
    try:
        model = ForestModel.from_json(Path(a.model).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("fuse-predict", str(exc), str(a.model)) from None
    h = _open(a.store, "fuse-predict")
    det = make_detector(cfg, h.path)
    reps = read_merged(a.merged)
    planes = model.layout.plane_offsets
    X = assemble_matrix(reps, det, h, planes, model.layout.model_ids)
    proba = model.predict_proba(X) if len(reps) else np.empty(0)
    recs = []
    for c, p in zip(reps, proba.tolist()):
        if p >= model.decision_threshold:
            rec = c.to_record()
            rec["prob"] = p
            recs.append(rec)
    return [write_jsonl(Path(a.out), recs)]


def _store_raster(handle, mpp: float) -> np.ndarray:
    z = 0.0 if handle.has_plane(0.0) else handle.plane_offsets[len(handle.plane_offsets) // 2]
    img = handle.read_plane(z).astype(np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    r, _ = thumbnail(img, handle.manifest.mpp, mpp)
    return r


def cmd_register(cfg, a) -> list[Path]:
    rc = cfg["registration"]
    ref = _open(a.ref_store, "register")
    tgt = _open(a.tgt_store, "register")
    mpp = ref.manifest.mpp * max(1, int(round(rc["raster_mpp"] / ref.manifest.mpp)))
    if abs(tgt.manifest.mpp - ref.manifest.mpp) > 1e-9:
        raise StageError("register", "reference and target stores differ in resolution",
                         str(a.tgt_store))
    anns = load_annotations(a.annotations, ref.manifest.slide_id)
    from .registration import RegistrationError
    try:
        glob, tr = register_images(_store_raster(ref, rc["raster_mpp"]),
                                   _store_raster(tgt, rc["raster_mpp"]), mpp,
                                   [a_.pos for a_ in anns], seed=cfg["master_seed"],
                                   thumb_mpp=rc["thumb_mpp"], refine=rc["refine"],
                                   workers=a.workers)
    except RegistrationError as exc:
        raise StageError("register", str(exc), str(a.tgt_store)) from None
    out = Path(a.out)
    paths = [_write(out, write_transfer_csv(anns, tr, tgt.manifest.slide_id))]
    paths.append(_write(out.with_name(out.stem + ".transform.json"),
                        json.dumps(asdict(glob), indent=2, sort_keys=True) + "\n"))
    return paths


def cmd_evaluate(cfg, a) -> list[Path]:
    try:
        dets = read_candidates(a.detections)
    except (OSError, ValueError) as exc:
        raise StageError("evaluate", str(exc), str(a.detections)) from None
    anns = load_annotations(a.annotations, a.slide_id)
    m = match_detections(dets, gts_of(anns), cfg["cutoff_um"])
    doc = {"tp": m.tp, "fp": m.fp, "fn": m.fn, "cutoff_um": m.cutoff_um,
           "sensitivity": None if math.isnan(sensitivity(m)) else sensitivity(m),
           "precision": None if math.isnan(precision(m)) else precision(m),
           "pairs": [list(p) for p in m.pairs]}
    return [_write(Path(a.out), json.dumps(doc, indent=2, sort_keys=True) + "\n")]


def cmd_report(cfg, a) -> list[Path]:
    try:
        samples = read_samples_csv(Path(a.samples).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("report", str(exc), str(a.samples)) from None
    try:
        return write_reports(samples, cfg, Path(cfg["output_dir"]))
    except ValueError as exc:
        raise StageError("report", str(exc), str(a.samples)) from None


def _run_all_stores(cfg, a) -> tuple[list, dict]:
    anns_all = load_annotations(cfg["annotations"])
    calib_id = cfg["calibration_slide"]
    ids = tuple(cfg["detector"]["model_ids"])
    hyper = forest_hyper(cfg)
    samples, recall = [], {}
    for scanner in sorted(cfg["stores"]):
        for mode in LAYER_MODES:
            slides = cfg["stores"][scanner].get(mode)
            if not slides:
                continue
            data = {}
            for sid in sorted(slides):
                h = _open(slides[sid], "detect")
                det = make_detector(cfg, h.path)
                anns = [x for x in anns_all if x.slide_id == sid]
                try:
                    data[sid] = process_slide(sid, det, h, store_planes(h, mode), ids, gts_of(anns),
                                              cfg["merge_radius_um"])
                except (StoreError, ValueError) as exc:
                    raise StageError("detect", str(exc), str(slides[sid])) from None
                recall[f"{scanner}/{mode}/{sid}"] = candidate_recall(data[sid], cfg["cutoff_um"])
            spec = ConditionSpec(scanner, cfg["pipeline"], mode, hyper, cfg["cutoff_um"],
                                 cfg["simulation"]["neg_ratio"], cfg["forest"]["recalibrate_mode"],
                                 per_slide=cfg["bootstrap_unit"] == "slides")
            base = None
            if spec.recalibrate_mode == "threshold":
                neg_rng = np.random.default_rng(derive_seed(cfg["master_seed"], "negatives", 0))
                base = train_forest(calibration_set(data[calib_id], cfg["cutoff_um"],
                                                    spec.neg_ratio, neg_rng),
                                    hyper, derive_seed(cfg["master_seed"], "forest", 0), a.workers)
            tests = [data[s] for s in sorted(data) if s != calib_id]
            samples.extend(run_condition(spec, data[calib_id], tests, cfg["n_runs"],
                                         cfg["master_seed"], a.workers, base))
    return samples, recall


def cmd_run_all(cfg, a) -> list[Path]:
    out = Path(cfg["output_dir"])
    if cfg["stores"]:
        samples, recall = _run_all_stores(cfg, a)
    else:
        sc = sim_config(cfg)
        res = run_experiment_detailed(sc, a.workers)
        samples, recall = res.samples, res.candidate_recall
    samples = sorted(samples, key=lambda s: (s.scanner, s.pipeline, s.run_index, s.layer_mode,
                                             s.slide_id, s.metric))
    paths = [_write(out / "samples.csv", write_samples_csv(samples))]
    paths.append(_write(out / "candidate_recall.json",
                        json.dumps(recall, indent=2, sort_keys=True) + "\n"))
    paths.extend(write_reports(samples, cfg, out))
    return paths


# failures of the data rather than of the program
DOMAIN_ERRORS = (AdapterError, DetectorError, ForestError, InvalidGeometryError, NumericError,
                 RegistrationError, ReportError, SpacingError, StoreError)

HANDLERS = {
    "ingest": cmd_ingest, "simulate": cmd_simulate, "detect": cmd_detect, "merge": cmd_merge,
    "fuse-train": cmd_fuse_train, "fuse-predict": cmd_fuse_predict, "register": cmd_register,
    "evaluate": cmd_evaluate, "report": cmd_report, "run-all": cmd_run_all,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON/YAML config (default: ${ENV_CONFIG})")
    common.add_argument("--workers", type=int, default=1, help="worker processes (outputs do not depend on it)")
    common.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--n-runs", type=int, dest="n_runs")
    common.add_argument("--cutoff-um", type=float, dest="cutoff_um")
    common.add_argument("--merge-radius-um", type=float, dest="merge_radius_um")
    common.add_argument("--n-boot", type=int, dest="n_boot")
    common.add_argument("--bootstrap-unit", dest="bootstrap_unit",
                        help="bootstrap resampling unit: runs (default) or slides")
    common.add_argument("--detector", dest="detector_kind", choices=DETECTOR_KINDS)
    common.add_argument("--validate-only", action="store_true",
                        help="validate the resolved config and exit")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="zstack-mitosis",
                                description="z-stack mitosis detection pipeline and evaluation")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="rescale plane images into a tile store")
    s.add_argument("--images", nargs="+", required=True, metavar="PATH",
                   help="one image per plane in ascending plane order, or a directory "
                        "of plane images sorted by name")
    s.add_argument("--offsets", nargs="+", type=float, metavar="Z",
                   help="plane offsets in um (default: the scanner profile's)")
    s.add_argument("--scanner", required=True)
    s.add_argument("--mode", choices=LAYER_MODES, required=True)
    s.add_argument("--slide-id", required=True)
    s.add_argument("--native-mpp", type=float)
    s.add_argument("--tile-size", type=int, default=512)
    s.add_argument("--tile-format", choices=("png8", "raw16"), default="png8")
    s.add_argument("--out", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate slides and the experiment")
    s.add_argument("--render", action="store_true", help="also write rendered tile stores")

    for name, hlp in (("detect", "per-plane candidate detection"),):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--store", required=True)
        s.add_argument("--mode", choices=LAYER_MODES)
        s.add_argument("--out", required=True)

    s = sub.add_parser("merge", parents=[common], help="merge candidates across planes")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("fuse-train", parents=[common], help="train the fusion forest on one slide")
    s.add_argument("--store", required=True)
    s.add_argument("--merged", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--mode", choices=LAYER_MODES)
    s.add_argument("--out", required=True)

    s = sub.add_parser("fuse-predict", parents=[common], help="keep candidates the forest accepts")
    s.add_argument("--model", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--merged", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("register", parents=[common], help="transfer annotations between scans")
    s.add_argument("--ref-store", required=True)
    s.add_argument("--tgt-store", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="match detections to ground truth")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--slide-id")
    s.add_argument("--out", required=True)

    s = sub.add_parser("report", parents=[common], help="bootstrap means, deltas and Tukey p")
    s.add_argument("--samples", required=True)

    sub.add_parser("run-all", parents=[common], help="the full experiment from one config")
    return p


def _overrides(a) -> dict:
    o = {k: getattr(a, k, None) for k in ("master_seed", "output_dir", "n_runs", "cutoff_um",
                                          "merge_radius_um", "n_boot", "bootstrap_unit")}
    if getattr(a, "detector_kind", None):
        o["detector"] = {"kind": a.detector_kind}
    return o


def _error(payload: dict, code: int) -> int:
    sys.stderr.write(canonical_json(payload) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(a.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if a.workers < 1:
        return _error({"error": "config", "violations": ["--workers: must be >= 1"]}, 2)
    cfg_path = a.config or os.environ.get(ENV_CONFIG) or None
    try:
        cfg = resolve_config(cfg_path, _overrides(a))
    except ConfigError as exc:
        return _error({"error": "config", "violations": exc.violations}, 2)
    if a.validate_only:
        print(canonical_json({"valid": True, "config_sha256": config_hash(cfg)}))
        return 0
    try:
        outputs = HANDLERS[a.command](cfg, a)
    except ConfigError as exc:
        return _error({"error": "config", "violations": exc.violations}, 2)
    except StageError as exc:
        return _error({"error": "stage", "stage": exc.stage, "artifact": exc.artifact,
                       "message": str(exc)}, 1)
    except DOMAIN_ERRORS as exc:
        return _error({"error": "stage", "stage": a.command, "artifact": None,
                       "type": type(exc).__name__, "message": str(exc)}, 1)
    except Exception as exc:  # unexpected: still machine-readable
        log.debug("unhandled failure", exc_info=True)
        return _error({"error": "internal", "stage": a.command, "type": type(exc).__name__,
                       "message": str(exc)}, 1)
    dest = Path(cfg["output_dir"]) if a.command in ("simulate", "report", "run-all") else Path(a.out)
    if a.command == "ingest":
        dest = Path(a.out)
    seeds = experiment_seeds(cfg, cfg["simulation"]["n_test_slides"]) \
        if a.command in ("simulate", "run-all") else {"master": cfg["master_seed"]}
    args = {k: v for k, v in sorted(vars(a).items())
            if k not in ("workers", "log_level", "config", "validate_only")}
    write_manifest(dest, a.command, args, cfg, seeds, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
