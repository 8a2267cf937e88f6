"""Z-stack aware mitosis detection and its evaluation protocol.

Per-plane candidate detection, cross-plane merging, multi-plane score fusion
with a random forest, annotation registration, matching and statistics, and
a defocus simulator for desk-scale experiments.
"""
__version__ = "0.1.0"

from .candidate import Candidate, ScoreVector
from .evalstats import (MatchResult, MetricSample, bootstrap_mean, build_report, match_detections,
                        one_way_anova, precision, sensitivity, studentized_range_cdf, tukey_hsd)
from .fusion import FeatureLayout, ForestHyper, ForestModel, LabeledSet, train_forest
from .registration import GlobalTransform, TransferredAnnotation, estimate_global, transfer_annotations
from .scanmodel import PointUm, ScanProfile, WorkingResolution
from .simkit import SimConfig, generate_slide, run_experiment
from .zmerge import MergedCandidate, merge_candidates

__all__ = [
    "Candidate", "ScoreVector", "MatchResult", "MetricSample", "bootstrap_mean", "build_report",
    "match_detections", "one_way_anova", "precision", "sensitivity", "studentized_range_cdf",
    "tukey_hsd", "FeatureLayout", "ForestHyper", "ForestModel", "LabeledSet", "train_forest",
    "GlobalTransform", "TransferredAnnotation", "estimate_global", "transfer_annotations",
    "PointUm", "ScanProfile", "WorkingResolution", "SimConfig", "generate_slide",
    "run_experiment", "MergedCandidate", "merge_candidates",
]
