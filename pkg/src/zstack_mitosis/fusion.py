"""Multi-plane score fusion with a deterministic random forest.

Each merged candidate is described by a plane x model matrix of
verification scores, flattened plane-major (``values[p * M + m]``).  A forest
of CART trees (Gini impurity, bootstrap rows, random feature subsets per
split) turns that vector into a mitosis probability.  Everything that is
random derives from ``(seed, tree index)``, so a model is reproducible
bit-for-bit and independent of how many workers trained it.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .scanmodel import PointUm

FORMAT_NAME = "zstack-mitosis-forest"
FORMAT_VERSION = 1
_GAIN_TIE = 1e-12


class ForestError(ValueError):
    """Training or prediction contract violated."""


class LayoutMismatch(ForestError):
    pass


@dataclass(frozen=True)
class FeatureLayout:
    plane_offsets: tuple[float, ...]
    model_ids: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.plane_offsets) * len(self.model_ids)

    def index(self, plane_idx: int, model_idx: int) -> int:
        return plane_idx * len(self.model_ids) + model_idx

    def to_dict(self) -> dict:
        return {"plane_offsets": list(self.plane_offsets), "model_ids": list(self.model_ids)}

    @classmethod
    def from_dict(cls, d) -> "FeatureLayout":
        return cls(tuple(float(z) for z in d["plane_offsets"]), tuple(d["model_ids"]))


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    layout: FeatureLayout

    def __post_init__(self):
        if len(self.values) != self.layout.size:
            raise ForestError(f"feature length {len(self.values)} != layout size {self.layout.size}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def assemble_features(mc, detector, store, plane_offsets: Sequence[float],
                      model_ids: Sequence[str]) -> FeatureVector:
    """Score a merged candidate's representative on every plane with every model."""
    layout = FeatureLayout(tuple(float(z) for z in plane_offsets), tuple(model_ids))
    rep = mc.rep if hasattr(mc, "rep") else mc
    pos = PointUm(rep.x_um, rep.y_um)
    values = []
    for z in layout.plane_offsets:
        sv = detector.score_patch(store, pos, z, layout.model_ids)
        if tuple(sv.model_ids) != layout.model_ids or len(sv.scores) != len(layout.model_ids):
            raise ForestError(f"incomplete score vector at ({pos.x_um}, {pos.y_um}), plane {z:+g}")
        values.extend(sv.scores)
    return FeatureVector(tuple(values), layout)


def assemble_matrix(merged, detector, store, plane_offsets, model_ids) -> np.ndarray:
    layout = FeatureLayout(tuple(float(z) for z in plane_offsets), tuple(model_ids))
    if not merged:
        return np.empty((0, layout.size))
    return np.array([assemble_features(m, detector, store, plane_offsets, model_ids).values
                     for m in merged], dtype=np.float64)


@dataclass(frozen=True)
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64).reshape(-1, self.layout.size)
        y = np.asarray(self.y).astype(np.int8).ravel()
        if X.shape[0] != y.size:
            raise ForestError(f"{X.shape[0]} feature rows but {y.size} labels")
        if y.size and not np.isin(y, (0, 1)).all():
            raise ForestError("labels must be 0/1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector], labels) -> "LabeledSet":
        if not vectors:
            raise ForestError("empty labeled set")
        layout = vectors[0].layout
        if any(v.layout != layout for v in vectors):
            raise LayoutMismatch("feature layouts differ within a labeled set")
        return cls(np.array([v.values for v in vectors]), np.asarray(labels), layout)

    def __len__(self):
        return int(self.y.size)


@dataclass(frozen=True)
class ForestHyper:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: Optional[int] = None  # None -> ceil(sqrt(n_features))
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ForestError("n_trees >= 1, max_depth >= 0 and min_leaf >= 1 required")
        if not 0 < self.decision_threshold < 1:
            raise ForestError("decision_threshold must lie in (0, 1)")

    def resolved_fps(self, n_features: int) -> int:
        fps = self.features_per_split or math.ceil(math.sqrt(n_features))
        return max(1, min(int(fps), n_features))


@dataclass(frozen=True)
class Tree:
    """Flat binary tree; ``feature[k] == -1`` marks a leaf holding ``value[k]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            k = node[active]
            rows = np.nonzero(active)[0]
            go_left = X[rows, self.feature[k]] <= self.threshold[k]
            node[rows] = np.where(go_left, self.left[k], self.right[k])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_nested(self, k: int = 0) -> dict:
        if self.feature[k] < 0:
            return {"leaf": float(self.value[k]), "n": int(self.n_node[k])}
        return {"feature": int(self.feature[k]), "threshold": float(self.threshold[k]),
                "n": int(self.n_node[k]),
                "left": self.to_nested(int(self.left[k])),
                "right": self.to_nested(int(self.right[k]))}

    @classmethod
    def from_nested(cls, d: dict, n_features: int) -> "Tree":
        feat, thr, left, right, val, nn = [], [], [], [], [], []

        def visit(node):
            k = len(feat)
            for lst in (feat, thr, left, right, val, nn):
                lst.append(0)
            nn[k] = int(node.get("n", 0))
            if "leaf" in node:
                v = float(node["leaf"])
                if not 0.0 <= v <= 1.0:
                    raise ForestError(f"leaf fraction out of [0, 1]: {v}")
                feat[k], thr[k], left[k], right[k], val[k] = -1, 0.0, -1, -1, v
                return k
            f = int(node["feature"])
            if not 0 <= f < n_features:
                raise ForestError(f"split feature {f} outside layout of size {n_features}")
            feat[k], thr[k], val[k] = f, float(node["threshold"]), math.nan
            left[k] = visit(node["left"])
            right[k] = visit(node["right"])
            return k

        visit(d)
        return cls(np.array(feat, np.int64), np.array(thr, np.float64), np.array(left, np.int64),
                   np.array(right, np.int64), np.array(val, np.float64), np.array(nn, np.int64))


def _gini_sum(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    # n * gini = 2 * pos * (n - pos) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n > 0, 2.0 * pos * (n - pos) / n, 0.0)


def best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int):
    """Greedy best Gini split over ``features`` of the rows ``X``/``y``.

    Thresholds are midpoints between consecutive distinct values; ties in
    gain go to the lowest feature index, then the lowest threshold.
    Returns ``(feature, threshold, gain)`` or ``None`` when no split with
    positive gain respects ``min_leaf``.
    """
    n = y.size
    if n < 2 * min_leaf:
        return None
    feats = np.asarray(sorted(features), dtype=np.int64)
    V = X[:, feats]
    order = np.argsort(V, axis=0, kind="stable")
    Vs = np.take_along_axis(V, order, axis=0)
    ys = y[order].astype(np.float64)
    cum = np.cumsum(ys, axis=0)[:-1]          # positives left of split i|i+1
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    total_pos = float(y.sum())
    parent = 2.0 * total_pos * (n - total_pos) / n
    child = _gini_sum(cum, nl) + _gini_sum(total_pos - cum, nr)
    gain = (parent - child) / n
    valid = Vs[1:] > Vs[:-1]
    valid &= (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    g_best = gain.max()
    if not g_best > _GAIN_TIE:
        return None
    # column-major scan = feature ascending, then threshold ascending
    cand = np.argwhere((gain >= g_best - _GAIN_TIE).T)
    fi, pos = int(cand[0, 0]), int(cand[0, 1])
    thr = (Vs[pos, fi] + Vs[pos + 1, fi]) / 2.0
    return int(feats[fi]), float(thr), float(gain[pos, fi])


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(tree_index)])


def bootstrap_rows(seed: int, tree_index: int, n: int) -> np.ndarray:
    return tree_rng(seed, tree_index).integers(0, n, size=n)


def grow_tree(X: np.ndarray, y: np.ndarray, hyper: ForestHyper, seed: int,
              tree_index: int) -> Tree:
    n, d = X.shape
    rng = tree_rng(seed, tree_index)
    rows = rng.integers(0, n, size=n)
    fps = hyper.resolved_fps(d)
    feat, thr, left, right, val, nn = [], [], [], [], [], []

    def new_node(idx):
        k = len(feat)
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        val.append(float(y[idx].mean()))
        nn.append(int(idx.size))
        return k

    # depth-first, left child first: node numbering is part of the serialised form
    root = new_node(rows)
    stack = [(root, rows, 0)]
    while stack:
        k, idx, depth = stack.pop()
        yk = y[idx]
        if depth >= hyper.max_depth or yk.min() == yk.max():
            continue
        features = rng.choice(d, size=fps, replace=False)
        split = best_split(X[idx], yk, features, hyper.min_leaf)
        if split is None:
            continue
        f, t, _ = split
        go_left = X[idx, f] <= t
        li, ri = idx[go_left], idx[~go_left]
        feat[k], thr[k], val[k] = f, t, math.nan
        left[k] = new_node(li)
        right[k] = new_node(ri)
        # push right first so the left subtree is expanded first
        stack.append((right[k], ri, depth + 1))
        stack.append((left[k], li, depth + 1))
    return Tree(np.array(feat, np.int64), np.array(thr, np.float64), np.array(left, np.int64),
                np.array(right, np.int64), np.array(val, np.float64), np.array(nn, np.int64))


def _grow_many(args):
    X, y, hyper, seed, indices = args
    return [grow_tree(X, y, hyper, seed, t) for t in indices]


@dataclass
class ForestModel:
    trees: list[Tree]
    hyper: ForestHyper
    seed: int
    layout: FeatureLayout
    decision_threshold: float = 0.5

    def __post_init__(self):
        if not self.trees:
            raise ForestError("a forest needs at least one tree")
        for t in self.trees:
            if (t.feature >= self.layout.size).any():
                raise ForestError("split feature index outside the layout")
            leaves = t.value[t.feature < 0]
            if ((leaves < 0) | (leaves > 1)).any():
                raise ForestError("leaf fractions must lie in [0, 1]")

    def _matrix(self, fv) -> np.ndarray:
        if isinstance(fv, FeatureVector):
            if fv.layout != self.layout:
                raise LayoutMismatch(f"feature layout {fv.layout} does not match model {self.layout}")
            return fv.as_array()[None, :]
        X = np.atleast_2d(np.asarray(fv, dtype=np.float64))
        if X.shape[1] != self.layout.size:
            raise LayoutMismatch(f"feature width {X.shape[1]} does not match model {self.layout.size}")
        return X

    def predict_proba(self, fv) -> np.ndarray:
        X = self._matrix(fv)
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def predict(self, fv) -> np.ndarray:
        return self.predict_proba(fv) >= self.decision_threshold

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "seed": self.seed,
            "hyper": asdict(self.hyper),
            "layout": self.layout.to_dict(),
            "decision_threshold": self.decision_threshold,
            "trees": [t.to_nested() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != FORMAT_NAME:
            raise ForestError(f"not a forest document (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise ForestError(f"unsupported forest version {d.get('version')!r}")
        layout = FeatureLayout.from_dict(d["layout"])
        trees = [Tree.from_nested(t, layout.size) for t in d["trees"]]
        return cls(trees, ForestHyper(**d["hyper"]), int(d["seed"]), layout,
                   float(d["decision_threshold"]))

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        return cls.from_dict(json.loads(text))


def predict_proba(model: ForestModel, fv) -> np.ndarray:
    """Mean over trees of the leaf positive fraction."""
    return model.predict_proba(fv)


def train_forest(data: LabeledSet, hyper: ForestHyper = ForestHyper(), seed: int = 0,
                 workers: int = 1) -> ForestModel:
    if len(data) == 0 or np.unique(data.y).size < 2:
        raise ForestError("training data must contain both classes")
    X, y = data.X, data.y
    idx = list(range(hyper.n_trees))
    if workers > 1 and hyper.n_trees > 1:
        chunks = [idx[w::workers] for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_grow_many, [(X, y, hyper, seed, c) for c in chunks]))
        by_index = {}
        for c, trees in zip(chunks, parts):
            by_index.update(zip(c, trees))
        trees = [by_index[t] for t in idx]
    else:
        trees = [grow_tree(X, y, hyper, seed, t) for t in idx]
    return ForestModel(trees, hyper, int(seed), data.layout, hyper.decision_threshold)


def tune_threshold(model: ForestModel, calib: LabeledSet) -> float:
    """Decision threshold maximising F1 on ``calib``; ties go to the value nearest 0.5."""
    p = model.predict_proba(calib.X)
    best = (-1.0, 0.0, model.decision_threshold)
    for t in np.unique(np.concatenate([p, [0.5]])):
        if not 0 < t < 1:
            continue
        pred = p >= t
        tp = float((pred & (calib.y == 1)).sum())
        fp = float((pred & (calib.y == 0)).sum())
        fn = float((~pred & (calib.y == 1)).sum())
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        key = (f1, -abs(t - 0.5), float(t))
        if key[:2] > best[:2]:
            best = key
    return best[2]


def recalibrate(hyper: ForestHyper, calib: LabeledSet, seed: int, mode: str = "refit",
                base: Optional[ForestModel] = None, workers: int = 1) -> ForestModel:
    """Fit the fusion forest to one calibration slide.

    ``refit`` retrains from scratch; ``threshold`` keeps ``base``'s trees and
    only re-tunes its decision threshold.
    """
    if mode == "refit":
        return train_forest(calib, hyper, seed, workers)
    if mode == "threshold":
        if base is None:
            raise ForestError("threshold recalibration needs a base model")
        if base.layout != calib.layout:
            raise LayoutMismatch("calibration layout differs from the base model")
        if np.unique(calib.y).size < 2:
            raise ForestError("calibration data must contain both classes")
        return ForestModel(base.trees, base.hyper, base.seed, base.layout,
                           tune_threshold(base, calib))
    raise ForestError(f"unknown recalibration mode {mode!r}")
