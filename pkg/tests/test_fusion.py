import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import best_split_exhaustive
from zstack_mitosis.fusion import FeatureLayout, FeatureVector, ForestError, ForestHyper, \
    ForestModel, LabeledSet, LayoutMismatch, assemble_features, best_split, bootstrap_rows, \
    grow_tree, predict_proba, recalibrate, train_forest, tune_threshold

LAYOUT = FeatureLayout((-0.6, 0.0, 0.6), ("m1", "m2"))


def separable(seed=0, n=200):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.int8)
    X = rng.normal(0, 1, (n, LAYOUT.size))
    X[:, 2] += np.where(y == 1, 3.0, -3.0)
    return LabeledSet(X, y, LAYOUT)


def test_layout_indexing():
    assert LAYOUT.size == 6
    assert LAYOUT.index(2, 1) == 5
    assert FeatureLayout.from_dict(LAYOUT.to_dict()) == LAYOUT
    with pytest.raises(ForestError):
        FeatureVector((0.1,), LAYOUT)


def test_labeled_set_validation():
    with pytest.raises(ForestError):
        LabeledSet(np.zeros((3, 6)), [0, 1], LAYOUT)
    with pytest.raises(ForestError):
        LabeledSet(np.zeros((2, 6)), [0, 2], LAYOUT)
    other = FeatureLayout((0.0,), ("m1", "m2"))
    with pytest.raises(LayoutMismatch):
        LabeledSet.from_vectors([FeatureVector((0,) * 6, LAYOUT), FeatureVector((0, 0), other)],
                                [0, 1])


def test_hyper_validation():
    for kw in (dict(n_trees=0), dict(max_depth=-1), dict(min_leaf=0), dict(decision_threshold=1.0)):
        with pytest.raises(ForestError):
            ForestHyper(**kw)
    assert ForestHyper().resolved_fps(20) == 5
    assert ForestHyper(features_per_split=99).resolved_fps(6) == 6


@given(st.integers(0, 100_000), st.integers(4, 30), st.integers(1, 4), st.booleans())
def test_best_split_matches_exhaustive(seed, n, min_leaf, integer_features):
    rng = np.random.default_rng(seed)
    X = rng.normal(0, 1, (n, 3))
    if integer_features:
        X = np.round(X * 2)
    y = rng.integers(0, 2, n).astype(np.int8)
    got = best_split(X, y, [0, 1, 2], min_leaf)
    want = best_split_exhaustive(X, y, min_leaf)
    if want is None or want[2] <= 1e-12:
        assert got is None
    else:
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1], abs=1e-12)
        assert got[2] == pytest.approx(want[2], abs=1e-12)


def test_depth_one_tree_uses_oracle_split():
    data = separable(3, 60)
    hyper = ForestHyper(n_trees=1, max_depth=1, min_leaf=1, features_per_split=LAYOUT.size)
    tree = grow_tree(data.X, data.y, hyper, seed=11, tree_index=0)
    rows = bootstrap_rows(11, 0, len(data))
    f, t, _ = best_split_exhaustive(data.X[rows], data.y[rows])
    assert (int(tree.feature[0]), tree.threshold[0]) == (f, pytest.approx(t, abs=1e-12))
    assert (tree.feature[1:] == -1).all()


def test_training_accuracy_on_separable_data():
    data = separable()
    model = train_forest(data, ForestHyper(n_trees=25), seed=5)
    assert (model.predict(data.X) == data.y.astype(bool)).mean() >= 0.99


def test_serialisation_deterministic_and_roundtrips():
    data = separable()
    hyper = ForestHyper(n_trees=10, max_depth=6)
    a = train_forest(data, hyper, seed=9).to_json()
    b = train_forest(data, hyper, seed=9).to_json()
    assert a == b
    assert train_forest(data, hyper, seed=10).to_json() != a
    model = ForestModel.from_json(a)
    assert model.to_json() == a
    np.testing.assert_array_equal(model.predict_proba(data.X),
                                  train_forest(data, hyper, seed=9).predict_proba(data.X))


def test_workers_do_not_change_model():
    data = separable()
    hyper = ForestHyper(n_trees=6, max_depth=4)
    assert train_forest(data, hyper, 2, workers=2).to_json() == train_forest(data, hyper, 2).to_json()


def test_from_dict_rejects_bad_documents():
    d = json.loads(train_forest(separable(), ForestHyper(n_trees=2), 0).to_json())
    with pytest.raises(ForestError):
        ForestModel.from_dict({**d, "format": "other"})
    with pytest.raises(ForestError):
        ForestModel.from_dict({**d, "version": 99})
    bad = json.loads(json.dumps(d))
    bad["trees"][0] = {"feature": 42, "threshold": 0.0, "left": {"leaf": 0.0}, "right": {"leaf": 1.0}}
    with pytest.raises(ForestError):
        ForestModel.from_dict(bad)
    bad["trees"][0] = {"leaf": 1.5}
    with pytest.raises(ForestError):
        ForestModel.from_dict(bad)


def test_predict_layout_checks():
    model = train_forest(separable(), ForestHyper(n_trees=3), 0)
    with pytest.raises(LayoutMismatch):
        model.predict_proba(np.zeros((1, 4)))
    with pytest.raises(LayoutMismatch):
        model.predict_proba(FeatureVector((0.0, 0.0), FeatureLayout((0.0,), ("m1", "m2"))))
    p = predict_proba(model, FeatureVector((0.0,) * 6, LAYOUT))
    assert p.shape == (1,) and 0 <= p[0] <= 1


def test_train_requires_both_classes():
    with pytest.raises(ForestError):
        train_forest(LabeledSet(np.zeros((4, 6)), [1, 1, 1, 1], LAYOUT))


def test_recalibrate_modes():
    data = separable()
    hyper = ForestHyper(n_trees=5)
    refit = recalibrate(hyper, data, 4)
    assert refit.to_json() == train_forest(data, hyper, 4).to_json()
    base = train_forest(separable(1), hyper, 1)
    tuned = recalibrate(hyper, data, 4, mode="threshold", base=base)
    assert tuned.trees is base.trees
    assert tuned.decision_threshold == tune_threshold(base, data)
    with pytest.raises(ForestError):
        recalibrate(hyper, data, 4, mode="threshold")
    with pytest.raises(ForestError):
        recalibrate(hyper, data, 4, mode="bogus")


def test_tune_threshold_prefers_half_on_ties():
    model = train_forest(separable(), ForestHyper(n_trees=5), 0)
    assert tune_threshold(model, separable()) == 0.5


class _ConstDetector:
    def score_patch(self, store, pos, z, model_ids):
        from zstack_mitosis.candidate import ScoreVector
        return ScoreVector(tuple(model_ids), tuple(min(1.0, abs(z) + 0.1 * i)
                                                   for i in range(len(model_ids))))


def test_assemble_features_plane_major():
    from zstack_mitosis.candidate import Candidate
    fv = assemble_features(Candidate("c", 1.0, 1.0, 0.0, 0.9), _ConstDetector(), None,
                           LAYOUT.plane_offsets, LAYOUT.model_ids)
    assert fv.layout == LAYOUT
    assert fv.values == pytest.approx((0.6, 0.7, 0.0, 0.1, 0.6, 0.7))
