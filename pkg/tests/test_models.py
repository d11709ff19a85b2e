import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import best_root_split
from vrsniff.errors import VrsniffError
from vrsniff.evaluation import split_80_20
from vrsniff.models import (DecisionTree, Mlp, ModelSpec, RandomForest, TrainedModel, cross_validate, expand_grid,
                            grow_tree, stratified_folds, tune)
from vrsniff.models.mlp import forward, init_params, loss_and_grads


def random_dataset(seed, max_rows=50, max_features=4, n_classes=3):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_rows + 1))
    d = int(rng.integers(1, max_features + 1))
    X = rng.integers(0, 6, size=(n, d)).astype(float) + rng.choice([0.0, 0.25], size=(n, d))
    y = rng.integers(0, n_classes, n)
    return X, y


def root_split(tree):
    return None if tree.feature[0] < 0 else (int(tree.feature[0]), float(tree.threshold[0]))


# ---- tree ---------------------------------------------------------------------

def test_four_point_example():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0, 0, 1, 1])
    tree = DecisionTree().fit(X, y, 2)
    assert root_split(tree.tree) == (0, 1.5)
    assert (tree.predict(X) == y).all()


def test_single_class_gives_one_leaf():
    tree = grow_tree(np.random.default_rng(1).normal(size=(20, 3)), np.zeros(20, int), 2)
    assert tree.n_nodes == 1 and tree.prediction[0] == 0


@given(st.integers(0, 2**32 - 1))
def test_root_split_matches_exhaustive_search(seed):
    X, y = random_dataset(seed)
    assert root_split(grow_tree(X, y, 3)) == best_root_split(X.tolist(), y.tolist())


@given(st.integers(0, 2**32 - 1))
def test_leaf_counts_conserve_rows(seed):
    X, y = random_dataset(seed)
    tree = grow_tree(X, y, 3, max_depth=3)
    leaves = tree.apply(X)
    assert tree.is_leaf[leaves].all()
    assert tree.counts[tree.is_leaf].sum() == len(X)
    for leaf in np.unique(leaves):
        np.testing.assert_array_equal(tree.counts[leaf], np.bincount(y[leaves == leaf], minlength=3))


def test_depth_and_min_leaf_limits():
    X, y = random_dataset(4, max_rows=50)
    stump = grow_tree(X, y, 3, max_depth=1)
    assert stump.n_nodes <= 3
    big = grow_tree(X, y, 3, min_leaf=10)
    assert big.counts[big.is_leaf].sum(axis=1).min() >= 10 or big.n_nodes == 1


def test_empty_dataset():
    with pytest.raises(VrsniffError) as exc:
        grow_tree(np.zeros((0, 2)), np.zeros(0, int), 2)
    assert exc.value.code == "EMPTY_DATASET"


# ---- forest -------------------------------------------------------------------

def blobs(seed, n=300, d=5, k=4, spread=1.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=4.0, size=(k, d))
    y = rng.integers(0, k, n)
    return centers[y] + rng.normal(scale=spread, size=(n, d)), y


def test_degenerate_forest_equals_tree():
    X, y = blobs(1, spread=3.0)
    Xt, _ = blobs(2, spread=3.0)
    forest = RandomForest(n_trees=1, bootstrap=False, max_features=None, seed=9).fit(X, y, 4)
    tree = DecisionTree().fit(X, y, 4)
    np.testing.assert_array_equal(forest.predict(Xt), tree.predict(Xt))


@pytest.mark.parametrize("threads", [1, 4])
def test_forest_is_deterministic_across_thread_counts(threads):
    X, y = blobs(3, spread=3.0)
    a = RandomForest(n_trees=25, seed=5, threads=1).fit(X, y, 4)
    b = RandomForest(n_trees=25, seed=5, threads=threads).fit(X, y, 4)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_forest_vote_is_mode_of_tree_votes():
    X, y = blobs(4, spread=3.0)
    rows = np.random.default_rng(0).normal(scale=4.0, size=(100, 5))
    forest = RandomForest(n_trees=31, seed=1).fit(X, y, 4)
    per_tree = forest.tree_predictions(rows)
    mode = [np.bincount(col, minlength=4).argmax() for col in per_tree.T]
    np.testing.assert_array_equal(forest.predict(rows), mode)
    np.testing.assert_allclose(forest.predict_proba(rows).sum(axis=1), 1.0, atol=1e-6)


def test_unanimous_single_leaf_forest():
    X = np.random.default_rng(0).normal(size=(30, 3))
    forest = RandomForest(n_trees=7).fit(X, np.zeros(30, int), 2)
    proba = forest.predict_proba(X)
    assert (forest.predict(X) == 0).all() and (proba[:, 0] == 1.0).all()


def test_forest_beats_or_matches_tree_on_corpus(small_data):
    train, test = split_80_20(small_data, 1, "activity")
    acc = {}
    for kind, params in (("forest", {"n_trees": 60, "seed": 2}), ("tree", {})):
        model = TrainedModel.fit(train, ModelSpec(kind, params), "activity")
        acc[kind] = np.mean(model.predict(test) == test.activity)
    assert acc["forest"] >= acc["tree"]


# ---- MLP ----------------------------------------------------------------------

def test_initial_loss_of_zero_softmax_layer_is_ln2():
    X = np.random.default_rng(0).normal(size=(10, 4))
    y = np.array([0, 1] * 5)
    loss, _, _ = loss_and_grads([np.zeros((4, 2))], [np.zeros(2)], X, y, 2)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def finite_difference_check(seed, eps=1e-5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(10, 6))
    y = rng.integers(0, 3, 10)
    weights, biases = init_params((6, 8, 5, 3), rng)
    biases = [b + rng.normal(scale=0.1, size=b.shape) for b in biases]
    _, gw, gb = loss_and_grads(weights, biases, X, y, 3)
    worst = 0.0
    for params, grads in ((weights, gw), (biases, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = loss_and_grads(weights, biases, X, y, 3)[0]
                p[idx] = old - eps
                down = loss_and_grads(weights, biases, X, y, 3)[0]
                p[idx] = old
                numeric = (up - down) / (2 * eps)
                worst = max(worst, abs(numeric - g[idx]) / max(abs(numeric) + abs(g[idx]), 1e-8))
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    assert finite_difference_check(seed) < 1e-4


def test_mlp_separates_blobs():
    X, y = blobs(5, n=400, d=2, k=2, spread=0.5)
    X = (X - X.mean(0)) / X.std(0)
    model = Mlp(epochs=200, seed=0).fit(X, y, 2)
    assert np.mean(model.predict(X) == y) >= 0.99
    assert math.isfinite(model.final_loss)


def test_mlp_deterministic():
    X, y = blobs(6, n=120)
    a = Mlp(epochs=5, seed=3).fit(X, y, 4).predict_proba(X)
    b = Mlp(epochs=5, seed=3).fit(X, y, 4).predict_proba(X)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_mlp_divergence_is_reported():
    X, y = blobs(7, n=100)
    with pytest.raises(VrsniffError) as exc:
        Mlp(epochs=50, lr=1e6, seed=0).fit(X * 1e3, y, 4)
    assert exc.value.code == "NONFINITE_LOSS"


def test_forward_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    w, b = init_params((3, 4, 2), rng)
    np.testing.assert_allclose(forward(w, b, rng.normal(size=(7, 3)))[-1].sum(axis=1), 1.0)


# ---- trained model wrapper ----------------------------------------------------

@pytest.mark.parametrize("kind,params", [("tree", {}), ("forest", {"n_trees": 10, "seed": 1}),
                                         ("mlp", {"epochs": 3, "seed": 1})])
def test_model_json_round_trip(tmp_path, small_data, kind, params):
    model = TrainedModel.fit(small_data, ModelSpec(kind, params), "app")
    model.save(tmp_path / "m.json")
    back = TrainedModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.predict_proba(small_data), model.predict_proba(small_data))
    assert back.codec == model.codec


def test_model_version_mismatch(small_data):
    doc = TrainedModel.fit(small_data, ModelSpec("tree"), "app").to_json()
    doc["header"]["format_version"] = 99
    with pytest.raises(VrsniffError) as exc:
        TrainedModel.from_json(doc)
    assert exc.value.code == "BAD_MODEL_VERSION"


def test_arity_mismatch(small_data):
    from dataclasses import replace
    model = TrainedModel.fit(small_data, ModelSpec("tree"), "app")
    narrow = replace(small_data, columns=small_data.columns[:-1], X=small_data.X[:, :-1])
    with pytest.raises(VrsniffError) as exc:
        model.predict(narrow)
    assert exc.value.code == "ARITY_MISMATCH"


def test_tie_goes_to_lexicographically_first_label(small_data):
    model = TrainedModel.fit(small_data, ModelSpec("forest", {"n_trees": 2, "seed": 0}), "activity")
    proba = model.predict_proba(small_data)
    pred = model.predict(small_data)
    for p, lab in zip(proba, pred):
        top = np.flatnonzero(p == p.max())
        assert lab == model.codec.labels[top[0]]


def test_unknown_model_kind():
    with pytest.raises(VrsniffError) as exc:
        ModelSpec("svm")
    assert exc.value.code == "BAD_CONFIG"


# ---- folds and tuning ---------------------------------------------------------

def test_leave_one_out_folds():
    folds = stratified_folds(["a"] * 5 + ["b"] * 5, 10)
    assert sorted(np.bincount(folds).tolist()) == [1] * 10


@given(st.lists(st.sampled_from("abcd"), min_size=10, max_size=120), st.integers(2, 6), st.integers(0, 99))
def test_folds_partition_and_stratify(labels, k, seed):
    labels = np.array(labels, dtype=object)
    folds = stratified_folds(labels, k, seed)
    assert folds.shape == labels.shape and set(folds.tolist()) <= set(range(k))
    for c in set(labels):
        per_fold = np.bincount(folds[labels == c], minlength=k)
        assert (np.abs(per_fold - np.sum(labels == c) / k) < 1).all()
    sizes = np.bincount(folds, minlength=k)
    assert sizes.max() - sizes.min() <= 1


def test_too_few_samples_for_folds():
    with pytest.raises(VrsniffError) as exc:
        stratified_folds(["a", "b", "a"], 5)
    assert exc.value.code == "TOO_FEW_SAMPLES"


def test_cross_validate_covers_every_row(small_data):
    res = cross_validate(small_data, ModelSpec("tree"), "activity", folds=3, seed=1)
    assert len(res.reports) == 3
    assert sum(int(r.confusion_matrix.sum()) for r in res.reports) == len(small_data)
    assert 0.0 <= res.mean_accuracy <= 1.0 and res.std_accuracy >= 0.0


def test_expand_grid_order():
    assert expand_grid({"a": [1, 2], "b": ["x", "y"]}) == [
        {"a": 1, "b": "x"}, {"a": 1, "b": "y"}, {"a": 2, "b": "x"}, {"a": 2, "b": "y"}]


def test_tune_singleton_and_degenerate(small_data):
    one = tune(small_data, ModelSpec("tree"), {"max_depth": [4]}, "activity", folds=3)
    assert one.best_params == {"max_depth": 4} and len(one.table) == 1
    res = tune(small_data, ModelSpec("tree"), [{"max_depth": 1}, {"max_depth": None}], "activity", folds=3)
    assert res.best_params == {"max_depth": None}
    assert len(res.table) == 2


def test_tune_empty_grid(small_data):
    with pytest.raises(VrsniffError) as exc:
        tune(small_data, ModelSpec("tree"), [], "activity")
    assert exc.value.code == "BAD_CONFIG"
