# tests/test_gbdt.py
import math

import numpy as np
import pytest

from services.gbdt import (
    GbdtConfig,
    GbdtModel,
    Tree,
    bin_thresholds,
    gbdt_predict,
    gbdt_predict_many,
    load_gbdt,
    save_gbdt,
    train_gbdt,
)


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def _stump(threshold: float, left: float, right: float) -> Tree:
    return Tree(feature=[0, -1, -1], threshold=[threshold, 0.0, 0.0], left=[1, -1, -1], right=[2, -1, -1], value=[0.0, left, right])


def _noisy_data(n: int = 300, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    logits = 1.5 * X[:, 0] - X[:, 1] + 0.5 * X[:, 2] * X[:, 3]
    y = (rng.random(n) < 1 / (1 + np.exp(-logits))).astype(int)
    return X, y


# --------------------
# Treino
# --------------------
def test_single_split_separates_labels():
    X = np.arange(10, dtype=float).reshape(-1, 1)
    y = (X[:, 0] > 5).astype(int)
    model, _ = train_gbdt(X, y, GbdtConfig(trees=1, depth=1))
    pred = gbdt_predict_many(model, X)
    assert pred[y == 1].min() > pred[y == 0].max()
    assert model.trees[0].threshold[0] == 5.0


def test_zero_trees_is_log_odds():
    X = np.zeros((10, 2))
    y = np.array([1, 1, 1] + [0] * 7)
    model, trace = train_gbdt(X, y, GbdtConfig(trees=0))
    assert model.base_score == pytest.approx(math.log(0.3 / 0.7))
    assert model.trees == []
    assert len(trace) == 1


def test_same_seed_same_model():
    X, y = _noisy_data()
    config = GbdtConfig(trees=15, depth=3, subsample=0.7, seed=3)
    assert train_gbdt(X, y, config)[0] == train_gbdt(X, y, config)[0]


def test_training_loss_non_increasing():
    X, y = _noisy_data(seed=4)
    _, trace = train_gbdt(X, y, GbdtConfig(trees=40, depth=4, lr=0.3))
    assert len(trace) == 41
    assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


@pytest.mark.parametrize("seed", range(50))
def test_training_loss_non_increasing_random(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(20, 200))
    X = rng.normal(size=(n, int(rng.integers(1, 6))))
    y = (rng.random(n) < 0.5).astype(int)
    y[0], y[1] = 0, 1
    config = GbdtConfig(
        trees=int(rng.integers(1, 30)),
        depth=int(rng.integers(1, 6)),
        lr=float(rng.uniform(0.05, 1.5)),
        subsample=float(rng.choice([1.0, 0.5])),
        seed=seed,
    )
    _, trace = train_gbdt(X, y, config)
    assert len(trace) == config.trees + 1
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_gbdt(np.zeros((4, 1)), [1, 1, 1, 1])


def test_non_finite_features_rejected():
    with pytest.raises(ValueError):
        train_gbdt(np.array([[1.0], [np.nan]]), [0, 1])


def test_bin_thresholds_few_and_many_values():
    assert bin_thresholds(np.array([3.0, 1.0, 2.0, 1.0]), 64).tolist() == [1.0, 2.0]
    many = bin_thresholds(np.arange(1000, dtype=float), 8)
    assert len(many) == 7


# --------------------
# Previsão
# --------------------
def test_zero_tree_model_predicts_half():
    model = GbdtModel(base_score=0.0, learning_rate=0.1, n_features=3)
    assert gbdt_predict(model, [1.0, -4.0, 9.0]) == 0.5


def test_positive_tree_increases_predictions():
    X, y = _noisy_data(50, seed=1)
    model, _ = train_gbdt(X, y, GbdtConfig(trees=5, depth=2))
    before = gbdt_predict_many(model, X)
    model.trees.append(_stump(0.0, 1.0, 1.0))
    after = gbdt_predict_many(model, X)
    assert np.all(after > before)


def test_hand_traced_stump():
    model = GbdtModel(base_score=0.5, learning_rate=0.1, n_features=1, trees=[_stump(2.5, -1.0, 2.0)])
    assert gbdt_predict(model, [1.0]) == pytest.approx(_sigmoid(0.5 - 0.1))
    assert gbdt_predict(model, [2.5]) == pytest.approx(_sigmoid(0.5 - 0.1))
    assert gbdt_predict(model, [3.0]) == pytest.approx(_sigmoid(0.5 + 0.2))


def test_arity_mismatch():
    model = GbdtModel(base_score=0.0, learning_rate=0.1, n_features=3)
    with pytest.raises(ValueError):
        gbdt_predict(model, [1.0, 2.0])


def test_predictions_in_open_interval():
    X, y = _noisy_data(100, seed=2)
    model, _ = train_gbdt(X, y, GbdtConfig(trees=20, depth=3))
    pred = gbdt_predict_many(model, X)
    assert np.all((pred > 0) & (pred < 1))


# --------------------
# Persistência
# --------------------
def test_json_round_trip_is_bit_exact(tmp_path):
    X, y = _noisy_data(80, seed=5)
    model, _ = train_gbdt(X, y, GbdtConfig(trees=10, depth=3))
    save_gbdt(model, tmp_path / "model.json")
    loaded = load_gbdt(tmp_path / "model.json")
    assert loaded == model
    assert np.array_equal(gbdt_predict_many(loaded, X), gbdt_predict_many(model, X))
