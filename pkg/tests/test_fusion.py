# tests/test_fusion.py
import numpy as np
import pandas as pd
import pytest

from services.candidates import CandidateList
from services.fusion import (
    BASIC_FEATURES,
    FULL_FEATURES,
    FusionConfig,
    RANK_SENTINEL,
    assemble_features,
    build_feature_frame,
    build_training_rows,
    fuse_scores,
    graph_lookup,
    load_rows,
    normalize_scores,
    rerank,
    save_rows,
)
from services.gbdt import GbdtModel, Tree
from tests.conftest import make_session

FLOOR = 0.01


def _raw_for(target: float, floor: float = FLOOR) -> float:
    """Score bruto que normaliza para `target` numa lista com extremos 1 e 0."""
    return (target - floor) / (1 - floor)


def _list(source, entries, sid="s"):
    return CandidateList(sid, entries, source)


# --------------------
# Fusão
# --------------------
def test_product_of_normalized_scores():
    lists = [
        _list("itemcf", [("top", 1.0), ("x", _raw_for(0.5)), ("low", 0.0)]),
        _list("gru", [("top", 1.0), ("x", _raw_for(0.4)), ("low", 0.0)]),
        _list("text", [("top", 1.0), ("x", _raw_for(0.2)), ("low", 0.0)]),
    ]
    fused = fuse_scores(lists, FLOOR)
    assert fused.scores()["x"] == pytest.approx(0.04)
    assert fused.source == "fused"


def test_item_in_one_list_only_gets_floor_twice():
    lists = [
        _list("itemcf", [("a", 2.0), ("b", 1.0), ("c", 0.0)]),
        _list("gru", [("z", 3.0)]),
        _list("text", [("y", 0.5)]),
    ]
    fused = fuse_scores(lists, FLOOR)
    norm_b = normalize_scores(lists[0], FLOOR)["b"]
    assert fused.scores()["b"] == pytest.approx(norm_b * FLOOR * FLOOR)


def test_identical_single_item_lists():
    lists = [_list(src, [("a", v)]) for src, v in (("itemcf", 7.0), ("gru", -2.0), ("text", 0.3))]
    assert fuse_scores(lists).entries == [("a", 1.0)]


def test_all_empty_lists():
    assert len(fuse_scores([_list(s, []) for s in ("itemcf", "gru", "text")])) == 0


def test_mismatched_sessions_rejected():
    with pytest.raises(ValueError):
        fuse_scores([_list("itemcf", [("a", 1.0)], "s1"), _list("gru", [("a", 1.0)], "s2")])


def test_fusion_properties_on_random_lists():
    rng = np.random.default_rng(0)
    pool = [f"i{k}" for k in range(300)]
    for _ in range(20):
        lists = []
        for src in ("itemcf", "gru", "text"):
            items = rng.choice(pool, size=int(rng.integers(0, 150)), replace=False)
            scores = np.sort(rng.normal(size=len(items)))[::-1]
            lists.append(_list(src, list(zip(items, scores))))
        fused = fuse_scores(lists, FLOOR, cut=120)
        universe = set().union(*(cl.item_ids for cl in lists))
        assert set(fused.item_ids) <= universe
        assert len(fused) <= 120
        assert all(0.0 < s <= 1.0 for _, s in fused.entries)


def test_normalization_is_rank_preserving():
    cl = _list("gru", [("a", 9.0), ("b", 4.0), ("c", 4.0), ("d", -1.0)])
    norm = normalize_scores(cl, FLOOR)
    values = [norm[i] for i in cl.item_ids]
    assert values == sorted(values, reverse=True)
    assert values[0] == 1.0
    assert values[-1] == FLOOR


# --------------------
# Features
# --------------------
def _setup(tiny_catalog):
    session = make_session("s", "a b")
    lists = {
        "itemcf": _list("itemcf", [("c", 0.9), ("d", 0.5), ("e", 0.1)]),
        "gru": _list("gru", [("d", 2.0), ("c", 1.0)]),
        "text": _list("text", [("e", 0.7), ("c", 0.6), ("d", 0.2)]),
    }
    fused = fuse_scores(list(lists.values()), FLOOR)
    popularity = {"a": 4, "b": 2, "c": 10, "d": 3}
    graph = {"c": tuple(float(k) for k in range(8))}
    return session, lists, fused, popularity, graph


def test_feature_arity(tiny_catalog):
    session, lists, fused, popularity, graph = _setup(tiny_catalog)
    for item in fused.item_ids:
        full = assemble_features(item, session, tiny_catalog, popularity, graph, lists, fused)
        basic = assemble_features(item, session, tiny_catalog, popularity, graph, lists, fused, feature_set="basic")
        assert len(full) == len(FULL_FEATURES)
        assert len(basic) == len(BASIC_FEATURES)
        assert np.all(np.isfinite(full))


def test_session_mean_popularity(tiny_catalog):
    session, lists, fused, popularity, graph = _setup(tiny_catalog)
    row = dict(zip(FULL_FEATURES, assemble_features("c", session, tiny_catalog, popularity, graph, lists, fused)))
    assert row["session_mean_pop"] == 3.0
    assert row["session_avg_price"] == pytest.approx((10.0 + 2.5) / 2)
    assert row["session_len"] == 2.0
    assert row["item_view_freq"] == 10.0
    assert row["pagerank"] == 0.0
    assert row["edge_std"] == 7.0
    assert row["has_graph"] == 1.0


def test_missing_from_gru_uses_sentinel(tiny_catalog):
    session, lists, fused, popularity, graph = _setup(tiny_catalog)
    row = dict(zip(FULL_FEATURES, assemble_features("e", session, tiny_catalog, popularity, graph, lists, fused)))
    assert row["rank_gru"] == RANK_SENTINEL == 121
    assert row["has_gru"] == 0.0
    assert row["norm_gru"] == 0.0
    assert row["rank_text"] == 1.0
    assert row["has_graph"] == 0.0


def test_top_candidate_sort_order_is_zero(tiny_catalog):
    session, lists, fused, popularity, graph = _setup(tiny_catalog)
    X = build_feature_frame(session, fused, lists, tiny_catalog, popularity, graph)
    assert X.shape == (len(fused), len(FULL_FEATURES))
    assert X[0, FULL_FEATURES.index("sort_order")] == 0.0
    assert X[:, FULL_FEATURES.index("sort_order")].tolist() == list(range(len(fused)))


def test_missing_price_flag(tiny_catalog):
    session = make_session("s", "d")
    lists = {"itemcf": _list("itemcf", [("e", 1.0)]), "gru": _list("gru", []), "text": _list("text", [])}
    fused = fuse_scores(list(lists.values()))
    row = dict(zip(FULL_FEATURES, assemble_features("e", session, tiny_catalog, {}, {}, lists, fused)))
    assert row["has_session_price"] == 0.0
    assert row["session_avg_price"] == 0.0
    assert row["item_price"] == 7.0


def test_graph_lookup_from_frame():
    df = pd.DataFrame([["a", 0.1, 0.2, 1.0, 0.0, 0.45, 1, 0.45, 0.0]], columns=[
        "item_id", "pagerank", "degree_centrality", "katz", "betweenness",
        "edge_mean", "edge_count", "edge_max", "edge_std",
    ])
    assert graph_lookup(df) == {"a": (0.1, 0.2, 1.0, 0.0, 0.45, 1.0, 0.45, 0.0)}
    assert graph_lookup(None) == {}


# --------------------
# Linhas de treino
# --------------------
def test_training_rows_labels_and_downsampling(tiny_catalog):
    sessions = [make_session("s1", "a", "c"), make_session("s2", "a", "zz"), make_session("s3", "b")]
    retriever = {
        "itemcf": {s.session_id: _list("itemcf", [(f"n{k}", 50.0 - k) for k in range(30)] + [("c", -1.0)], s.session_id) for s in sessions},
        "gru": {},
        "text": {},
    }
    fused = {sid: fuse_scores([cl], FLOOR) for sid, cl in retriever["itemcf"].items()}
    config = FusionConfig(max_neg_per_pos=5, seed=1)
    rows = build_training_rows(sessions, fused, retriever, tiny_catalog, {"a": 1}, {}, config)

    assert set(rows["session_id"]) == {"s1"}
    assert rows["label"].sum() == 1
    assert len(rows) == 6
    assert rows.loc[rows["label"] == 1, "item_id"].tolist() == ["c"]
    assert list(rows.columns) == ["session_id", "item_id", *FULL_FEATURES, "label"]

    again = build_training_rows(sessions, fused, retriever, tiny_catalog, {"a": 1}, {}, config)
    pd.testing.assert_frame_equal(rows, again)


def test_rows_round_trip(tiny_catalog, tmp_path):
    session, lists, fused, popularity, graph = _setup(tiny_catalog)
    labeled = make_session("s", "a b", "d")
    rows = build_training_rows([labeled], {"s": fused}, {k: {"s": v} for k, v in lists.items()}, tiny_catalog, popularity, graph)
    save_rows(rows, tmp_path / "rows.tsv")
    pd.testing.assert_frame_equal(load_rows(tmp_path / "rows.tsv"), rows, check_dtype=False)


# --------------------
# Rerank
# --------------------
def _stump_model(n_features: int) -> GbdtModel:
    tree = Tree(feature=[0, -1, -1], threshold=[0.5, 0.0, 0.0], left=[1, -1, -1], right=[2, -1, -1], value=[0.0, -5.0, 5.0])
    return GbdtModel(base_score=0.0, learning_rate=1.0, n_features=n_features, trees=[tree])


def test_rerank_by_model_score():
    fused = _list("fused", [("a", 0.9), ("b", 0.5)])
    features = np.array([[0.0], [1.0]])
    out = rerank(fused, _stump_model(1), features, top_k=100)
    assert out.item_ids == ["b", "a"]
    assert out.source == "reranked"


def test_rerank_tie_uses_fused_score():
    fused = _list("fused", [("b", 0.5), ("a", 0.1)])
    model = GbdtModel(base_score=0.0, learning_rate=0.1, n_features=1)
    assert rerank(fused, model, np.zeros((2, 1))).item_ids == ["b", "a"]


def test_rerank_fewer_than_top_k_and_permutation():
    fused = _list("fused", [(f"i{k}", 1.0 - k / 10) for k in range(5)])
    features = np.array([[k % 2] for k in range(5)], dtype=float)
    out = rerank(fused, _stump_model(1), features, top_k=100)
    assert sorted(out.item_ids) == sorted(fused.item_ids)
    assert len(rerank(fused, _stump_model(1), features, top_k=3)) == 3


def test_rerank_feature_rows_must_align():
    with pytest.raises(ValueError):
        rerank(_list("fused", [("a", 1.0)]), _stump_model(1), np.zeros((2, 1)))
