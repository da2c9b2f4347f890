# services/fusion.py - FUSÃO DE CANDIDATOS E FEATURES DO RERANKER
"""
Fusão dos três retrievers e engenharia de features para o reranker.

Fusão:
    score normalizado por retriever (min-max para [floor, 1], ausente = floor)
    fused = produto dos três scores normalizados; corte nos top 120

Features (ordem fixa, ver FEATURE_NAMES):
- fusão: fused_score, scores normalizados, ranks (ausente = 121), presença
- hot: frequência de visualização e preço do candidato
- sessão: popularidade média, preço médio, comprimento
- grafo: as 8 métricas de cooc_graph
- sort order do candidato na lista fundida (0 = topo)
"""

from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from rich.console import Console

from services.candidates import CandidateList, PREDICTION_TOP_K
from services.cooc_graph import FEATURE_COLUMNS as GRAPH_COLUMNS
from services.data_model import ItemMeta, Session
from services.gbdt import GbdtModel, gbdt_predict_many
from utils.ranking import min_max, top_k as _top_k

console = Console()

# --------------------
# Configuração base
# --------------------
SOURCES = ("itemcf", "gru", "text")
FLOOR = 0.01
FUSION_CUT = 120
RANK_SENTINEL = FUSION_CUT + 1
MAX_NEG_PER_POS = 20

GRAPH_METRICS = GRAPH_COLUMNS[1:]

BASIC_FEATURES = (
    ["fused_score"]
    + [f"norm_{s}" for s in SOURCES]
    + [f"rank_{s}" for s in SOURCES]
    + [f"has_{s}" for s in SOURCES]
)
FULL_FEATURES = BASIC_FEATURES + [
    "item_view_freq", "item_price", "has_item_price",
    "session_mean_pop", "session_avg_price", "has_session_price", "session_len",
    *GRAPH_METRICS, "has_graph",
    "sort_order",
]
FEATURE_SETS = {"basic": BASIC_FEATURES, "full": FULL_FEATURES}
FEATURE_NAMES = FULL_FEATURES


@dataclass
class FusionConfig:
    floor: float = FLOOR
    cut: int = FUSION_CUT
    top_k: int = PREDICTION_TOP_K
    feature_set: str = "full"
    max_neg_per_pos: int = MAX_NEG_PER_POS
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.floor < 1.0:
            raise ValueError("floor tem de estar em (0, 1)")
        if self.cut < 1 or self.top_k < 1:
            raise ValueError("cut e top_k têm de ser >= 1")
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set inválido: {self.feature_set}")


# --------------------
# Fusão
# --------------------
def normalize_scores(cl: CandidateList, floor: float = FLOOR) -> Dict[str, float]:
    """Min-max dos scores da lista para [floor, 1]. Preserva a ordem."""
    ids = cl.item_ids
    return dict(zip(ids, min_max([s for _, s in cl.entries], floor)))


def fuse_scores(lists: Sequence[CandidateList], floor: float = FLOOR, cut: int = FUSION_CUT) -> CandidateList:
    """
    Produto dos scores normalizados sobre a união dos candidatos.
    Desempate por item_id.
    """
    if not lists:
        raise ValueError("Sem listas para fundir")
    if not 0.0 < floor < 1.0:
        raise ValueError("floor tem de estar em (0, 1)")
    session_ids = {cl.session_id for cl in lists}
    if len(session_ids) != 1:
        raise ValueError(f"Listas de sessões diferentes: {sorted(session_ids)}")
    session_id = lists[0].session_id

    normalized = [normalize_scores(cl, floor) for cl in lists]
    universe = set().union(*normalized)
    if not universe:
        return CandidateList(session_id, [], "fused")

    fused = {}
    for item in universe:
        score = 1.0
        for norm in normalized:
            score *= norm.get(item, floor)
        fused[item] = score
    return CandidateList(session_id, _top_k(fused, cut), "fused")


# --------------------
# Features
# --------------------
def graph_lookup(df: Optional[pd.DataFrame]) -> Dict[str, Tuple[float, ...]]:
    """Tabela de features de grafo → item → 8 métricas."""
    if df is None or df.empty:
        return {}
    values = df[GRAPH_METRICS].to_numpy(dtype=float)
    return {item: tuple(row) for item, row in zip(df["item_id"].astype(str), values)}


@dataclass
class SessionFeatures:
    """Valores por sessão partilhados por todos os candidatos."""
    mean_pop: float
    avg_price: float
    has_price: float
    length: float
    normalized: Dict[str, Dict[str, float]]
    ranks: Dict[str, Dict[str, int]]
    sort_order: Dict[str, int]


def session_features(
    session: Session,
    fused: CandidateList,
    retriever_lists: Mapping[str, CandidateList],
    catalog: Dict[str, ItemMeta],
    popularity: Dict[str, int],
    floor: float = FLOOR,
) -> SessionFeatures:
    known = [i for i in session.items if i in catalog]
    pops = [popularity.get(i, 0) for i in known]
    prices = [catalog[i].price for i in known if catalog[i].price is not None]
    empty = CandidateList(session.session_id, [], "")
    return SessionFeatures(
        mean_pop=float(np.mean(pops)) if pops else 0.0,
        avg_price=float(np.mean(prices)) if prices else 0.0,
        has_price=1.0 if prices else 0.0,
        length=float(len(session.items)),
        normalized={s: normalize_scores(retriever_lists.get(s, empty), floor) for s in SOURCES},
        ranks={s: retriever_lists.get(s, empty).ranks() for s in SOURCES},
        sort_order={item: pos for pos, item in enumerate(fused.item_ids)},
    )


def assemble_features(
    candidate: str,
    session: Session,
    catalog: Dict[str, ItemMeta],
    popularity: Dict[str, int],
    graph_features: Dict[str, Tuple[float, ...]],
    retriever_scores: Mapping[str, CandidateList],
    fused: CandidateList,
    feature_set: str = "full",
    ctx: Optional[SessionFeatures] = None,
    floor: float = FLOOR,
) -> List[float]:
    """Vetor de features de um candidato, na ordem de FEATURE_SETS[feature_set]."""
    if candidate not in fused.scores():
        raise KeyError(candidate)
    if ctx is None:
        ctx = session_features(session, fused, retriever_scores, catalog, popularity, floor)

    row = [fused.scores()[candidate]]
    row += [ctx.normalized[s].get(candidate, 0.0) for s in SOURCES]
    row += [float(ctx.ranks[s].get(candidate, RANK_SENTINEL)) for s in SOURCES]
    row += [1.0 if candidate in ctx.ranks[s] else 0.0 for s in SOURCES]
    if feature_set == "basic":
        return row

    meta = catalog.get(candidate)
    price = meta.price if meta is not None else None
    graph = graph_features.get(candidate)
    row += [
        float(popularity.get(candidate, 0)),
        float(price) if price is not None else 0.0,
        1.0 if price is not None else 0.0,
        ctx.mean_pop, ctx.avg_price, ctx.has_price, ctx.length,
    ]
    row += list(graph) if graph is not None else [0.0] * len(GRAPH_METRICS)
    row += [1.0 if graph is not None else 0.0, float(ctx.sort_order[candidate])]
    return row


def build_feature_frame(
    session: Session,
    fused: CandidateList,
    retriever_lists: Mapping[str, CandidateList],
    catalog: Dict[str, ItemMeta],
    popularity: Dict[str, int],
    graph_features: Dict[str, Tuple[float, ...]],
    feature_set: str = "full",
    floor: float = FLOOR,
) -> np.ndarray:
    """Matriz (len(fused), n_features) alinhada com fused.entries."""
    names = FEATURE_SETS[feature_set]
    if not len(fused):
        return np.zeros((0, len(names)))
    ctx = session_features(session, fused, retriever_lists, catalog, popularity, floor)
    return np.array([
        assemble_features(item, session, catalog, popularity, graph_features, retriever_lists, fused, feature_set, ctx, floor)
        for item in fused.item_ids
    ], dtype=float)


def build_training_rows(
    sessions: Sequence[Session],
    fused_lists: Mapping[str, CandidateList],
    retriever_lists: Mapping[str, Mapping[str, CandidateList]],
    catalog: Dict[str, ItemMeta],
    popularity: Dict[str, int],
    graph_features: Dict[str, Tuple[float, ...]],
    config: Optional[FusionConfig] = None,
) -> pd.DataFrame:
    """
    Linhas pointwise: label 1 iff candidato == próximo clique verdadeiro.
    Só entram sessões cuja verdade está na lista fundida; no máximo
    max_neg_per_pos negativos por positivo (amostragem com seed).

    Args:
        retriever_lists: source → session_id → CandidateList
    """
    config = config or FusionConfig()
    names = FEATURE_SETS[config.feature_set]
    rng = np.random.default_rng(config.seed)
    frames = []
    dropped = 0

    for s in sorted(sessions, key=lambda x: x.session_id):
        fused = fused_lists.get(s.session_id)
        if s.label is None or fused is None or s.label not in fused.scores():
            continue
        per_source = {src: lists[s.session_id] for src, lists in retriever_lists.items() if s.session_id in lists}
        X = build_feature_frame(s, fused, per_source, catalog, popularity, graph_features, config.feature_set, config.floor)
        labels = np.array([1 if item == s.label else 0 for item in fused.item_ids])

        neg = np.flatnonzero(labels == 0)
        if len(neg) > config.max_neg_per_pos:
            dropped += len(neg) - config.max_neg_per_pos
            neg = np.sort(rng.choice(neg, config.max_neg_per_pos, replace=False))
        keep = np.sort(np.concatenate([np.flatnonzero(labels == 1), neg]))

        frame = pd.DataFrame(X[keep], columns=names)
        frame.insert(0, "item_id", [fused.item_ids[i] for i in keep])
        frame.insert(0, "session_id", s.session_id)
        frame["label"] = labels[keep]
        frames.append(frame)

    if dropped:
        console.print(f"[dim]  Reranker: {dropped} negativos descartados por down-sampling[/dim]")
    if not frames:
        return pd.DataFrame(columns=["session_id", "item_id", *names, "label"])
    return pd.concat(frames, ignore_index=True)


def save_rows(rows: pd.DataFrame, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows.to_csv(path, sep="\t", index=False, float_format="%.17g")


def load_rows(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(
        path, sep="\t", dtype={"session_id": str, "item_id": str},
        float_precision="round_trip", keep_default_na=False,
    )


# --------------------
# Rerank
# --------------------
def rerank(fused: CandidateList, model: GbdtModel, features: np.ndarray, top_k: int = PREDICTION_TOP_K) -> CandidateList:
    """
    Reordena pelo score do modelo; desempate pelo fused score (desc) e item_id.

    Args:
        features: matriz alinhada com fused.entries (build_feature_frame)
    """
    if len(features) != len(fused):
        raise ValueError("Uma linha de features por candidato")
    if not len(fused):
        return CandidateList(fused.session_id, [], "reranked")
    predictions = gbdt_predict_many(model, features)
    rows = [(item, float(p), fs) for (item, fs), p in zip(fused.entries, predictions)]
    rows.sort(key=lambda r: (-r[1], -r[2], r[0]))
    return CandidateList(fused.session_id, [(item, p) for item, p, _ in rows[:top_k]], "reranked")
