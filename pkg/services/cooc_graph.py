# services/cooc_graph.py - GRAFO DE CO-OCORRÊNCIA
"""
Grafo dirigido e pesado construído a partir da matriz ItemCF:
cada item é um nó e sim(x, y) > 0 é a aresta x → y.

Features por item (para o reranker):
- PageRank (transição pesada, nós sem saída distribuem massa uniformemente)
- degree centrality = (in + out) / (2(n-1))
- Katz:  x ← α·Aᵀx + β·1
- betweenness (Brandes, não normalizada, esqueleto sem pesos por defeito)
- média / contagem / máximo / desvio-padrão dos pesos das arestas
"""

from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd
from rich.console import Console

from services.errors import ConvergenceError
from services.itemcf import SimMatrix

console = Console()

# --------------------
# Configuração base
# --------------------
DAMPING = 0.85
TOL = 1e-10
MAX_ITER = 1000
KATZ_ALPHA = 0.005
KATZ_BETA = 1.0
EXACT_BETWEENNESS_LIMIT = 5000
BETWEENNESS_PIVOTS = 256

FEATURE_COLUMNS = [
    "item_id", "pagerank", "degree_centrality", "katz", "betweenness",
    "edge_mean", "edge_count", "edge_max", "edge_std",
]

CoocGraph = nx.DiGraph


@dataclass
class GraphConfig:
    damping: float = DAMPING
    tol: float = TOL
    max_iter: int = MAX_ITER
    katz_alpha: float = KATZ_ALPHA
    katz_beta: float = KATZ_BETA
    exact_betweenness_limit: int = EXACT_BETWEENNESS_LIMIT
    betweenness_pivots: int = BETWEENNESS_PIVOTS
    weighted_betweenness: bool = False
    edge_direction: str = "out"
    seed: int = 42


def build_graph(matrix: SimMatrix) -> CoocGraph:
    graph = nx.DiGraph()
    graph.add_nodes_from(matrix.items())
    for x, row in matrix.rows.items():
        for y, w in row.items():
            if w > 0 and x != y:
                graph.add_edge(x, y, weight=w)
    return graph


# --------------------
# Centralidades
# --------------------
def pagerank(graph: CoocGraph, damping: float = DAMPING, tol: float = TOL, max_iter: int = MAX_ITER) -> Dict[str, float]:
    """PageRank pesado. Converge quando a variação L1 < tol."""
    if not 0 < damping < 1:
        raise ValueError("damping tem de estar em (0, 1)")
    if tol <= 0:
        raise ValueError("tol tem de ser > 0")
    n = graph.number_of_nodes()
    if n == 0:
        return {}
    # networkx compara a variação L1 com n * tol
    try:
        return nx.pagerank(graph, alpha=damping, tol=tol / n, max_iter=max_iter, weight="weight")
    except nx.PowerIterationFailedConvergence as e:
        raise ConvergenceError(f"PageRank não convergiu em {max_iter} iterações") from e


def degree_centrality(graph: CoocGraph) -> Dict[str, float]:
    n = graph.number_of_nodes()
    if n <= 1:
        return {node: 0.0 for node in graph}
    scale = 1.0 / (2 * (n - 1))
    return {node: (graph.in_degree(node) + graph.out_degree(node)) * scale for node in graph}


def katz(graph: CoocGraph, alpha: float = KATZ_ALPHA, beta: float = KATZ_BETA, tol: float = TOL, max_iter: int = MAX_ITER) -> Dict[str, float]:
    n = graph.number_of_nodes()
    if n == 0:
        return {}
    try:
        return nx.katz_centrality(
            graph, alpha=alpha, beta=beta, max_iter=max_iter, tol=tol / n,
            normalized=False, weight="weight",
        )
    except nx.PowerIterationFailedConvergence as e:
        raise ConvergenceError(f"Katz não convergiu (alpha={alpha}); reduz katz_alpha") from e


def betweenness(
    graph: CoocGraph,
    weighted: bool = False,
    exact_limit: int = EXACT_BETWEENNESS_LIMIT,
    pivots: int = BETWEENNESS_PIVOTS,
    seed: int = 42,
) -> Dict[str, float]:
    """
    Brandes exato até `exact_limit` nós; acima disso, amostragem de pivôs.
    Com `weighted`, a distância de cada aresta é 1/peso.

    Na amostragem só os k pivôs servem de origem e o resultado é multiplicado
    por n/k, o que torna a estimativa não enviesada.
    """
    n = graph.number_of_nodes()
    if n == 0:
        return {}
    weight = None
    if weighted:
        graph = graph.copy()
        for _, _, data in graph.edges(data=True):
            data["distance"] = 1.0 / data["weight"]
        weight = "distance"
    if n <= exact_limit:
        return nx.betweenness_centrality(graph, normalized=False, weight=weight)

    k = min(pivots, n)
    console.print(f"[dim]  Betweenness aproximada: {k} pivôs em {n} nós[/dim]")
    nodes = sorted(graph.nodes)
    rng = np.random.default_rng(seed)
    sources = [nodes[j] for j in sorted(rng.choice(n, size=k, replace=False))]
    partial = nx.betweenness_centrality_subset(graph, sources=sources, targets=nodes, normalized=False, weight=weight)
    scale = n / k
    return {node: value * scale for node, value in partial.items()}


def centralities(
    graph: CoocGraph,
    katz_alpha: float = KATZ_ALPHA,
    katz_beta: float = KATZ_BETA,
    tol: float = TOL,
    config: GraphConfig = None,
) -> Dict[str, Tuple[float, float, float]]:
    """item → (degree_centrality, katz, betweenness)"""
    if tol <= 0:
        raise ValueError("tol tem de ser > 0")
    config = config or GraphConfig()
    deg = degree_centrality(graph)
    kz = katz(graph, katz_alpha, katz_beta, tol, config.max_iter)
    btw = betweenness(
        graph, config.weighted_betweenness, config.exact_betweenness_limit,
        config.betweenness_pivots, config.seed,
    )
    return {node: (deg[node], kz[node], btw[node]) for node in sorted(graph)}


def neighbor_edge_stats(graph: CoocGraph, item: str, direction: str = "out") -> Tuple[float, int, float, float]:
    """(média, contagem, máximo, desvio-padrão populacional) dos pesos das arestas."""
    if item not in graph:
        raise KeyError(item)
    if direction == "out":
        weights = [d["weight"] for _, _, d in graph.out_edges(item, data=True)]
    elif direction == "in":
        weights = [d["weight"] for _, _, d in graph.in_edges(item, data=True)]
    elif direction == "both":
        weights = [d["weight"] for _, _, d in graph.out_edges(item, data=True)]
        weights += [d["weight"] for _, _, d in graph.in_edges(item, data=True)]
    else:
        raise ValueError(f"direction inválida: {direction}")

    if not weights:
        return 0.0, 0, 0.0, 0.0
    w = np.asarray(weights, dtype=float)
    return float(w.mean()), len(weights), float(w.max()), float(w.std())


# --------------------
# Tabela de features
# --------------------
def graph_features(graph: CoocGraph, config: GraphConfig = None) -> pd.DataFrame:
    """Uma linha por item, colunas em FEATURE_COLUMNS, ordenada por item_id."""
    config = config or GraphConfig()
    if graph.number_of_nodes() == 0:
        return pd.DataFrame(columns=FEATURE_COLUMNS)

    pr = pagerank(graph, config.damping, config.tol, config.max_iter)
    cent = centralities(graph, config.katz_alpha, config.katz_beta, config.tol, config)

    rows = []
    for node in sorted(graph):
        deg, kz, btw = cent[node]
        mean, count, mx, std = neighbor_edge_stats(graph, node, config.edge_direction)
        rows.append([node, pr[node], deg, kz, btw, mean, count, mx, std])

    df = pd.DataFrame(rows, columns=FEATURE_COLUMNS)
    df["edge_count"] = df["edge_count"].astype(int)
    console.print(f"[dim]✓ Features de grafo: {len(df)} nós, {graph.number_of_edges()} arestas[/dim]")
    return df


def save_graph_features(df: pd.DataFrame, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    out = df[FEATURE_COLUMNS].copy()
    for col in FEATURE_COLUMNS[1:]:
        if col != "edge_count":
            out[col] = [repr(float(v)) for v in out[col]]
    out.to_csv(path, sep="\t", index=False)


def load_graph_features(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", dtype={"item_id": str}, float_precision="round_trip", keep_default_na=False)
