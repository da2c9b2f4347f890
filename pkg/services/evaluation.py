# services/evaluation.py - MRR@K E PROTOCOLO DE VALIDAÇÃO CRUZADA
"""
Avaliação por folds.

Para cada fold f:
1. treina os retrievers nas sessões dos outros folds (com augmentation)
2. recupera candidatos para as sessões originais do fold f
3. funde as três listas

Depois (cross-fitting) o reranker avaliado no fold f é treinado só com
linhas dos folds ≠ f.

Variantes: popularity, itemcf, gru, text, fusion-nofeat, fusion-full
(+ variantes text:<nome> da grelha de λ com --dcl-ablation)
"""

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from rich import box
from rich.console import Console
from rich.table import Table

from services.artifacts import write_json
from services.candidates import CandidateList
from services.config import VARIANTS, PipelineConfig
from services.cooc_graph import build_graph, graph_features
from services.data_model import FoldAssignment, ItemMeta, Session, drop_unknown_items
from services.errors import DataInvariantError
from services.fusion import FEATURE_SETS, SOURCES, build_feature_frame, build_training_rows, fuse_scores, graph_lookup, rerank
from services.gbdt import GbdtModel, train_gbdt
from services.itemcf import SimMatrix, build_similarity, popularity_counts, retrieve_itemcf
from services.seq_gru import GruParams, retrieve_gru, train_gru
from services.text_dcl import ABLATION_GRID, ItemIndex, TextEncoder, build_item_index, retrieve_text, train_dcl
from utils.ranking import top_k as _top_k

console = Console()

METRIC_NAME = "MRR@100"
FEATURE_SET_OF = {"fusion-nofeat": "basic", "fusion-full": "full"}


# --------------------
# Métrica
# --------------------
def mrr_at_k(ranked: Sequence[str], truth: str, k: int) -> float:
    """1/rank (1-based) se truth está no top k, senão 0."""
    if k < 1:
        raise ValueError("k tem de ser >= 1")
    if len(set(ranked)) != len(ranked):
        raise DataInvariantError("Ranking com items duplicados")
    for pos, item in enumerate(ranked[:k], 1):
        if item == truth:
            return 1.0 / pos
    return 0.0


def mean_mrr(lists: Mapping[str, CandidateList], sessions: Sequence[Session], k: int) -> float:
    """Média sobre sessões com label; sessão sem lista conta 0."""
    labeled = [s for s in sessions if s.label is not None]
    if not labeled:
        return 0.0
    total = 0.0
    for s in labeled:
        cl = lists.get(s.session_id)
        if cl is not None:
            total += mrr_at_k(cl.item_ids, s.label, k)
    return total / len(labeled)


# --------------------
# Relatório
# --------------------
@dataclass
class VariantRow:
    variant: str
    fold_values: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_values)) if self.fold_values else 0.0


@dataclass
class EvalReport:
    metric: str = METRIC_NAME
    rows: List[VariantRow] = field(default_factory=list)
    locale: Optional[str] = None
    seed: Optional[int] = None

    def row(self, variant: str) -> VariantRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    @property
    def fold_values(self) -> List[float]:
        return self.rows[0].fold_values if self.rows else []

    @property
    def mean(self) -> float:
        return self.rows[0].mean if self.rows else 0.0

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "locale": self.locale,
            "seed": self.seed,
            "variants": [
                {"variant": r.variant, "folds": r.fold_values, "mean": r.mean}
                for r in self.rows
            ],
        }


def save_report(report: EvalReport, path: Union[str, Path]) -> None:
    write_json(report.to_json(), path)


def render_report(report: EvalReport) -> Table:
    n_folds = max((len(r.fold_values) for r in report.rows), default=0)
    title = f"CV-{report.metric}" + (f" ({report.locale})" if report.locale else "")
    table = Table(title=title, box=box.ROUNDED, show_lines=False)
    table.add_column("Variante", style="cyan")
    for f in range(n_folds):
        table.add_column(f"Fold {f}", justify="right")
    table.add_column("Média", justify="right", style="bold green")
    for r in report.rows:
        table.add_row(r.variant, *[f"{v:.4f}" for v in r.fold_values], f"{r.mean:.4f}")
    return table


# --------------------
# Retrievers
# --------------------
@dataclass
class RetrieverBundle:
    """Modelos treinados num conjunto de sessões."""
    catalog: Dict[str, ItemMeta]
    popularity: Dict[str, int]
    matrix: Optional[SimMatrix] = None
    gru: Optional[GruParams] = None
    encoder: Optional[TextEncoder] = None
    index: Optional[ItemIndex] = None
    graph: Dict[str, Tuple[float, ...]] = field(default_factory=dict)
    text_mode: str = "concat"


def train_retrievers(
    train: Sequence[Session],
    catalog: Dict[str, ItemMeta],
    config: PipelineConfig,
    sources: Sequence[str],
    with_graph: bool = False,
) -> RetrieverBundle:
    bundle = RetrieverBundle(
        catalog=catalog,
        popularity=popularity_counts(train, config.itemcf.include_labels),
        text_mode=config.dcl.session_text_mode,
    )
    if "itemcf" in sources or with_graph:
        bundle.matrix = build_similarity(train, config.itemcf, bundle.popularity)
    if with_graph:
        bundle.graph = graph_lookup(graph_features(build_graph(bundle.matrix), config.graph))
    if "gru" in sources:
        bundle.gru, _ = train_gru(train, catalog, config.gru)
    if "text" in sources:
        bundle.encoder, _ = train_dcl(train, catalog, config.dcl)
        bundle.index = build_item_index(bundle.encoder, catalog)
    return bundle


def retrieve_popularity(session: Session, popularity: Dict[str, int], top_k: int) -> CandidateList:
    seen = set(session.items)
    pool = {item: float(c) for item, c in popularity.items() if item not in seen}
    if not pool:
        return CandidateList(session.session_id, [], "popularity")
    return CandidateList(session.session_id, _top_k(pool, top_k), "popularity")


def retrieve_source(bundle: RetrieverBundle, source: str, session: Session, top_k: int) -> CandidateList:
    if source == "popularity":
        return retrieve_popularity(session, bundle.popularity, top_k)
    if source == "itemcf":
        return retrieve_itemcf(session, bundle.matrix, top_k)
    if source == "gru":
        return retrieve_gru(session, bundle.gru, top_k, bundle.catalog)
    if source == "text":
        return retrieve_text(session, bundle.encoder, bundle.index, top_k, bundle.catalog, bundle.text_mode)
    raise ValueError(f"Fonte desconhecida: {source}")


def retrieve_many(bundle: RetrieverBundle, source: str, sessions: Sequence[Session], top_k: int) -> Dict[str, CandidateList]:
    return {s.session_id: retrieve_source(bundle, source, s, top_k) for s in sessions}


def fuse_all(
    lists: Mapping[str, Mapping[str, CandidateList]],
    sessions: Sequence[Session],
    floor: float,
    cut: int,
) -> Dict[str, CandidateList]:
    """source → sid → lista  ⇒  sid → lista fundida."""
    fused = {}
    for s in sessions:
        per = [lists[src].get(s.session_id, CandidateList(s.session_id, [], src)) for src in SOURCES if src in lists]
        fused[s.session_id] = fuse_scores(per, floor, cut)
    return fused


# --------------------
# Folds
# --------------------
@dataclass
class FoldRun:
    fold: int
    validation: List[Session]
    lists: Dict[str, Dict[str, CandidateList]]
    fused: Dict[str, CandidateList]
    bundle: RetrieverBundle
    ablation: Dict[str, Dict[str, CandidateList]] = field(default_factory=dict)


def _needed_sources(variants: Sequence[str]) -> List[str]:
    needed = set()
    for v in variants:
        if v in FEATURE_SET_OF:
            needed.update(SOURCES)
        else:
            needed.add(v)
    return [s for s in ("popularity", *SOURCES) if s in needed]


def run_fold(
    fold: int,
    sessions: Sequence[Session],
    folds: FoldAssignment,
    catalog: Dict[str, ItemMeta],
    config: PipelineConfig,
    variants: Sequence[str],
    dcl_ablation: bool = False,
) -> FoldRun:
    console.print(f"[dim]→ Fold {fold}: a treinar retrievers...[/dim]")
    train = drop_unknown_items(folds.train_sessions(sessions, fold), set(catalog))
    validation = [s for s in folds.validation_sessions(sessions, fold) if s.label is not None]

    sources = _needed_sources(variants)
    fusion_needed = any(v in FEATURE_SET_OF for v in variants)
    bundle = train_retrievers(train, catalog, config, sources, with_graph="fusion-full" in variants)
    retrieve_k = max(config.eval.k, config.fusion.cut)
    lists = {src: retrieve_many(bundle, src, validation, retrieve_k) for src in sources}
    fused = fuse_all(lists, validation, config.fusion.floor, config.fusion.cut) if fusion_needed else {}

    ablation = {}
    if dcl_ablation:
        for name, lambdas in ABLATION_GRID.items():
            dcl_cfg = replace(config.dcl, lambdas=lambdas)
            encoder, _ = train_dcl(train, catalog, dcl_cfg)
            variant_bundle = replace(bundle, encoder=encoder, index=build_item_index(encoder, catalog))
            ablation[f"text:{name}"] = retrieve_many(variant_bundle, "text", validation, retrieve_k)

    console.print(f"[green]✓ Fold {fold}: {len(validation)} sessões de validação[/green]")
    return FoldRun(fold, validation, lists, fused, bundle, ablation)


def train_fold_reranker(runs: Sequence[FoldRun], fold: int, feature_set: str, config: PipelineConfig) -> Optional[GbdtModel]:
    """Reranker para o fold `fold`, treinado com as linhas dos restantes folds."""
    fusion_cfg = replace(config.fusion, feature_set=feature_set)
    frames = []
    for run in runs:
        if run.fold == fold:
            continue
        frames.append(build_training_rows(
            run.validation, run.fused, run.lists, run.bundle.catalog,
            run.bundle.popularity, run.bundle.graph, fusion_cfg,
        ))
    rows = [f for f in frames if len(f)]
    if not rows:
        console.print(f"[yellow]⚠️ Fold {fold}: sem linhas de treino para o reranker; ordem da fusão mantida[/yellow]")
        return None
    data = pd.concat(rows, ignore_index=True)
    labels = data["label"].to_numpy()
    if labels.min() == labels.max():
        console.print(f"[yellow]⚠️ Fold {fold}: reranker sem as duas classes; ordem da fusão mantida[/yellow]")
        return None
    model, _ = train_gbdt(data[FEATURE_SETS[feature_set]].to_numpy(dtype=float), labels, config.gbdt)
    return model


def rerank_run(run: FoldRun, model: Optional[GbdtModel], feature_set: str, config: PipelineConfig) -> Dict[str, CandidateList]:
    out = {}
    for s in run.validation:
        fused = run.fused[s.session_id]
        if model is None:
            out[s.session_id] = CandidateList(s.session_id, fused.entries[: config.fusion.top_k], "reranked")
            continue
        per = {src: run.lists[src][s.session_id] for src in SOURCES if src in run.lists}
        X = build_feature_frame(
            s, fused, per, run.bundle.catalog, run.bundle.popularity, run.bundle.graph,
            feature_set, config.fusion.floor,
        )
        out[s.session_id] = rerank(fused, model, X, config.fusion.top_k)
    return out


def run_folds(
    sessions: Sequence[Session],
    folds: FoldAssignment,
    catalog: Dict[str, ItemMeta],
    config: PipelineConfig,
    variants: Sequence[str],
    dcl_ablation: bool = False,
) -> List[FoldRun]:
    """Folds em paralelo (até config.jobs threads), resultados por índice de fold."""
    fold_ids = list(range(folds.fold_count))
    if config.jobs <= 1:
        return [run_fold(f, sessions, folds, catalog, config, variants, dcl_ablation) for f in fold_ids]
    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        futures = [pool.submit(run_fold, f, sessions, folds, catalog, config, variants, dcl_ablation) for f in fold_ids]
        return [fut.result() for fut in futures]


def evaluate_variants(
    variants: Sequence[str],
    folds: FoldAssignment,
    sessions: Sequence[Session],
    catalog: Dict[str, ItemMeta],
    config: PipelineConfig,
    dcl_ablation: bool = False,
) -> EvalReport:
    """
    Corre o protocolo de K folds uma vez e pontua todas as variantes pedidas.
    Sessões e catálogo já devem vir filtrados pelo locale.
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"Variante desconhecida: {', '.join(unknown)}")
    if not variants and not dcl_ablation:
        raise ValueError("Sem variantes para avaliar")

    runs = run_folds(sessions, folds, catalog, config, variants, dcl_ablation)
    k = config.eval.k
    report = EvalReport(metric=f"MRR@{k}", locale=config.locale, seed=config.seed)

    for v in variants:
        if v in FEATURE_SET_OF:
            values = []
            for run in runs:
                model = train_fold_reranker(runs, run.fold, FEATURE_SET_OF[v], config)
                values.append(mean_mrr(rerank_run(run, model, FEATURE_SET_OF[v], config), run.validation, k))
        else:
            values = [mean_mrr(run.lists[v], run.validation, k) for run in runs]
        report.rows.append(VariantRow(v, values))

    if dcl_ablation:
        for name in ABLATION_GRID:
            key = f"text:{name}"
            report.rows.append(VariantRow(key, [mean_mrr(run.ablation[key], run.validation, k) for run in runs]))
    return report


def evaluate_variant(
    variant: str,
    folds: FoldAssignment,
    sessions: Sequence[Session],
    catalog: Dict[str, ItemMeta],
    config: PipelineConfig,
) -> EvalReport:
    return evaluate_variants([variant], folds, sessions, catalog, config)
