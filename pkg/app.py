# app.py - CLI DO PIPELINE DE RECOMENDAÇÃO POR SESSÃO

# ═══════════════════════════════════════════════════════════════
#                           IMPORTS
# ═══════════════════════════════════════════════════════════════

# Standard Library
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

# Third-party
import typer
from rich.console import Console
from rich.panel import Panel

# Services - Dados
from services.artifacts import Artifacts, require, write_loss_trace
from services.config import VARIANTS, PipelineConfig, load_config
from services.data_model import (
    Session,
    augment_prefixes,
    catalog_by_item,
    drop_unknown_items,
    filter_locale,
    kfold_split,
    load_catalog,
    load_folds,
    load_sessions,
    save_catalog,
    save_folds,
    save_sessions,
)
from services.errors import DataInvariantError, SessRecError
from services.synthetic import generate_synthetic

# Services - Retrievers
from services.candidates import load_candidate_lists, save_candidate_lists, save_predictions
from services.cooc_graph import build_graph, graph_features, load_graph_features, save_graph_features
from services.itemcf import build_similarity, load_matrix, popularity_counts, save_matrix
from services.seq_gru import load_gru, save_gru, train_gru
from services.text_dcl import (
    build_item_index,
    load_item_index,
    load_text_encoder,
    save_item_index,
    save_text_encoder,
    train_dcl,
)

# Services - Fusão, reranker e avaliação
from services.evaluation import (
    RetrieverBundle,
    evaluate_variants,
    fuse_all,
    render_report,
    retrieve_many,
    save_report,
)
from services.fusion import FEATURE_SETS, SOURCES, build_feature_frame, build_training_rows, graph_lookup, rerank, save_rows
from services.gbdt import load_gbdt, save_gbdt, train_gbdt


# ═══════════════════════════════════════════════════════════════
#                       INICIALIZAÇÃO
# ═══════════════════════════════════════════════════════════════

app = typer.Typer(help="🛒 Recomendação por sessão: retrieval multimodal + rerank", add_completion=False)
console = Console()

_state: Dict[str, PipelineConfig] = {}


@app.callback()
def main(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Ficheiro pipeline.toml"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed global"),
    jobs: Optional[int] = typer.Option(None, "--jobs", help="Máximo de threads nas etapas paralelas"),
    locale: Optional[str] = typer.Option(None, "--locale", help="Filtra sessões e catálogo por locale"),
    artifacts: Optional[Path] = typer.Option(None, "--artifacts", help="Diretório de artefactos"),
):
    """Opções partilhadas por todos os subcomandos."""
    with _guard():
        _state["cfg"] = load_config(config).with_overrides(seed, jobs, locale, artifacts)


# ═══════════════════════════════════════════════════════════════
#                    FUNÇÕES AUXILIARES
# ═══════════════════════════════════════════════════════════════

@contextmanager
def _guard():
    """Erros do pipeline → mensagem a vermelho + exit code."""
    try:
        yield
    except SessRecError as e:
        console.print(f"[red]❌ {e}[/red]")
        raise typer.Exit(code=e.exit_code)
    except ValueError as e:
        console.print(f"[red]❌ Erro: {e}[/red]")
        raise typer.Exit(code=1)


def _cfg() -> PipelineConfig:
    return _state["cfg"]


def _paths() -> Artifacts:
    return Artifacts(_cfg().artifacts_dir).ensure()


def _catalog() -> dict:
    cfg = _cfg()
    full = load_catalog(require(_paths().catalog, "corre `ingest` primeiro"))
    return catalog_by_item(full, cfg.locale)


def _original_sessions() -> List[Session]:
    sessions = load_sessions(require(_paths().sessions, "corre `ingest` primeiro"))
    return filter_locale(sessions, _cfg().locale)


def _training_sessions(fold: Optional[int], catalog: dict) -> List[Session]:
    """Sessões aumentadas se existirem; com --fold, só as dos outros folds."""
    paths = _paths()
    source = paths.sessions_augmented if paths.sessions_augmented.exists() else paths.sessions
    sessions = filter_locale(load_sessions(require(source, "corre `ingest` primeiro")), _cfg().locale)
    if fold is not None:
        folds = load_folds(require(paths.folds, "corre `split` primeiro"))
        sessions = folds.train_sessions(sessions, fold)
    return drop_unknown_items(sessions, set(catalog))


def _target_sessions(fold: Optional[int]) -> List[Session]:
    """Sessões a pontuar: todas as originais ou a validação do fold."""
    sessions = _original_sessions()
    if fold is None:
        return sessions
    folds = load_folds(require(_paths().folds, "corre `split` primeiro"))
    return folds.validation_sessions(sessions, fold)


def _bundle(catalog: dict, sources: List[str], with_graph: bool = False) -> RetrieverBundle:
    """Carrega os modelos já treinados a partir dos artefactos."""
    paths, cfg = _paths(), _cfg()
    matrix = None
    popularity: Dict[str, int] = {}
    if "itemcf" in sources or "popularity" in sources:
        matrix = load_matrix(
            require(paths.itemcf_matrix, "corre `build-itemcf`"),
            require(paths.itemcf_popularity, "corre `build-itemcf`"),
        )
        popularity = matrix.popularity
    bundle = RetrieverBundle(catalog=catalog, popularity=popularity, matrix=matrix, text_mode=cfg.dcl.session_text_mode)
    if "gru" in sources:
        bundle.gru = load_gru(require(paths.gru_params, "corre `train-gru`"))
    if "text" in sources:
        bundle.encoder = load_text_encoder(require(paths.dcl_encoder, "corre `train-dcl`"))
        bundle.index = load_item_index(require(paths.item_index, "corre `train-dcl`"))
    if with_graph:
        bundle.graph = graph_lookup(load_graph_features(require(paths.graph_features, "corre `graph-features`")))
    return bundle


def _candidate_lists() -> Dict[str, dict]:
    paths = _paths()
    return {src: load_candidate_lists(require(paths.candidates(src), f"corre `retrieve --source {src}`")) for src in SOURCES}


def _check_coverage(lists: dict, sessions: List[Session], path: Path, stage: str) -> None:
    """Todas as sessões a pontuar têm de existir no artefacto lido."""
    missing = [s.session_id for s in sessions if s.session_id not in lists]
    if missing:
        raise DataInvariantError(
            f"{path} não cobre {len(missing)} sessões (ex.: {missing[0]}); "
            f"corre `{stage}` com o mesmo --fold"
        )


def _with_labels(sessions: List[Session]) -> List[Session]:
    """Só as sessões com próximo clique conhecido."""
    return [s for s in sessions if s.label is not None]


# ═══════════════════════════════════════════════════════════════
#                         📦 DADOS
# ═══════════════════════════════════════════════════════════════

@app.command()
def ingest(
    sessions: Optional[Path] = typer.Option(None, "--sessions", help="CSV de sessões"),
    catalog: Optional[Path] = typer.Option(None, "--catalog", help="CSV do catálogo"),
):
    """Valida sessões e catálogo e copia-os para os artefactos."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        src_sessions = require(sessions or cfg.sessions_path)
        src_catalog = require(catalog or cfg.catalog_path)
        cat = load_catalog(src_catalog)
        sess = filter_locale(load_sessions(src_sessions), cfg.locale)
        if cfg.locale:
            cat = {k: v for k, v in cat.items() if k[1] == cfg.locale}
        save_catalog(cat, paths.catalog)
        save_sessions(sess, paths.sessions)
        console.print(f"[green]✓ Ingestão: {len(sess)} sessões, {len(cat)} items[/green]")


@app.command()
def augment(min_prefix: Optional[int] = typer.Option(None, "--min-prefix", help="Prefixo mínimo")):
    """Gera sessões de treino a partir dos prefixos próprios."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        sessions = _original_sessions()
        out = augment_prefixes(sessions, min_prefix or cfg.min_prefix)
        save_sessions(out, paths.sessions_augmented)
        console.print(f"[green]✓ Augmentation: {len(sessions)} → {len(out)} sessões[/green]")


@app.command()
def split(k: Optional[int] = typer.Option(None, "--k", help="Número de folds")):
    """Partição determinística das sessões originais em K folds."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        folds = kfold_split(_original_sessions(), k or cfg.folds, cfg.seed)
        save_folds(folds, paths.folds)
        sizes = ", ".join(str(n) for n in folds.fold_sizes())
        console.print(f"[green]✓ {folds.fold_count} folds ({sizes})[/green]")


@app.command("synth-data")
def synth_data(
    sessions: int = typer.Option(5000, "--sessions", help="Número de sessões"),
    items: int = typer.Option(300, "--items", help="Número de items"),
    clusters: int = typer.Option(20, "--clusters", help="Número de clusters"),
    locale: str = typer.Option("UK", "--data-locale", help="Locale dos dados gerados"),
):
    """Gera um catálogo e sessões sintéticas (cadeia de Markov plantada)."""
    with _guard():
        cfg = _cfg()
        catalog, sess = generate_synthetic(sessions, items, clusters, locale, cfg.seed)
        save_catalog(catalog, cfg.catalog_path)
        save_sessions(sess, cfg.sessions_path)
        console.print(f"[green]✓ Dados sintéticos em {cfg.sessions_path} e {cfg.catalog_path}[/green]")


# ═══════════════════════════════════════════════════════════════
#                       🔎 RETRIEVERS
# ═══════════════════════════════════════════════════════════════

@app.command("build-itemcf")
def build_itemcf(fold: Optional[int] = typer.Option(None, "--fold", help="Treina só com os outros folds")):
    """Matriz ItemCF ponderada + contagens de popularidade."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        train = _training_sessions(fold, _catalog())
        with console.status("[cyan]A construir matriz ItemCF...[/cyan]", spinner="dots"):
            popularity = popularity_counts(train, cfg.itemcf.include_labels)
            matrix = build_similarity(train, cfg.itemcf, popularity)
        save_matrix(matrix, paths.itemcf_matrix, paths.itemcf_popularity)
        console.print(f"[green]✓ {paths.itemcf_matrix}[/green]")


@app.command("graph-features")
def graph_features_cmd():
    """PageRank, centralidades e estatísticas de arestas do grafo ItemCF."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        matrix = load_matrix(
            require(paths.itemcf_matrix, "corre `build-itemcf`"),
            require(paths.itemcf_popularity, "corre `build-itemcf`"),
        )
        with console.status("[cyan]A calcular features de grafo...[/cyan]", spinner="dots"):
            df = graph_features(build_graph(matrix), cfg.graph)
        save_graph_features(df, paths.graph_features)
        console.print(f"[green]✓ {paths.graph_features}[/green]")


@app.command("train-gru")
def train_gru_cmd(fold: Optional[int] = typer.Option(None, "--fold", help="Treina só com os outros folds")):
    """Treina o retriever GRU (sampled softmax)."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        catalog = _catalog()
        params, trace = train_gru(_training_sessions(fold, catalog), catalog, cfg.gru)
        save_gru(params, paths.gru_params)
        write_loss_trace(trace, paths.gru_loss)
        console.print(f"[green]✓ {paths.gru_params}[/green]")


@app.command("train-dcl")
def train_dcl_cmd(
    fold: Optional[int] = typer.Option(None, "--fold", help="Treina só com os outros folds"),
    lambdas: Optional[str] = typer.Option(None, "--lambdas", help="λ1,λ2,λ3,λ4 (ex.: 0.5,0.5,0,0)"),
):
    """Treina o encoder de texto (DCL) e indexa o catálogo."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        dcl_cfg = cfg.dcl
        if lambdas:
            dcl_cfg = replace(dcl_cfg, lambdas=tuple(float(x) for x in lambdas.split(",")))
        catalog = _catalog()
        encoder, trace = train_dcl(_training_sessions(fold, catalog), catalog, dcl_cfg)
        save_text_encoder(encoder, paths.dcl_encoder)
        write_loss_trace(trace, paths.dcl_loss)
        save_item_index(build_item_index(encoder, catalog), paths.item_index)
        console.print(f"[green]✓ {paths.dcl_encoder}[/green]")


@app.command()
def retrieve(
    source: str = typer.Option(..., "--source", help="itemcf | gru | text | popularity"),
    fold: Optional[int] = typer.Option(None, "--fold", help="Pontua só a validação do fold"),
    top_k: Optional[int] = typer.Option(None, "--top-k", help="Candidatos por sessão (default: corte da fusão)"),
):
    """Gera a lista de candidatos de um retriever para cada sessão."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        if source not in ("popularity", *SOURCES):
            raise ValueError(f"Fonte desconhecida: {source}")
        bundle = _bundle(_catalog(), [source])
        sessions = _target_sessions(fold)
        lists = retrieve_many(bundle, source, sessions, top_k or cfg.fusion.cut)
        out = paths.candidates(source)
        save_candidate_lists([lists[s.session_id] for s in sessions], out)
        console.print(f"[green]✓ {len(lists)} listas → {out}[/green]")


# ═══════════════════════════════════════════════════════════════
#                    🔀 FUSÃO E RERANK
# ═══════════════════════════════════════════════════════════════

@app.command()
def fuse(fold: Optional[int] = typer.Option(None, "--fold", help="Sessões de validação do fold")):
    """Produto dos scores normalizados dos três retrievers; top 120."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        lists = _candidate_lists()
        sessions = _target_sessions(fold)
        fused = fuse_all(lists, sessions, cfg.fusion.floor, cfg.fusion.cut)
        save_candidate_lists([fused[s.session_id] for s in sessions], paths.fused)
        console.print(f"[green]✓ {len(fused)} listas fundidas → {paths.fused}[/green]")


@app.command("train-reranker")
def train_reranker(fold: Optional[int] = typer.Option(None, "--fold", help="Sessões de validação do fold")):
    """Treina o GBDT com as listas fundidas rotuladas pelo próximo clique."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        catalog = _catalog()
        fused = load_candidate_lists(require(paths.fused, "corre `fuse`"))
        lists = _candidate_lists()
        bundle = _bundle(catalog, ["itemcf"], with_graph=cfg.fusion.feature_set == "full")
        sessions = _with_labels(_target_sessions(fold))

        rows = build_training_rows(sessions, fused, lists, catalog, bundle.popularity, bundle.graph, cfg.fusion)
        save_rows(rows, paths.reranker_rows)
        if rows.empty:
            raise ValueError("Sem linhas de treino: nenhuma verdade aparece nas listas fundidas")
        names = FEATURE_SETS[cfg.fusion.feature_set]
        with console.status("[cyan]A treinar GBDT...[/cyan]", spinner="dots"):
            model, trace = train_gbdt(rows[names].to_numpy(dtype=float), rows["label"].to_numpy(), cfg.gbdt)
        save_gbdt(model, paths.reranker)
        write_loss_trace(trace, paths.reranker_loss)
        console.print(f"[green]✓ {len(rows)} linhas, modelo → {paths.reranker}[/green]")


@app.command("rerank")
def rerank_cmd(fold: Optional[int] = typer.Option(None, "--fold", help="Sessões de validação do fold")):
    """Reordena as listas fundidas com o GBDT e escreve as previsões finais."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        model = load_gbdt(require(paths.reranker, "corre `train-reranker`"))
        catalog = _catalog()
        fused = load_candidate_lists(require(paths.fused, "corre `fuse`"))
        targets = _target_sessions(fold)
        _check_coverage(fused, targets, paths.fused, "fuse")
        lists = _candidate_lists()
        bundle = _bundle(catalog, ["itemcf"], with_graph=cfg.fusion.feature_set == "full")

        out = []
        for s in targets:
            fl = fused[s.session_id]
            per = {src: lists[src][s.session_id] for src in SOURCES if s.session_id in lists[src]}
            X = build_feature_frame(s, fl, per, catalog, bundle.popularity, bundle.graph, cfg.fusion.feature_set, cfg.fusion.floor)
            out.append(rerank(fl, model, X, cfg.fusion.top_k))
        save_predictions(out, paths.predictions, cfg.fusion.top_k)
        console.print(f"[green]✓ {len(out)} previsões → {paths.predictions}[/green]")


# ═══════════════════════════════════════════════════════════════
#                        📊 AVALIAÇÃO
# ═══════════════════════════════════════════════════════════════

@app.command()
def evaluate(
    variants: Optional[str] = typer.Option(None, "--variants", help=f"Lista separada por vírgulas ({', '.join(VARIANTS)})"),
    dcl_ablation: bool = typer.Option(False, "--dcl-ablation", help="Inclui a grelha de λ do retriever de texto"),
):
    """Validação cruzada MRR@100 por variante do pipeline."""
    with _guard():
        cfg, paths = _cfg(), _paths()
        chosen = [v.strip() for v in variants.split(",")] if variants else list(cfg.eval.variants)
        catalog = _catalog()
        source = paths.sessions_augmented if paths.sessions_augmented.exists() else paths.sessions
        sessions = filter_locale(load_sessions(require(source, "corre `ingest` primeiro")), cfg.locale)
        folds = load_folds(require(paths.folds, "corre `split` primeiro"))

        console.print(Panel.fit(
            f"[bold]Variantes:[/bold] {', '.join(chosen)}\n"
            f"[bold]Folds:[/bold] {folds.fold_count}   [bold]Seed:[/bold] {cfg.seed}",
            title="📊 Avaliação", border_style="cyan",
        ))
        report = evaluate_variants(chosen, folds, sessions, catalog, cfg, dcl_ablation or cfg.eval.dcl_ablation)
        console.print(render_report(report))
        save_report(report, paths.eval_report)
        console.print(f"[dim]✓ {paths.eval_report}[/dim]")


# ═══════════════════════════════════════════════════════════════
#                        🚀 ENTRY POINT
# ═══════════════════════════════════════════════════════════════

if __name__ == "__main__":
    app()
