# services/config.py - CONFIGURAÇÃO DO PIPELINE
"""
Configuração partilhada por todos os subcomandos.

Precedência: flag do CLI > variável de ambiente > pipeline.toml > constante do módulo

pipeline.toml (TOML):

    seed = 42
    locale = "UK"
    jobs = 1
    folds = 5
    min_prefix = 1

    [paths]
    sessions = "data/sessions.csv"
    catalog = "data/catalog.csv"
    artifacts = "data/artifacts"

    [itemcf]   # PairWeightConfig
    [graph]    # GraphConfig
    [gru]      # GruConfig
    [dcl]      # DclConfig
    [fusion]   # FusionConfig
    [gbdt]     # GbdtConfig
    [eval]     # EvalConfig

Variáveis de ambiente (também lidas de .env):
    SESSREC_ARTIFACTS_DIR, SESSREC_JOBS, SESSREC_SEED
"""

from __future__ import annotations
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv

from services.cooc_graph import GraphConfig
from services.data_model import DEFAULT_FOLDS, MIN_PREFIX
from services.errors import ConfigError
from services.fusion import FusionConfig
from services.gbdt import GbdtConfig
from services.itemcf import PairWeightConfig
from services.seq_gru import GruConfig
from services.text_dcl import DclConfig

DEFAULT_CONFIG = Path("pipeline.toml")
DEFAULT_SESSIONS = Path("data/sessions.csv")
DEFAULT_CATALOG = Path("data/catalog.csv")
DEFAULT_ARTIFACTS = Path("data/artifacts")

METRIC_K = 100
VARIANTS = ("popularity", "itemcf", "gru", "text", "fusion-nofeat", "fusion-full")


@dataclass
class EvalConfig:
    k: int = METRIC_K
    variants: tuple = VARIANTS
    dcl_ablation: bool = False

    def __post_init__(self):
        self.variants = tuple(self.variants)
        if self.k < 1:
            raise ValueError("k tem de ser >= 1")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"Variantes desconhecidas: {', '.join(sorted(unknown))}")

SECTIONS = {
    "itemcf": PairWeightConfig,
    "graph": GraphConfig,
    "gru": GruConfig,
    "dcl": DclConfig,
    "fusion": FusionConfig,
    "gbdt": GbdtConfig,
    "eval": EvalConfig,
}
TOP_LEVEL = {"seed", "locale", "jobs", "folds", "min_prefix", "paths"}
PATH_KEYS = {"sessions", "catalog", "artifacts"}


@dataclass
class PipelineConfig:
    sessions_path: Path = DEFAULT_SESSIONS
    catalog_path: Path = DEFAULT_CATALOG
    artifacts_dir: Path = DEFAULT_ARTIFACTS
    seed: int = 42
    locale: Optional[str] = None
    jobs: int = 1
    folds: int = DEFAULT_FOLDS
    min_prefix: int = MIN_PREFIX
    itemcf: PairWeightConfig = field(default_factory=PairWeightConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    gru: GruConfig = field(default_factory=GruConfig)
    dcl: DclConfig = field(default_factory=DclConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        jobs: Optional[int] = None,
        locale: Optional[str] = None,
        artifacts_dir: Optional[Union[str, Path]] = None,
    ) -> "PipelineConfig":
        cfg = replace(self)
        if artifacts_dir is not None:
            cfg.artifacts_dir = Path(artifacts_dir)
        if jobs is not None:
            if jobs < 1:
                raise ConfigError("jobs tem de ser >= 1")
            cfg.jobs = jobs
        if locale is not None:
            cfg.locale = locale
        if seed is not None:
            cfg.seed = seed
        return cfg.seeded()

    def seeded(self) -> "PipelineConfig":
        """Propaga a seed de topo para todas as secções que a usam."""
        for name in SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "seed"):
                setattr(self, name, replace(section, seed=self.seed))
        return self


def _section(name: str, values: Any):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] tem de ser uma tabela")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Chaves desconhecidas em [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] inválido: {e}") from e


def _env_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{name} tem de ser inteiro (recebido {raw!r})") from e


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """
    Lê o pipeline.toml (se existir) e aplica as variáveis de ambiente.

    Args:
        path: ficheiro explícito (tem de existir) ou None para ./pipeline.toml opcional
    """
    load_dotenv()
    data: Dict[str, Any] = {}
    source = Path(path) if path is not None else DEFAULT_CONFIG
    if source.exists():
        try:
            data = tomllib.loads(source.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{source}: {e}") from e
    elif path is not None:
        raise ConfigError(f"Ficheiro de configuração não encontrado: {source}")

    unknown = set(data) - TOP_LEVEL - set(SECTIONS)
    if unknown:
        raise ConfigError(f"Chaves desconhecidas: {', '.join(sorted(unknown))}")

    cfg = PipelineConfig()
    paths = data.get("paths", {})
    if set(paths) - PATH_KEYS:
        raise ConfigError(f"Chaves desconhecidas em [paths]: {', '.join(sorted(set(paths) - PATH_KEYS))}")
    cfg.sessions_path = Path(paths.get("sessions", cfg.sessions_path))
    cfg.catalog_path = Path(paths.get("catalog", cfg.catalog_path))
    cfg.artifacts_dir = Path(paths.get("artifacts", cfg.artifacts_dir))

    for key in ("seed", "jobs", "folds", "min_prefix"):
        if key in data:
            if not isinstance(data[key], int) or isinstance(data[key], bool):
                raise ConfigError(f"{key} tem de ser inteiro")
            setattr(cfg, key, data[key])
    if "locale" in data:
        cfg.locale = str(data["locale"]) or None
    for name in SECTIONS:
        if name in data:
            setattr(cfg, name, _section(name, data[name]))

    env_dir = os.getenv("SESSREC_ARTIFACTS_DIR")
    if env_dir:
        cfg.artifacts_dir = Path(env_dir)
    env_jobs, env_seed = _env_int("SESSREC_JOBS"), _env_int("SESSREC_SEED")
    if env_jobs is not None:
        cfg.jobs = env_jobs
    if env_seed is not None:
        cfg.seed = env_seed

    if cfg.jobs < 1 or cfg.folds < 2 or cfg.min_prefix < 1:
        raise ConfigError("jobs >= 1, folds >= 2 e min_prefix >= 1")
    return cfg.seeded()
