# services/artifacts.py - ARTEFACTOS DO PIPELINE
"""
Nomes dos artefactos por etapa (sem timestamps) dentro do diretório de
artefactos, verificação de dependências e escrita de JSON e traços de loss.
"""

from __future__ import annotations
import json
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import pandas as pd

from services.errors import MissingArtifactError

SESSIONS = "sessions.csv"
CATALOG = "catalog.csv"
SESSIONS_AUGMENTED = "sessions_augmented.csv"
FOLDS = "folds.json"
ITEMCF_MATRIX = "itemcf_matrix.tsv"
ITEMCF_POPULARITY = "itemcf_popularity.tsv"
GRAPH_FEATURES = "graph_features.tsv"
GRU_PARAMS = "gru_params.pt"
GRU_LOSS = "gru_loss.csv"
DCL_ENCODER = "dcl_encoder.pt"
DCL_LOSS = "dcl_loss.csv"
ITEM_INDEX = "item_index.pt"
FUSED = "fused.jsonl"
RERANKER_ROWS = "reranker_rows.tsv"
RERANKER = "reranker.json"
RERANKER_LOSS = "reranker_loss.csv"
PREDICTIONS = "predictions.jsonl"
EVAL_REPORT = "eval_report.json"


class Artifacts:
    """Caminhos de todos os artefactos sob um diretório base."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def candidates(self, source: str) -> Path:
        return self.root / f"candidates_{source}.jsonl"

    def __getattr__(self, key: str) -> Path:
        name = globals().get(key.upper())
        if isinstance(name, str) and key.islower():
            return self.root / name
        raise AttributeError(key)

    def ensure(self) -> "Artifacts":
        self.root.mkdir(parents=True, exist_ok=True)
        return self


def require(path: Union[str, Path], hint: Optional[str] = None) -> Path:
    """Devolve o caminho se existir; caso contrário MissingArtifactError (exit 2)."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(p, hint)
    return p


def write_json(data: Any, path: Union[str, Path]) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data, indent=2, ensure_ascii=False), encoding="utf-8")


def write_loss_trace(trace: Sequence[float], path: Union[str, Path]) -> None:
    """CSV `epoch,loss` (épocas ou rondas a partir de 1)."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"epoch": range(1, len(trace) + 1), "loss": list(trace)}).to_csv(out, index=False)
