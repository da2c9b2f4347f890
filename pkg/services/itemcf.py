# services/itemcf.py - ITEMCF PONDERADO
"""
Matriz de semelhança item→item assimétrica, ponderada por:
- distância de posição:  W_dist = 1 / (|Pos_x - Pos_y| + 1)^2
- direção:               W_dire = 1 (x antes de y) ou 1/3 (x depois de y)
- posição final:         W_pos  = 1.8 se y é o último item da sessão, senão 1
- popularidade:          divide por |x|^0.8 * |y|^0.15

sim(x, y) = Σ_sessões Σ_pares  W_dist * W_dire * W_pos / (|x|^0.8 * |y|^0.15)

A label entra na sequência como última posição (flag include_labels),
para que o boost de W_pos caia sobre o clique final "escolhido".
"""

from __future__ import annotations
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd
from rich.console import Console
from rich.progress import track

from services.candidates import CandidateList
from services.data_model import Session
from utils.ranking import top_k as _top_k

console = Console()

# --------------------
# Configuração base
# --------------------
DIST_EXPONENT = 2.0
DIRE_BACKWARD = 1.0 / 3.0
POS_LAST_BOOST = 1.8
POP_EXP_X = 0.8
POP_EXP_Y = 0.15
MAX_ROW_ENTRIES = 200


@dataclass
class PairWeightConfig:
    dist_exponent: float = DIST_EXPONENT
    dire_backward: float = DIRE_BACKWARD
    pos_last_boost: float = POS_LAST_BOOST
    pop_exp_x: float = POP_EXP_X
    pop_exp_y: float = POP_EXP_Y
    include_labels: bool = True
    max_row_entries: Optional[int] = MAX_ROW_ENTRIES

    def __post_init__(self):
        for name in ("dist_exponent", "dire_backward", "pos_last_boost", "pop_exp_x", "pop_exp_y"):
            value = float(getattr(self, name))
            if value != value or value in (float("inf"), float("-inf")):
                raise ValueError(f"{name} tem de ser finito")
        if not (0.0 <= self.pop_exp_x <= 1.0 and 0.0 <= self.pop_exp_y <= 1.0):
            raise ValueError("Expoentes de popularidade têm de estar em [0, 1]")


@dataclass
class SimMatrix:
    rows: Dict[str, Dict[str, float]] = field(default_factory=dict)
    popularity: Dict[str, int] = field(default_factory=dict)

    def get(self, x: str, y: str) -> float:
        return self.rows.get(x, {}).get(y, 0.0)

    @property
    def n_entries(self) -> int:
        return sum(len(r) for r in self.rows.values())

    def items(self) -> List[str]:
        nodes = set(self.rows)
        for row in self.rows.values():
            nodes.update(row)
        return sorted(nodes)


# --------------------
# Pesos
# --------------------
def w_dist(pos_x: int, pos_y: int, exponent: float = DIST_EXPONENT) -> float:
    return 1.0 / ((abs(pos_x - pos_y) + 1) ** exponent)


def w_dire(pos_x: int, pos_y: int, backward: float = DIRE_BACKWARD) -> float:
    if pos_x == pos_y:
        raise ValueError("w_dire indefinido para posições iguais")
    return 1.0 if pos_x < pos_y else backward


def w_pos(pos_y: int, session_len: int, boost: float = POS_LAST_BOOST) -> float:
    if not 0 <= pos_y < session_len:
        raise ValueError(f"pos_y={pos_y} fora de [0, {session_len})")
    return boost if pos_y == session_len - 1 else 1.0


# --------------------
# Popularidade
# --------------------
def popularity_counts(sessions: Iterable[Session], include_labels: bool = True) -> Dict[str, int]:
    """Ocorrências totais de cada item (items + labels)."""
    counts: Counter = Counter()
    for s in sessions:
        counts.update(s.items)
        if include_labels and s.label is not None:
            counts[s.label] += 1
    return dict(counts)


def _sequence(session: Session, include_labels: bool) -> Sequence[str]:
    if include_labels and session.label is not None:
        return session.items + (session.label,)
    return session.items


# --------------------
# Construção da matriz
# --------------------
def build_similarity(
    sessions: Iterable[Session],
    config: Optional[PairWeightConfig] = None,
    popularity: Optional[Dict[str, int]] = None,
) -> SimMatrix:
    """
    Acumula os pesos de todos os pares ordenados de posições distintas.
    O corte por linha (max_row_entries) só acontece depois da acumulação completa.
    """
    config = config or PairWeightConfig()
    sessions = list(sessions)
    if popularity is None:
        popularity = popularity_counts(sessions, config.include_labels)

    numer: Dict[str, Dict[str, float]] = {}
    for s in track(sessions, description="ItemCF...", disable=len(sessions) < 1000):
        seq = _sequence(s, config.include_labels)
        n = len(seq)
        if n < 2:
            continue
        for p, x in enumerate(seq):
            row = numer.setdefault(x, {})
            for q, y in enumerate(seq):
                if q == p or x == y:
                    continue
                w = (
                    w_dist(p, q, config.dist_exponent)
                    * w_dire(p, q, config.dire_backward)
                    * w_pos(q, n, config.pos_last_boost)
                )
                row[y] = row.get(y, 0.0) + w

    rows: Dict[str, Dict[str, float]] = {}
    for x, row in numer.items():
        if not row:
            continue
        px = popularity[x] ** config.pop_exp_x
        scored = {y: w / (px * popularity[y] ** config.pop_exp_y) for y, w in row.items()}
        if config.max_row_entries and len(scored) > config.max_row_entries:
            scored = dict(_top_k(scored, config.max_row_entries))
        rows[x] = scored

    matrix = SimMatrix(rows=rows, popularity=dict(popularity))
    console.print(f"[dim]✓ Matriz ItemCF: {len(rows)} linhas, {matrix.n_entries} entradas[/dim]")
    return matrix


# --------------------
# Retrieval
# --------------------
def retrieve_itemcf(session: Session, matrix: SimMatrix, top_k: int) -> CandidateList:
    """
    score(c) = Σ_p sim(item_p, c) / (len - p)
    Items já vistos são excluídos; desempate por popularidade e depois item_id.
    """
    if top_k < 1:
        raise ValueError("top_k tem de ser >= 1")
    seen = set(session.items)
    n = len(session.items)
    scores: Dict[str, float] = {}

    for p, item in enumerate(session.items):
        row = matrix.rows.get(item)
        if not row:
            continue
        recency = 1.0 / (n - p)
        for cand, sim in row.items():
            if cand in seen:
                continue
            scores[cand] = scores.get(cand, 0.0) + sim * recency

    if not scores:
        return CandidateList(session.session_id, [], "itemcf")
    return CandidateList(session.session_id, _top_k(scores, top_k, matrix.popularity), "itemcf")


# --------------------
# Persistência
# --------------------
def save_matrix(matrix: SimMatrix, matrix_path: Union[str, Path], popularity_path: Union[str, Path]) -> None:
    """TSV ordenado x\\ty\\tscore + TSV item\\tcount. Floats em repr (round-trip exato)."""
    records = [
        (x, y, repr(score))
        for x in sorted(matrix.rows)
        for y, score in sorted(matrix.rows[x].items())
    ]
    Path(matrix_path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records, columns=["x", "y", "score"]).to_csv(matrix_path, sep="\t", index=False)
    pd.DataFrame(sorted(matrix.popularity.items()), columns=["item", "count"]).to_csv(
        popularity_path, sep="\t", index=False
    )


def load_matrix(matrix_path: Union[str, Path], popularity_path: Union[str, Path]) -> SimMatrix:
    df = pd.read_csv(
        matrix_path, sep="\t", dtype={"x": str, "y": str}, float_precision="round_trip",
        keep_default_na=False,
    )
    pop = pd.read_csv(popularity_path, sep="\t", dtype={"item": str}, keep_default_na=False)

    rows: Dict[str, Dict[str, float]] = {}
    for x, y, score in zip(df["x"], df["y"], df["score"]):
        rows.setdefault(x, {})[y] = float(score)
    popularity = {item: int(c) for item, c in zip(pop["item"], pop["count"])}
    return SimMatrix(rows=rows, popularity=popularity)
