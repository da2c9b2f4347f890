# services/candidates.py - LISTAS DE CANDIDATOS
"""
CandidateList: items pontuados por sessão, produzidos por cada retriever,
fundidos pela fusão e reordenados pelo reranker.

Persistência em JSONL (uma linha por sessão):
    {"session_id": ..., "source": ..., "entries": [[item_id, score], ...]}
Previsões finais:
    {"session_id": ..., "ranked_items": [...]}
"""

from __future__ import annotations
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

from services.errors import DataInvariantError

PREDICTION_TOP_K = 100


@dataclass
class CandidateList:
    session_id: str
    entries: List[Tuple[str, float]] = field(default_factory=list)
    source: str = ""

    def __post_init__(self):
        self.entries = [(str(i), float(s)) for i, s in self.entries]
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise DataInvariantError(f"Candidatos duplicados na sessão {self.session_id}")
        if any(a[1] < b[1] for a, b in zip(self.entries, self.entries[1:])):
            raise DataInvariantError(f"Candidatos fora de ordem na sessão {self.session_id}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def item_ids(self) -> List[str]:
        return [i for i, _ in self.entries]

    def scores(self) -> Dict[str, float]:
        return dict(self.entries)

    def ranks(self) -> Dict[str, int]:
        """Rank 1-based de cada item."""
        return {item: pos for pos, (item, _) in enumerate(self.entries, 1)}


# --------------------
# JSONL
# --------------------
def save_candidate_lists(lists: Iterable[CandidateList], path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for cl in lists:
            record = {"session_id": cl.session_id, "source": cl.source, "entries": [[i, s] for i, s in cl.entries]}
            f.write(json.dumps(record) + "\n")


def load_candidate_lists(path: Union[str, Path]) -> Dict[str, CandidateList]:
    out: Dict[str, CandidateList] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["session_id"]] = CandidateList(
                rec["session_id"], [(i, s) for i, s in rec["entries"]], rec.get("source", "")
            )
    return out


def save_predictions(
    lists: Iterable[CandidateList],
    path: Union[str, Path],
    top_k: Optional[int] = PREDICTION_TOP_K,
) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for cl in sorted(lists, key=lambda c: c.session_id):
            ranked = cl.item_ids[:top_k] if top_k else cl.item_ids
            f.write(json.dumps({"session_id": cl.session_id, "ranked_items": ranked}) + "\n")
