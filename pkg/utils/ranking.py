# utils/ranking.py
"""Helpers de ranking partilhados pelos retrievers e pela fusão."""

from __future__ import annotations
import heapq
from typing import Dict, List, Optional, Sequence, Tuple


def top_k(
    scores: Dict[str, float],
    k: int,
    secondary: Optional[Dict[str, float]] = None,
) -> List[Tuple[str, float]]:
    """
    Top-k por score descendente.

    Desempates: `secondary` descendente (se dado), depois item_id lexicográfico.
    """
    if k < 1:
        raise ValueError(f"top_k tem de ser >= 1 (recebido {k})")
    if secondary is None:
        key = lambda kv: (-kv[1], kv[0])
    else:
        key = lambda kv: (-kv[1], -secondary.get(kv[0], 0), kv[0])
    return heapq.nsmallest(k, scores.items(), key=key)


def min_max(values: Sequence[float], floor: float) -> List[float]:
    """
    Normalização min-max para [floor, 1].
    Lista degenerada (max == min) → tudo a 1.
    """
    if not values:
        return []
    lo, hi = min(values), max(values)
    if hi == lo:
        return [1.0] * len(values)
    span = hi - lo
    return [floor + (1.0 - floor) * (v - lo) / span for v in values]
