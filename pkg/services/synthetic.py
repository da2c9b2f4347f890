# services/synthetic.py - GERADOR DE DADOS SINTÉTICOS
"""
Catálogo + sessões de uma cadeia de Markov plantada.

- Items agrupados em clusters; items do mesmo cluster partilham palavras
  no título/descrição, marca, cor e uma faixa de preço
- Cada item tem um "próximo item" conhecido dentro do cluster; o campo `model`
  leva o código do próprio item e o do próximo ("c12 c40"), como num atributo
  "compatível com"
- Transição: próximo conhecido (p_next), outro item do cluster (p_cluster)
  ou um item por popularidade Zipf (resto)
- Items já vistos na sessão não se repetem
"""

from __future__ import annotations
from dataclasses import replace
from typing import List, Tuple

import numpy as np
from rich.console import Console

from services.data_model import Catalog, ItemMeta, Session

console = Console()

N_SESSIONS = 5000
N_ITEMS = 300
N_CLUSTERS = 20
MIN_LEN, MAX_LEN = 2, 11
P_NEXT = 0.5
P_CLUSTER = 0.35
ZIPF_EXPONENT = 1.1
WORDS_PER_CLUSTER = 6
COLORS = ["red", "blue", "green", "black", "white", "grey", "pink", "yellow"]
FILLER = ["classic", "premium", "new", "pack", "edition", "style", "basic", "plus"]


def generate_synthetic(
    n_sessions: int = N_SESSIONS,
    n_items: int = N_ITEMS,
    n_clusters: int = N_CLUSTERS,
    locale: str = "UK",
    seed: int = 42,
) -> Tuple[Catalog, List[Session]]:
    if n_items < 2 * n_clusters or n_clusters < 1:
        raise ValueError("São precisos pelo menos 2 items por cluster")
    if n_sessions < 1:
        raise ValueError("n_sessions tem de ser >= 1")
    rng = np.random.default_rng(seed)

    item_ids = [f"I{k:04d}" for k in range(n_items)]
    cluster = rng.permutation(np.arange(n_items) % n_clusters)
    members = {c: np.flatnonzero(cluster == c) for c in range(n_clusters)}

    # catálogo
    catalog: Catalog = {}
    for c in range(n_clusters):
        words = [f"w{c}x{j}" for j in range(WORDS_PER_CLUSTER)]
        base_price = float(rng.uniform(5, 200))
        for k in members[c]:
            title = " ".join(rng.choice(words, 3, replace=False)) + " " + str(rng.choice(FILLER))
            price = round(base_price * float(rng.uniform(0.8, 1.2)), 2)
            has_price = rng.random() < 0.9
            catalog[(item_ids[k], locale)] = ItemMeta(
                item_id=item_ids[k],
                locale=locale,
                title=title,
                price=price if has_price else None,
                brand=f"brand{c}",
                color=COLORS[c % len(COLORS)],
                description=" ".join(rng.choice(words, 4, replace=True)),
            )

    # transições plantadas
    next_item = np.empty(n_items, dtype=int)
    for c, idx in members.items():
        order = rng.permutation(idx)
        for a, b in zip(order, np.roll(order, -1)):
            next_item[a] = b
    for k in range(n_items):
        key = (item_ids[k], locale)
        catalog[key] = replace(catalog[key], model=f"c{k} c{int(next_item[k])}")

    ranks = rng.permutation(n_items) + 1
    popularity = 1.0 / ranks ** ZIPF_EXPONENT
    popularity /= popularity.sum()

    def draw_popular(seen: set) -> int:
        for _ in range(50):
            k = int(rng.choice(n_items, p=popularity))
            if k not in seen:
                return k
        free = [k for k in range(n_items) if k not in seen]
        return int(rng.choice(free))

    sessions: List[Session] = []
    for n in range(n_sessions):
        length = int(rng.integers(MIN_LEN, MAX_LEN + 1))
        current = draw_popular(set())
        seq, seen = [current], {current}
        while len(seq) < length + 1:
            u = rng.random()
            if u < P_NEXT:
                cand = int(next_item[current])
            elif u < P_NEXT + P_CLUSTER:
                cand = int(rng.choice(members[cluster[current]]))
            else:
                cand = draw_popular(seen)
            if cand in seen:
                cand = draw_popular(seen)
            seq.append(cand)
            seen.add(cand)
            current = cand
        ids = [item_ids[k] for k in seq]
        sessions.append(Session(f"S{n:06d}", locale, tuple(ids[:-1]), ids[-1]))

    console.print(f"[dim]✓ Sintético: {n_items} items, {n_clusters} clusters, {n_sessions} sessões[/dim]")
    return catalog, sessions
