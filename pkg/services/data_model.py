# services/data_model.py - SESSÕES, CATÁLOGO, AUGMENTATION E FOLDS
"""
Modelo de dados do sistema de recomendação por sessão.

Tipos:
- ItemMeta: registo de catálogo (título, preço, marca, outros atributos)
- Session: lista ordenada de cliques + label opcional (próximo clique)
- FoldAssignment: partição das sessões em K folds

Formatos (CSV, UTF-8, separador vírgula, aspas duplas):
- Sessões:  session_id,locale,items,label   (items separados por espaço)
- Catálogo: item_id,locale,title,price,brand,color,size,model,material,author,desc
"""

from __future__ import annotations
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd
from rich.console import Console

from services.errors import DuplicateKeyError, ParseError

console = Console()

# --------------------
# Configuração base
# --------------------
SESSION_COLUMNS = ["session_id", "locale", "items", "label"]
# Coluna extra escrita só quando há sessões de augmentation
ORIGIN_COLUMN = "origin"
CATALOG_COLUMNS = [
    "item_id", "locale", "title", "price", "brand", "color",
    "size", "model", "material", "author", "desc",
]
TEXT_FIELDS = ["title", "brand", "color", "size", "model", "material", "author", "description"]

# Sufixo dos IDs gerados por augmentation: "<id>__p<k>"
AUG_SEP = "__p"
MIN_PREFIX = 1
DEFAULT_FOLDS = 5


# --------------------
# Tipos
# --------------------
@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    locale: str
    title: Optional[str] = None
    price: Optional[float] = None
    brand: Optional[str] = None
    color: Optional[str] = None
    size: Optional[str] = None
    model: Optional[str] = None
    material: Optional[str] = None
    author: Optional[str] = None
    description: Optional[str] = None


@dataclass(frozen=True)
class Session:
    session_id: str
    locale: str
    items: Tuple[str, ...]
    label: Optional[str] = None
    origin: Optional[str] = None

    def __post_init__(self):
        if not self.items:
            raise ValueError(f"Sessão {self.session_id} sem items")
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def is_augmented(self) -> bool:
        return self.origin is not None

    @property
    def origin_id(self) -> str:
        """ID da sessão original (o próprio ID se não for augmentation)."""
        return self.origin if self.origin is not None else self.session_id


# Catálogo completo indexado por (item_id, locale)
Catalog = Dict[Tuple[str, str], ItemMeta]


@dataclass
class FoldAssignment:
    fold_count: int
    assignment: Dict[str, int] = field(default_factory=dict)
    seed: Optional[int] = None

    def fold_of(self, session: Session) -> int:
        return self.assignment[session.origin_id]

    def validation_sessions(self, sessions: Iterable[Session], fold: int) -> List[Session]:
        """Apenas sessões originais (sem augmentation) do fold."""
        return [s for s in sessions if not s.is_augmented and self.fold_of(s) == fold]

    def train_sessions(self, sessions: Iterable[Session], fold: int) -> List[Session]:
        return [s for s in sessions if self.fold_of(s) != fold]

    def fold_sizes(self) -> List[int]:
        sizes = [0] * self.fold_count
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes


# --------------------
# Utilitários de parsing
# --------------------
def _opt(value) -> Optional[str]:
    """Célula vazia ou NaN → ausente (nunca string vazia)."""
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return None
    value = str(value)
    return value if value.strip() else None


def _read_csv(path: Union[str, Path], required: List[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(str(e), line=int(match.group(1)) if match else None) from e
    except pd.errors.EmptyDataError as e:
        raise ParseError("ficheiro vazio", line=1) from e

    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ParseError(f"colunas em falta no header: {missing}", line=1)
    return df


# --------------------
# Catálogo
# --------------------
def load_catalog(path: Union[str, Path]) -> Catalog:
    """
    Carrega o catálogo de items.

    Raises:
        ParseError: linha mal formada (preço inválido, item_id vazio, ...)
        DuplicateKeyError: (item_id, locale) repetido
    """
    df = _read_csv(path, ["item_id", "locale", "title"])
    catalog: Catalog = {}

    for idx, row in enumerate(df.to_dict("records")):
        line = idx + 2  # header é a linha 1
        item_id = _opt(row.get("item_id"))
        locale = _opt(row.get("locale")) or ""
        if item_id is None:
            raise ParseError("item_id vazio", line=line)

        price = None
        raw_price = _opt(row.get("price"))
        if raw_price is not None:
            try:
                price = float(raw_price)
            except ValueError:
                raise ParseError(f"preço inválido '{raw_price}'", line=line)
            if not np.isfinite(price) or price < 0:
                raise ParseError(f"preço negativo ou não finito '{raw_price}'", line=line)

        key = (item_id, locale)
        if key in catalog:
            raise DuplicateKeyError(f"linha {line}: item duplicado {item_id} ({locale})")

        catalog[key] = ItemMeta(
            item_id=item_id,
            locale=locale,
            title=_opt(row.get("title")),
            price=price,
            brand=_opt(row.get("brand")),
            color=_opt(row.get("color")),
            size=_opt(row.get("size")),
            model=_opt(row.get("model")),
            material=_opt(row.get("material")),
            author=_opt(row.get("author")),
            description=_opt(row.get("desc")),
        )

    console.print(f"[dim]✓ Catálogo carregado: {len(catalog)} items[/dim]")
    return catalog


def save_catalog(catalog: Catalog, path: Union[str, Path]) -> None:
    rows = []
    for (_, _), meta in sorted(catalog.items()):
        rows.append({
            "item_id": meta.item_id,
            "locale": meta.locale,
            "title": meta.title or "",
            "price": repr(meta.price) if meta.price is not None else "",
            "brand": meta.brand or "",
            "color": meta.color or "",
            "size": meta.size or "",
            "model": meta.model or "",
            "material": meta.material or "",
            "author": meta.author or "",
            "desc": meta.description or "",
        })
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=CATALOG_COLUMNS).to_csv(path, index=False, encoding="utf-8")


def catalog_by_item(catalog: Catalog, locale: Optional[str] = None) -> Dict[str, ItemMeta]:
    """
    Vista item_id → ItemMeta para um locale.
    Sem locale, o primeiro registo por ordem (item_id, locale) ganha.
    """
    out: Dict[str, ItemMeta] = {}
    for (item_id, loc), meta in sorted(catalog.items()):
        if locale is not None and loc != locale:
            continue
        out.setdefault(item_id, meta)
    return out


# --------------------
# Sessões
# --------------------
def load_sessions(path: Union[str, Path]) -> List[Session]:
    """
    Carrega sessões preservando a ordem dos items.
    Items desconhecidos são aceites aqui (validados mais tarde).
    """
    df = _read_csv(path, ["session_id", "locale", "items"])
    has_label = "label" in df.columns
    has_origin = ORIGIN_COLUMN in df.columns
    sessions: List[Session] = []

    for idx, row in enumerate(df.to_dict("records")):
        line = idx + 2
        sid = _opt(row.get("session_id"))
        if sid is None:
            raise ParseError("session_id vazio", line=line)
        items = (_opt(row.get("items")) or "").split()
        if not items:
            raise ParseError(f"sessão {sid} sem items", line=line)
        label = _opt(row.get("label")) if has_label else None
        origin = _opt(row.get(ORIGIN_COLUMN)) if has_origin else None
        sessions.append(Session(sid, _opt(row.get("locale")) or "", tuple(items), label.strip() if label else None, origin))

    console.print(f"[dim]✓ {len(sessions)} sessões carregadas de {Path(path).name}[/dim]")
    return sessions


def save_sessions(sessions: Iterable[Session], path: Union[str, Path]) -> None:
    sessions = list(sessions)
    columns = list(SESSION_COLUMNS)
    if any(s.is_augmented for s in sessions):
        columns.append(ORIGIN_COLUMN)
    rows = [
        {
            "session_id": s.session_id,
            "locale": s.locale,
            "items": " ".join(s.items),
            "label": s.label or "",
            ORIGIN_COLUMN: s.origin or "",
        }
        for s in sessions
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, encoding="utf-8")


def filter_locale(sessions: Iterable[Session], locale: Optional[str]) -> List[Session]:
    if locale is None:
        return list(sessions)
    return [s for s in sessions if s.locale == locale]


def drop_unknown_items(sessions: Iterable[Session], known: Set[str]) -> List[Session]:
    """
    Remove item_ids fora do catálogo (e labels desconhecidas).
    Sessões que ficam vazias são descartadas. A contagem é reportada.
    """
    out: List[Session] = []
    dropped_items = 0
    dropped_sessions = 0

    for s in sessions:
        items = tuple(i for i in s.items if i in known)
        dropped_items += len(s.items) - len(items)
        label = s.label if (s.label is None or s.label in known) else None
        if s.label is not None and label is None:
            dropped_items += 1
        if not items:
            dropped_sessions += 1
            continue
        out.append(Session(s.session_id, s.locale, items, label, s.origin) if (items != s.items or label != s.label) else s)

    if dropped_items or dropped_sessions:
        console.print(
            f"[yellow]⚠️ Items desconhecidos removidos: {dropped_items} "
            f"(sessões descartadas: {dropped_sessions})[/yellow]"
        )
    return out


# --------------------
# Augmentation por prefixos
# --------------------
def augment_prefixes(sessions: Iterable[Session], min_prefix: int = MIN_PREFIX) -> List[Session]:
    """
    Cada prefixo próprio [i1..ik] (min_prefix <= k < n) prevê i(k+1).
    A sessão original mantém o seu ID; os prefixos recebem o sufixo __p<k>.

    Exemplo: [a,b,c] label d → ([a],b), ([a,b],c), ([a,b,c],d)
    """
    if min_prefix < 1:
        raise ValueError(f"min_prefix tem de ser >= 1 (recebido {min_prefix})")

    out: List[Session] = []
    for s in sessions:
        n = len(s.items)
        for k in range(min_prefix, n):
            out.append(Session(f"{s.session_id}{AUG_SEP}{k}", s.locale, s.items[:k], s.items[k], origin=s.origin_id))
        out.append(s)
    return out


# --------------------
# K-Fold
# --------------------
def kfold_split(sessions: Iterable[Session], k: int = DEFAULT_FOLDS, seed: int = 42) -> FoldAssignment:
    """
    Partição determinística das sessões originais em k folds.
    Sessões de augmentation seguem o fold da sessão-mãe (campo origin).
    O mapa guardado só contém IDs de sessões originais.
    """
    sessions = list(sessions)
    if k < 2:
        raise ValueError(f"k tem de ser >= 2 (recebido {k})")
    if not sessions:
        raise ValueError("Sem sessões para dividir")

    origins = sorted({s.origin_id for s in sessions})
    if k > len(origins):
        raise ValueError(f"k={k} maior que o número de sessões originais ({len(origins)})")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(origins))
    origin_fold = {origins[j]: pos % k for pos, j in enumerate(order)}

    return FoldAssignment(fold_count=k, assignment=dict(sorted(origin_fold.items())), seed=seed)


def save_folds(folds: FoldAssignment, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = {"fold_count": folds.fold_count, "seed": folds.seed, "assignment": folds.assignment}
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_folds(path: Union[str, Path]) -> FoldAssignment:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return FoldAssignment(
        fold_count=int(data["fold_count"]),
        assignment={str(k): int(v) for k, v in data["assignment"].items()},
        seed=data.get("seed"),
    )
