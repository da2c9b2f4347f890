# services/seq_gru.py - RETRIEVER GRU COM SIDE INFO
"""
Retriever sequencial baseado em IDs.

Arquitetura:
1. Lookup partilhado dos últimos N items clicados (N = max_len, default 10)
2. Fused embedding por passo = média(item, bucket de preço, bucket de marca)
   (side info ausente não entra na média)
3. GRU de uma camada sobre a sequência fundida
4. Residual ao nível da sequência: rep = h_T + média_t(fused_t)
5. Score de um item = dot(rep, item_embedding)

Treino: sampled softmax (label vs `negatives` items uniformes), Adam por omissão
(`optimizer = "sgd"` para SGD de passo fixo), inicialização uniforme em [-0.05, 0.05] a partir da seed.
"""

from __future__ import annotations
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from rich.console import Console
from torch.nn.utils.rnn import pack_padded_sequence

from services.candidates import CandidateList
from services.data_model import ItemMeta, Session
from utils.ranking import top_k as _top_k

console = Console()

# --------------------
# Configuração base
# --------------------
DIM = 32
LEARNING_RATE = 0.01
EPOCHS = 10
BATCH_SIZE = 128
NEGATIVES = 64
MAX_LEN = 10
PRICE_BUCKETS = 16
BRAND_BUCKETS = 1024
INIT_RANGE = 0.05
OPTIMIZERS = ("adam", "sgd")
PARAMS_VERSION = 1

DTYPE = torch.float64


@dataclass
class GruConfig:
    dim: int = DIM
    lr: float = LEARNING_RATE
    epochs: int = EPOCHS
    batch: int = BATCH_SIZE
    negatives: int = NEGATIVES
    max_len: int = MAX_LEN
    price_buckets: int = PRICE_BUCKETS
    brand_buckets: int = BRAND_BUCKETS
    optimizer: str = "adam"
    seed: int = 42

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer tem de ser um de {OPTIMIZERS}: {self.optimizer!r}")


class GruParams(nn.Module):
    """
    Parâmetros do retriever: tabelas de embeddings (item, preço, marca) e GRU.
    O índice 0 da tabela de items é o vetor OOV partilhado.
    """

    def __init__(
        self,
        item_ids: Sequence[str],
        dim: int = DIM,
        price_edges: Optional[np.ndarray] = None,
        price_buckets: int = PRICE_BUCKETS,
        brand_buckets: int = BRAND_BUCKETS,
        max_len: int = MAX_LEN,
    ):
        super().__init__()
        self.item_ids = list(item_ids)
        self.item_index = {item: k + 1 for k, item in enumerate(self.item_ids)}
        self.dim = dim
        self.max_len = max_len
        self.price_buckets = price_buckets
        self.brand_buckets = brand_buckets

        self.item_embedding = nn.Embedding(len(self.item_ids) + 1, dim)
        self.price_embedding = nn.Embedding(price_buckets, dim)
        self.brand_embedding = nn.Embedding(brand_buckets, dim)
        self.gru = nn.GRU(dim, dim, num_layers=1, batch_first=True)

        edges = np.zeros(0) if price_edges is None else np.asarray(price_edges, dtype=float)
        self.register_buffer("price_edges", torch.tensor(edges, dtype=DTYPE))
        # side info por item do vocabulário (-1 = ausente), preenchida no treino
        self.register_buffer("item_price", torch.full((len(self.item_ids) + 1,), -1, dtype=torch.long))
        self.register_buffer("item_brand", torch.full((len(self.item_ids) + 1,), -1, dtype=torch.long))
        self.to(DTYPE)


class SessionBatch(NamedTuple):
    items: torch.Tensor    # (B, T) long
    price: torch.Tensor    # (B, T) long, -1 = ausente
    brand: torch.Tensor    # (B, T) long, -1 = ausente
    lengths: torch.Tensor  # (B,) long


# --------------------
# Side information
# --------------------
def price_edges_from_catalog(catalog: Dict[str, ItemMeta], buckets: int = PRICE_BUCKETS) -> np.ndarray:
    """Cortes por quantis do log(1 + preço)."""
    prices = np.array([m.price for m in catalog.values() if m.price is not None], dtype=float)
    if prices.size == 0 or buckets < 2:
        return np.zeros(0)
    qs = np.linspace(0.0, 1.0, buckets + 1)[1:-1]
    return np.quantile(np.log1p(prices), qs)


def price_bucket(price: Optional[float], params: GruParams) -> int:
    if price is None:
        return -1
    edges = params.price_edges.cpu().numpy()
    return int(np.searchsorted(edges, math.log1p(price), side="right"))


def brand_bucket(brand: Optional[str], params: GruParams) -> int:
    if not brand:
        return -1
    return zlib.crc32(brand.strip().lower().encode("utf-8")) % params.brand_buckets


def _side_indices(
    item_ids: Sequence[str],
    catalog: Optional[Dict[str, ItemMeta]],
    params: GruParams,
) -> Tuple[List[int], List[int], List[int]]:
    items, prices, brands = [], [], []
    for item in item_ids:
        idx = params.item_index.get(item, 0)
        meta = catalog.get(item) if catalog else None
        if meta is not None:
            p, b = price_bucket(meta.price, params), brand_bucket(meta.brand, params)
        elif idx:
            p, b = int(params.item_price[idx]), int(params.item_brand[idx])
        else:
            p, b = -1, -1
        items.append(idx)
        prices.append(p)
        brands.append(b)
    return items, prices, brands


def make_batch(
    sequences: Sequence[Sequence[str]],
    catalog: Optional[Dict[str, ItemMeta]],
    params: GruParams,
) -> SessionBatch:
    """Sequências truncadas à esquerda (últimos max_len) e padded à direita."""
    seqs = [list(s)[-params.max_len:] for s in sequences]
    T = max(len(s) for s in seqs)
    items = torch.zeros((len(seqs), T), dtype=torch.long)
    price = torch.full((len(seqs), T), -1, dtype=torch.long)
    brand = torch.full((len(seqs), T), -1, dtype=torch.long)
    for row, seq in enumerate(seqs):
        it, pr, br = _side_indices(seq, catalog, params)
        items[row, : len(seq)] = torch.tensor(it)
        price[row, : len(seq)] = torch.tensor(pr)
        brand[row, : len(seq)] = torch.tensor(br)
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    return SessionBatch(items, price, brand, lengths)


# --------------------
# Forward
# --------------------
def _fuse(params: GruParams, items: torch.Tensor, price: torch.Tensor, brand: torch.Tensor) -> torch.Tensor:
    has_p = (price >= 0).to(DTYPE).unsqueeze(-1)
    has_b = (brand >= 0).to(DTYPE).unsqueeze(-1)
    total = (
        params.item_embedding(items)
        + params.price_embedding(price.clamp(min=0)) * has_p
        + params.brand_embedding(brand.clamp(min=0)) * has_b
    )
    return total / (1.0 + has_p + has_b)


def fuse_embeddings(item_ids: Sequence[str], catalog: Optional[Dict[str, ItemMeta]], params: GruParams) -> torch.Tensor:
    """(T, d): um vetor fundido por item; items desconhecidos usam o vetor OOV."""
    if not item_ids:
        raise ValueError("Lista de items vazia")
    it, pr, br = _side_indices(item_ids, catalog, params)
    return _fuse(params, torch.tensor(it), torch.tensor(pr), torch.tensor(br))


def gru_forward(fused: torch.Tensor, params: GruParams) -> torch.Tensor:
    """Último estado escondido da GRU (h0 = 0)."""
    if fused.shape[0] == 0:
        raise ValueError("Sequência vazia")
    _, h = params.gru(fused.unsqueeze(0))
    return h[0, 0]


def _encode_batch(params: GruParams, batch: SessionBatch) -> torch.Tensor:
    fused = _fuse(params, batch.items, batch.price, batch.brand)
    packed = pack_padded_sequence(fused, batch.lengths, batch_first=True, enforce_sorted=False)
    _, h = params.gru(packed)
    mask = (torch.arange(fused.shape[1]).unsqueeze(0) < batch.lengths.unsqueeze(1)).to(DTYPE)
    mean = (fused * mask.unsqueeze(-1)).sum(1) / batch.lengths.to(DTYPE).unsqueeze(1)
    return h[0] + mean


def encode_session(session: Session, catalog: Optional[Dict[str, ItemMeta]], params: GruParams) -> torch.Tensor:
    """rep = gru_forward(fused) + média dos fused (residual ao nível da sequência)."""
    fused = fuse_embeddings(list(session.items)[-params.max_len:], catalog, params)
    return gru_forward(fused, params) + fused.mean(0)


# --------------------
# Treino
# --------------------
def sampled_softmax_loss(
    params: GruParams,
    batch: SessionBatch,
    labels: torch.Tensor,
    negatives: torch.Tensor,
) -> torch.Tensor:
    """
    Cross-entropy da label contra negativos amostrados.

    Args:
        labels: (B,) índices no vocabulário
        negatives: (B, K) índices no vocabulário
    """
    rep = _encode_batch(params, batch)
    pos = (rep * params.item_embedding(labels)).sum(-1, keepdim=True)
    neg = torch.einsum("bd,bkd->bk", rep, params.item_embedding(negatives))
    logits = torch.cat([pos, neg], dim=1)
    target = torch.zeros(len(labels), dtype=torch.long)
    return F.cross_entropy(logits, target)


def init_uniform(module: nn.Module, generator: torch.Generator, scale: float = INIT_RANGE) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 * scale - scale)


def build_params(catalog: Dict[str, ItemMeta], config: GruConfig) -> GruParams:
    """Vocabulário = items do catálogo (ordenados), side info pré-calculada."""
    item_ids = sorted(catalog)
    params = GruParams(
        item_ids,
        dim=config.dim,
        price_edges=price_edges_from_catalog(catalog, config.price_buckets),
        price_buckets=config.price_buckets,
        brand_buckets=config.brand_buckets,
        max_len=config.max_len,
    )
    _, prices, brands = _side_indices(item_ids, catalog, params)
    params.item_price[1:] = torch.tensor(prices, dtype=torch.long)
    params.item_brand[1:] = torch.tensor(brands, dtype=torch.long)
    return params


def make_optimizer(params: GruParams, config: GruConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params.parameters(), lr=config.lr)
    return torch.optim.Adam(params.parameters(), lr=config.lr)


def train_gru(
    sessions: Sequence[Session],
    catalog: Dict[str, ItemMeta],
    config: Optional[GruConfig] = None,
) -> Tuple[GruParams, List[float]]:
    """
    Treina o retriever GRU. Determinístico dada a seed.

    Returns:
        (params, loss média por época)
    """
    config = config or GruConfig()
    params = build_params(catalog, config)

    usable = [s for s in sessions if s.label is not None and s.label in params.item_index]
    skipped = len(sessions) - len(usable)
    if skipped:
        console.print(f"[yellow]⚠️ GRU: {skipped} sessões sem label válida ignoradas[/yellow]")
    if not usable:
        raise ValueError("Sem sessões de treino com label")

    g = torch.Generator().manual_seed(config.seed)
    init_uniform(params, g)

    data = make_batch([s.items for s in usable], catalog, params)
    labels = torch.tensor([params.item_index[s.label] for s in usable], dtype=torch.long)
    n_items = len(params.item_ids)

    optimizer = make_optimizer(params, config)
    trace: List[float] = []

    for epoch in range(config.epochs):
        perm = torch.randperm(len(usable), generator=g)
        total, count = 0.0, 0
        for start in range(0, len(usable), config.batch):
            idx = perm[start:start + config.batch]
            lengths = data.lengths[idx]
            T = int(lengths.max())
            batch = SessionBatch(data.items[idx, :T], data.price[idx, :T], data.brand[idx, :T], lengths)
            negatives = torch.randint(1, n_items + 1, (len(idx), config.negatives), generator=g)

            optimizer.zero_grad()
            loss = sampled_softmax_loss(params, batch, labels[idx], negatives)
            loss.backward()
            optimizer.step()

            total += loss.item() * len(idx)
            count += len(idx)
        trace.append(total / count)
        console.print(f"[dim]  GRU época {epoch + 1}/{config.epochs}: loss {trace[-1]:.4f}[/dim]")

    params.eval()
    return params, trace


# --------------------
# Retrieval
# --------------------
@torch.no_grad()
def retrieve_gru(
    session: Session,
    params: GruParams,
    top_k: int,
    catalog: Optional[Dict[str, ItemMeta]] = None,
) -> CandidateList:
    rep = encode_session(session, catalog, params)
    scores = (params.item_embedding.weight[1:] @ rep).tolist()
    seen = set(session.items)
    pool = {item: s for item, s in zip(params.item_ids, scores) if item not in seen}
    if not pool:
        return CandidateList(session.session_id, [], "gru")
    return CandidateList(session.session_id, _top_k(pool, top_k), "gru")


# --------------------
# Persistência
# --------------------
def save_gru(params: GruParams, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": PARAMS_VERSION,
            "dim": params.dim,
            "max_len": params.max_len,
            "price_buckets": params.price_buckets,
            "brand_buckets": params.brand_buckets,
            "item_ids": params.item_ids,
            "state_dict": params.state_dict(),
        },
        path,
    )


def load_gru(path: Union[str, Path]) -> GruParams:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != PARAMS_VERSION:
        raise ValueError(f"Versão de parâmetros GRU não suportada: {blob.get('version')}")
    params = GruParams(
        blob["item_ids"],
        dim=blob["dim"],
        price_edges=blob["state_dict"]["price_edges"].numpy(),
        price_buckets=blob["price_buckets"],
        brand_buckets=blob["brand_buckets"],
        max_len=blob["max_len"],
    )
    params.load_state_dict(blob["state_dict"])
    params.eval()
    return params
