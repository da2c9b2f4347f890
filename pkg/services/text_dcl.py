# services/text_dcl.py - RETRIEVER DE TEXTO (DECOUPLED CONTRASTIVE LEARNING)
"""
Retriever por representação de linguagem.

- Texto de item: atributos presentes unidos por "[SEP]"
  (title, brand, color, size, model, material, author, description)
- Texto de sessão: textos dos items unidos por "[SEP]" (modo "concat")
  ou média dos vetores por item (modo "mean")
- Encoder: embeddings de tokens + um bloco de self-attention com residual,
  average pooling e normalização L2
- Encoder base + twin de momentum (EMA), duas filas FIFO de negativos
  (sequências e items)
- Loss ArcCon (margem angular m, temperatura s) em quatro direções ponderadas
  por λ1..λ4: L(xs,xt), L(xt,xs), L(xs,xs), L(xt,xt)

No fim do treino fica apenas o encoder base.
"""

from __future__ import annotations
import copy
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from rich.console import Console

from services.candidates import CandidateList
from services.data_model import TEXT_FIELDS, ItemMeta, Session
from services.errors import DataInvariantError, EmptyTextError
from utils.ranking import top_k as _top_k

console = Console()

# --------------------
# Configuração base
# --------------------
SEP = "[SEP]"
PAD_TOKEN, OOV_TOKEN = "[PAD]", "[OOV]"
PAD_ID, OOV_ID, SEP_ID = 0, 1, 2

DIM = 32
MAX_TOKENS = 128
MIN_FREQ = 2
QUEUE_SIZE = 1024
BETA = 0.999
TEMPERATURE = 20.0
MARGIN = 0.2
LAMBDAS = (0.35, 0.35, 0.15, 0.15)
EPOCHS = 5
LEARNING_RATE = 0.01
BATCH_SIZE = 32
COS_EPS = 1e-7
UNIT_TOL = 1e-6
ENCODER_VERSION = 1

DTYPE = torch.float64

# Grelha de λ reportada por `evaluate --dcl-ablation`
ABLATION_GRID: Dict[str, Tuple[float, float, float, float]] = {
    "sem-desacoplamento": (1.0, 0.0, 0.0, 0.0),
    "simetrica": (0.5, 0.5, 0.0, 0.0),
    "uniforme": (0.25, 0.25, 0.25, 0.25),
    "cross-pesada": (0.45, 0.3, 0.125, 0.125),
    "default": LAMBDAS,
}


@dataclass
class DclConfig:
    beta: float = BETA
    K: int = QUEUE_SIZE
    s: float = TEMPERATURE
    m: float = MARGIN
    lambdas: Tuple[float, float, float, float] = LAMBDAS
    dim: int = DIM
    epochs: int = EPOCHS
    lr: float = LEARNING_RATE
    batch: int = BATCH_SIZE
    max_tokens: int = MAX_TOKENS
    min_freq: int = MIN_FREQ
    session_text_mode: str = "concat"
    seed: int = 42

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta tem de estar em [0, 1]")
        if self.K < 1:
            raise ValueError("K tem de ser >= 1")
        if self.s <= 0:
            raise ValueError("s tem de ser > 0")
        if not 0.0 <= self.m < math.pi / 2:
            raise ValueError("m tem de estar em [0, π/2)")
        if len(self.lambdas) != 4 or any(x < 0 for x in self.lambdas):
            raise ValueError("lambdas: quatro pesos não negativos")
        if sum(self.lambdas) == 0:
            raise ValueError("lambdas todos a zero")
        if abs(sum(self.lambdas) - 1.0) > 1e-9:
            raise ValueError(f"lambdas têm de somar 1 (soma {sum(self.lambdas)})")
        if self.batch > self.K:
            raise ValueError("batch não pode exceder a capacidade K das filas")
        if self.session_text_mode not in ("concat", "mean"):
            raise ValueError(f"session_text_mode inválido: {self.session_text_mode}")


# --------------------
# Texto
# --------------------
def render_item_text(meta: ItemMeta) -> str:
    parts = []
    for name in TEXT_FIELDS:
        value = getattr(meta, name)
        if value is not None and str(value).strip():
            parts.append(str(value).strip())
    if not parts:
        raise EmptyTextError(f"Item {meta.item_id} sem atributos de texto")
    return SEP.join(parts)


def tokenize(text: str) -> List[str]:
    """Whitespace + separador literal [SEP]; tudo em minúsculas exceto [SEP]."""
    tokens: List[str] = []
    for k, chunk in enumerate(text.split(SEP)):
        if k:
            tokens.append(SEP)
        tokens.extend(chunk.lower().split())
    return tokens


def build_vocabulary(texts: Iterable[str], min_freq: int = MIN_FREQ) -> Dict[str, int]:
    counts = Counter(t for text in texts for t in tokenize(text) if t != SEP)
    vocab = {PAD_TOKEN: PAD_ID, OOV_TOKEN: OOV_ID, SEP: SEP_ID}
    for token, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if c >= min_freq:
            vocab[token] = len(vocab)
    return vocab


# --------------------
# Encoder
# --------------------
def _unit(x: torch.Tensor) -> torch.Tensor:
    """Normalização L2 por linha; linhas nulas viram o primeiro vetor da base."""
    norms = x.norm(dim=-1, keepdim=True)
    fallback = torch.zeros_like(x)
    fallback[..., 0] = 1.0
    safe = torch.where(norms > 1e-12, norms, torch.ones_like(norms))
    return torch.where(norms > 1e-12, x / safe, fallback)


class TextEncoder(nn.Module):
    """Embeddings de tokens + self-attention (Q, K, V, O) com residual."""

    def __init__(self, vocab: Dict[str, int], dim: int = DIM, max_tokens: int = MAX_TOKENS):
        super().__init__()
        self.vocab = dict(vocab)
        self.dim = dim
        self.max_tokens = max_tokens
        self.embedding = nn.Embedding(len(self.vocab), dim)
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.output = nn.Linear(dim, dim, bias=False)
        self.to(DTYPE)

    def token_ids(self, tokens: Sequence[str]) -> List[int]:
        ids = [self.vocab.get(t, OOV_ID) for t in tokens]
        return ids[-self.max_tokens:]

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """ids, mask: (B, T) → (B, d) unitários."""
        e = self.embedding(ids)
        scores = self.query(e) @ self.key(e).transpose(1, 2) / math.sqrt(self.dim)
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = e + self.output(attn @ self.value(e))
        m = mask.to(DTYPE).unsqueeze(-1)
        pooled = (out * m).sum(1) / m.sum(1)
        return _unit(pooled)


def init_encoder(encoder: TextEncoder, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(encoder.dim)
    with torch.no_grad():
        encoder.embedding.weight.copy_(torch.randn(encoder.embedding.weight.shape, generator=generator, dtype=DTYPE) * 0.1)
        for layer in (encoder.query, encoder.key, encoder.value, encoder.output):
            layer.weight.copy_(torch.rand(layer.weight.shape, generator=generator, dtype=DTYPE) * 2 * bound - bound)


def _pad(docs: Sequence[List[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
    T = max(len(d) for d in docs)
    ids = torch.full((len(docs), T), PAD_ID, dtype=torch.long)
    for row, d in enumerate(docs):
        ids[row, : len(d)] = torch.tensor(d, dtype=torch.long)
    lengths = torch.tensor([len(d) for d in docs])
    mask = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)
    return ids, mask


def encode_docs(encoder: TextEncoder, docs: Sequence[Sequence[str]]) -> torch.Tensor:
    """Lista de documentos já tokenizados → (B, d)."""
    ids = [encoder.token_ids(d) for d in docs]
    if any(not d for d in ids):
        raise EmptyTextError("Documento sem tokens")
    return encoder(*_pad(ids))


def _session_docs(session_items: Sequence[str], catalog: Dict[str, ItemMeta]) -> List[List[str]]:
    docs = [tokenize(render_item_text(catalog[i])) for i in session_items if i in catalog]
    if not docs:
        raise EmptyTextError("Sessão sem items com texto no catálogo")
    return docs


def _join(docs: Sequence[List[str]]) -> List[str]:
    out: List[str] = []
    for k, d in enumerate(docs):
        if k:
            out.append(SEP)
        out.extend(d)
    return out


def encode_session_batch(encoder: TextEncoder, sessions_docs: Sequence[Sequence[List[str]]], mode: str = "concat") -> torch.Tensor:
    if mode == "concat":
        return encode_docs(encoder, [_join(docs) for docs in sessions_docs])
    if mode == "mean":
        flat = [d for docs in sessions_docs for d in docs]
        segment = torch.tensor([row for row, docs in enumerate(sessions_docs) for _ in docs])
        vecs = encode_docs(encoder, flat)
        total = torch.zeros((len(sessions_docs), encoder.dim), dtype=DTYPE).index_add(0, segment, vecs)
        return _unit(total)
    raise ValueError(f"session_text_mode inválido: {mode}")


class DualEncoder:
    """Encoder base (treinado por gradiente) + twin de momentum (só EMA)."""

    def __init__(self, base: TextEncoder):
        self.base = base
        self.momentum = copy.deepcopy(base)
        for p in self.momentum.parameters():
            p.requires_grad_(False)

    def pick(self, use_momentum: bool) -> TextEncoder:
        return self.momentum if use_momentum else self.base


def _as_dual(params: Union[TextEncoder, DualEncoder]) -> DualEncoder:
    if isinstance(params, DualEncoder):
        return params
    dual = DualEncoder.__new__(DualEncoder)
    dual.base = dual.momentum = params
    return dual


def encode_text(params: Union[TextEncoder, DualEncoder], text: str, use_momentum: bool = False) -> torch.Tensor:
    tokens = tokenize(text)
    if not tokens:
        raise EmptyTextError("Texto vazio")
    encoder = _as_dual(params).pick(use_momentum)
    with torch.no_grad():
        return encode_docs(encoder, [tokens])[0]


def encode_session_text(
    params: Union[TextEncoder, DualEncoder],
    session: Session,
    catalog: Dict[str, ItemMeta],
    use_momentum: bool = False,
    mode: str = "concat",
) -> torch.Tensor:
    encoder = _as_dual(params).pick(use_momentum)
    with torch.no_grad():
        return encode_session_batch(encoder, [_session_docs(session.items, catalog)], mode)[0]


@torch.no_grad()
def momentum_update(dual: DualEncoder, beta: float) -> DualEncoder:
    """Θ_t ← β·Θ_{t-1} + (1-β)·Θ_base, tensor a tensor."""
    for pm, pb in zip(dual.momentum.parameters(), dual.base.parameters()):
        if pm.shape != pb.shape:
            raise ValueError("Formas diferentes entre base e momentum")
        pm.mul_(beta).add_(pb.detach(), alpha=1.0 - beta)
    return dual


# --------------------
# Filas de memória
# --------------------
class MemoryQueue:
    """Anel FIFO de vetores unitários."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity tem de ser >= 1")
        self.capacity = capacity
        self.dim = dim
        self._storage = torch.zeros((capacity, dim), dtype=DTYPE)
        self._ptr = 0
        self.fill = 0

    def push(self, batch: torch.Tensor) -> "MemoryQueue":
        batch = batch.detach().to(DTYPE).reshape(-1, self.dim)
        if len(batch) > self.capacity:
            raise ValueError(f"batch de {len(batch)} excede a capacidade {self.capacity}")
        norms = batch.norm(dim=1)
        if len(batch) and torch.any((norms - 1.0).abs() > UNIT_TOL):
            raise DataInvariantError("Vetor não unitário na fila de memória")
        for vec in batch:
            self._storage[self._ptr] = vec
            self._ptr = (self._ptr + 1) % self.capacity
        self.fill = min(self.capacity, self.fill + len(batch))
        return self

    def vectors(self) -> torch.Tensor:
        """Conteúdo do mais antigo para o mais recente (cópia)."""
        if self.fill < self.capacity:
            return self._storage[: self.fill].clone()
        return torch.roll(self._storage, -self._ptr, dims=0).clone()

    def __len__(self) -> int:
        return self.fill


def queue_push(queue: MemoryQueue, batch: torch.Tensor) -> MemoryQueue:
    return queue.push(batch)


# --------------------
# Losses
# --------------------
def arccon_batch_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    s: float,
    m: float,
) -> torch.Tensor:
    """
    Média no batch de -log softmax do logit positivo.
    logit_pos = s·cos(θ_pos + m), logit_neg = s·cos(θ_j).
    """
    cos_pos = (anchors * positives).sum(-1).clamp(-1.0 + COS_EPS, 1.0 - COS_EPS)
    pos = s * torch.cos(torch.acos(cos_pos) + m)
    neg = s * anchors @ negatives.T if len(negatives) else anchors.new_zeros((len(anchors), 0))
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    return -torch.log_softmax(logits, dim=1)[:, 0].mean()


def _check_unit(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if t.numel() and torch.any((t.reshape(-1, t.shape[-1]).norm(dim=1) - 1.0).abs() > UNIT_TOL):
            raise DataInvariantError("ArcCon requer vetores unitários")


def arccon_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    s: float,
    m: float,
) -> Tuple[float, torch.Tensor, torch.Tensor]:
    """
    Loss ArcCon de um par.

    Returns:
        (loss, gradiente w.r.t. anchor, gradiente w.r.t. positive)
    """
    if s <= 0:
        raise ValueError("s tem de ser > 0")
    if not 0.0 <= m < math.pi / 2:
        raise ValueError("m tem de estar em [0, π/2)")
    anchor = anchor.detach().to(DTYPE).clone().requires_grad_(True)
    positive = positive.detach().to(DTYPE).clone().requires_grad_(True)
    negatives = negatives.detach().to(DTYPE).reshape(-1, anchor.shape[-1])
    _check_unit(anchor, positive, negatives)

    loss = arccon_batch_loss(anchor.unsqueeze(0), positive.unsqueeze(0), negatives, s, m)
    grad_a, grad_p = torch.autograd.grad(loss, [anchor, positive])
    return float(loss), grad_a, grad_p


def dcl_objective(
    xs: torch.Tensor,
    xt: torch.Tensor,
    ks: torch.Tensor,
    kt: torch.Tensor,
    seq_negatives: torch.Tensor,
    item_negatives: torch.Tensor,
    config: DclConfig,
) -> torch.Tensor:
    """
    λ1·L(xs,xt) + λ2·L(xt,xs) + λ3·L(xs,xs) + λ4·L(xt,xt).
    O positivo é a codificação de momentum do input do segundo argumento;
    os negativos são a fila da modalidade desse argumento.
    """
    l1, l2, l3, l4 = config.lambdas
    if l1 == l2 == l3 == l4 == 0:
        raise ValueError("lambdas todos a zero")
    terms = [
        (l1, xs, kt, item_negatives),
        (l2, xt, ks, seq_negatives),
        (l3, xs, ks, seq_negatives),
        (l4, xt, kt, item_negatives),
    ]
    total = xs.new_zeros(())
    for weight, anchor, positive, negatives in terms:
        if weight:
            total = total + weight * arccon_batch_loss(anchor, positive, negatives, config.s, config.m)
    return total


def dcl_loss(
    batch: Sequence[Tuple[Session, str]],
    dual: DualEncoder,
    queues: Tuple[MemoryQueue, MemoryQueue],
    config: DclConfig,
    catalog: Dict[str, ItemMeta],
    push: bool = True,
) -> torch.Tensor:
    """
    Loss DCL de um batch de (sessão, item alvo).

    Args:
        queues: (fila de sequências, fila de items); têm de estar preenchidas
        push: empurra as codificações de momentum do batch depois da loss
    """
    seq_queue, item_queue = queues
    if not len(seq_queue) or not len(item_queue):
        raise ValueError("Filas vazias: faz warm-up antes da primeira loss")
    sess_docs = [_session_docs(s.items, catalog) for s, _ in batch]
    item_docs = [tokenize(render_item_text(catalog[t])) for _, t in batch]

    xs = encode_session_batch(dual.base, sess_docs, config.session_text_mode)
    xt = encode_docs(dual.base, item_docs)
    with torch.no_grad():
        ks = encode_session_batch(dual.momentum, sess_docs, config.session_text_mode)
        kt = encode_docs(dual.momentum, item_docs)

    loss = dcl_objective(xs, xt, ks, kt, seq_queue.vectors(), item_queue.vectors(), config)
    if push:
        seq_queue.push(ks)
        item_queue.push(kt)
    return loss


# --------------------
# Treino
# --------------------
def _training_pairs(sessions: Sequence[Session], catalog: Dict[str, ItemMeta]) -> List[Tuple[Session, str]]:
    """(sessão, label) com texto dos dois lados."""
    pairs = []
    for s in sessions:
        if s.label is None or s.label not in catalog:
            continue
        try:
            _session_docs(s.items, catalog)
            render_item_text(catalog[s.label])
        except EmptyTextError:
            continue
        pairs.append((s, s.label))
    return pairs


def warm_up_queues(
    dual: DualEncoder,
    queues: Tuple[MemoryQueue, MemoryQueue],
    pairs: Sequence[Tuple[Session, str]],
    config: DclConfig,
    catalog: Dict[str, ItemMeta],
) -> None:
    """Preenche as filas com codificações de momentum até fill >= batch."""
    seq_queue, item_queue = queues
    target = min(config.batch, config.K)
    start = 0
    with torch.no_grad():
        while len(seq_queue) < target and start < len(pairs):
            chunk = pairs[start:start + config.batch]
            sess_docs = [_session_docs(s.items, catalog) for s, _ in chunk]
            item_docs = [tokenize(render_item_text(catalog[t])) for _, t in chunk]
            seq_queue.push(encode_session_batch(dual.momentum, sess_docs, config.session_text_mode))
            item_queue.push(encode_docs(dual.momentum, item_docs))
            start += config.batch


def train_dcl(
    sessions: Sequence[Session],
    catalog: Dict[str, ItemMeta],
    config: Optional[DclConfig] = None,
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    seed: Optional[int] = None,
) -> Tuple[TextEncoder, List[float]]:
    """
    Treina o encoder de texto com DCL. Devolve apenas o encoder base
    e a loss média por época.
    """
    config = config or DclConfig()
    epochs = config.epochs if epochs is None else epochs
    lr = config.lr if lr is None else lr
    seed = config.seed if seed is None else seed

    pairs = _training_pairs(sessions, catalog)
    skipped = len(sessions) - len(pairs)
    if skipped:
        console.print(f"[yellow]⚠️ DCL: {skipped} sessões sem label ou sem texto ignoradas[/yellow]")
    if not pairs:
        raise ValueError("Sem pares (sessão, alvo) para treino")

    texts = []
    for meta in catalog.values():
        try:
            texts.append(render_item_text(meta))
        except EmptyTextError:
            continue
    vocab = build_vocabulary(texts, config.min_freq)

    g = torch.Generator().manual_seed(seed)
    base = TextEncoder(vocab, config.dim, config.max_tokens)
    init_encoder(base, g)
    dual = DualEncoder(base)
    queues = (MemoryQueue(config.K, config.dim), MemoryQueue(config.K, config.dim))
    warm_up_queues(dual, queues, pairs, config, catalog)

    optimizer = torch.optim.Adam(base.parameters(), lr=lr)
    trace: List[float] = []
    for epoch in range(epochs):
        perm = torch.randperm(len(pairs), generator=g).tolist()
        total, count = 0.0, 0
        for start in range(0, len(pairs), config.batch):
            chunk = [pairs[i] for i in perm[start:start + config.batch]]
            loss = dcl_loss(chunk, dual, queues, config, catalog)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            momentum_update(dual, config.beta)

            total += loss.item() * len(chunk)
            count += len(chunk)
        trace.append(total / count)
        console.print(f"[dim]  DCL época {epoch + 1}/{epochs}: loss {trace[-1]:.4f}[/dim]")

    base.eval()
    return base, trace


# --------------------
# Índice e retrieval
# --------------------
@dataclass
class ItemIndex:
    item_ids: List[str]
    vectors: torch.Tensor  # (N, d) unitários


@torch.no_grad()
def build_item_index(encoder: TextEncoder, catalog: Dict[str, ItemMeta], batch: int = 256) -> ItemIndex:
    item_ids, docs = [], []
    for item in sorted(catalog):
        try:
            docs.append(tokenize(render_item_text(catalog[item])))
            item_ids.append(item)
        except EmptyTextError:
            continue
    if not docs:
        return ItemIndex([], torch.zeros((0, encoder.dim), dtype=DTYPE))
    chunks = [encode_docs(encoder, docs[i:i + batch]) for i in range(0, len(docs), batch)]
    return ItemIndex(item_ids, torch.cat(chunks))


@torch.no_grad()
def retrieve_text(
    session: Session,
    params: TextEncoder,
    item_index: ItemIndex,
    top_k: int,
    catalog: Dict[str, ItemMeta],
    mode: str = "concat",
) -> CandidateList:
    try:
        query = encode_session_text(params, session, catalog, mode=mode)
    except EmptyTextError:
        return CandidateList(session.session_id, [], "text")
    scores = (item_index.vectors @ query).clamp(-1.0, 1.0).tolist()
    seen = set(session.items)
    pool = {item: s for item, s in zip(item_index.item_ids, scores) if item not in seen}
    if not pool:
        return CandidateList(session.session_id, [], "text")
    return CandidateList(session.session_id, _top_k(pool, top_k), "text")


# --------------------
# Persistência
# --------------------
def save_text_encoder(encoder: TextEncoder, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": ENCODER_VERSION,
            "dim": encoder.dim,
            "max_tokens": encoder.max_tokens,
            "vocab": encoder.vocab,
            "tensors": encoder.state_dict(),
        },
        path,
    )


def load_text_encoder(path: Union[str, Path]) -> TextEncoder:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != ENCODER_VERSION:
        raise ValueError(f"Versão de encoder não suportada: {blob.get('version')}")
    encoder = TextEncoder(blob["vocab"], blob["dim"], blob["max_tokens"])
    encoder.load_state_dict(blob["tensors"])
    encoder.eval()
    return encoder


def save_item_index(index: ItemIndex, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"version": ENCODER_VERSION, "dim": int(index.vectors.shape[1]), "item_ids": index.item_ids, "vectors": index.vectors},
        path,
    )


def load_item_index(path: Union[str, Path]) -> ItemIndex:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != ENCODER_VERSION:
        raise ValueError(f"Versão de índice não suportada: {blob.get('version')}")
    return ItemIndex(list(blob["item_ids"]), blob["vectors"])
