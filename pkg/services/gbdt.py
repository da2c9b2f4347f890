# services/gbdt.py - GRADIENT BOOSTING (HISTOGRAMAS, LOGISTIC LOSS)
"""
Gradient boosting de árvores de regressão para o reranker.

- Loss logística; base_score = log-odds da taxa de positivos
- Cada feature é discretizada em até `bins` bins por quantis
  (ou pelos valores distintos quando há poucos)
- Splits greedy pelo ganho de Newton  G²/(H+λ); empates → menor feature, menor bin
- Folha = -G / (H + λ)
- Salvaguarda: se uma árvore subir a loss de treino, as folhas são divididas
  por 2 (até 30 vezes); se ainda assim subir, a árvore fica a zero
"""

from __future__ import annotations
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.console import Console

console = Console()

# --------------------
# Configuração base
# --------------------
TREES = 200
DEPTH = 6
LEARNING_RATE = 0.1
BINS = 64
L2 = 1.0
MIN_SAMPLES_LEAF = 1
MAX_HALVINGS = 30
MIN_GAIN = 1e-12
MODEL_VERSION = 1


@dataclass
class GbdtConfig:
    trees: int = TREES
    depth: int = DEPTH
    lr: float = LEARNING_RATE
    bins: int = BINS
    l2: float = L2
    min_samples_leaf: int = MIN_SAMPLES_LEAF
    subsample: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.trees < 0 or self.depth < 1 or self.bins < 2:
            raise ValueError("trees >= 0, depth >= 1, bins >= 2")
        if self.lr <= 0 or self.l2 < 0:
            raise ValueError("lr > 0 e l2 >= 0")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample tem de estar em (0, 1]")


@dataclass
class Tree:
    """Nós em arrays paralelos; feature == -1 marca uma folha."""
    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[float] = field(default_factory=list)

    def add_leaf(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.value) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        active = feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            f = feature[node[rows]]
            go_left = X[rows, f] <= threshold[node[rows]]
            node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
            active = feature[node] >= 0
        return np.asarray(self.value)[node]

    def scaled(self, factor: float) -> "Tree":
        return Tree(list(self.feature), list(self.threshold), list(self.left), list(self.right),
                    [v * factor for v in self.value])


@dataclass
class GbdtModel:
    base_score: float
    learning_rate: float
    n_features: int
    trees: List[Tree] = field(default_factory=list)

    def raw(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"Esperadas {self.n_features} features, recebidas {X.shape[-1]}")
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out


# --------------------
# Helpers
# --------------------
def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(y: np.ndarray, raw: np.ndarray) -> float:
    """Média de log(1 + e^raw) - y·raw."""
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def bin_thresholds(column: np.ndarray, bins: int) -> np.ndarray:
    uniq = np.unique(column)
    if len(uniq) <= bins:
        return uniq[:-1]
    qs = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    return np.unique(np.quantile(column, qs))


def _bin_matrix(X: np.ndarray, thresholds: List[np.ndarray]) -> np.ndarray:
    """Bin b ⇔ x ≤ thr[b] e x > thr[b-1]."""
    return np.column_stack([np.searchsorted(thr, X[:, f], side="left") for f, thr in enumerate(thresholds)])


def _best_split(
    idx: np.ndarray,
    binned: np.ndarray,
    thresholds: List[np.ndarray],
    g: np.ndarray,
    h: np.ndarray,
    config: GbdtConfig,
) -> Optional[Tuple[int, int]]:
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + config.l2)
    best_gain, best = MIN_GAIN, None
    for f, thr in enumerate(thresholds):
        nb = len(thr) + 1
        if nb < 2:
            continue
        b = binned[idx, f]
        gl = np.cumsum(np.bincount(b, weights=g[idx], minlength=nb))[:-1]
        hl = np.cumsum(np.bincount(b, weights=h[idx], minlength=nb))[:-1]
        nl = np.cumsum(np.bincount(b, minlength=nb))[:-1]
        nr = len(idx) - nl
        gain = gl * gl / (hl + config.l2) + (G - gl) ** 2 / (H - hl + config.l2) - parent
        valid = (nl >= config.min_samples_leaf) & (nr >= config.min_samples_leaf)
        gain = np.where(valid, gain, -np.inf)
        j = int(np.argmax(gain))
        if gain[j] > best_gain:
            best_gain, best = float(gain[j]), (f, j)
    return best


def _grow(
    tree: Tree,
    idx: np.ndarray,
    depth: int,
    binned: np.ndarray,
    thresholds: List[np.ndarray],
    g: np.ndarray,
    h: np.ndarray,
    config: GbdtConfig,
) -> int:
    split = _best_split(idx, binned, thresholds, g, h, config) if depth < config.depth else None
    if split is None:
        return tree.add_leaf(-g[idx].sum() / (h[idx].sum() + config.l2))

    f, j = split
    node = tree.add_leaf(0.0)
    tree.feature[node] = f
    tree.threshold[node] = float(thresholds[f][j])
    go_left = binned[idx, f] <= j
    tree.left[node] = _grow(tree, idx[go_left], depth + 1, binned, thresholds, g, h, config)
    tree.right[node] = _grow(tree, idx[~go_left], depth + 1, binned, thresholds, g, h, config)
    return node


# --------------------
# Treino / previsão
# --------------------
def train_gbdt(X: np.ndarray, y: Sequence[int], config: Optional[GbdtConfig] = None) -> Tuple[GbdtModel, List[float]]:
    """
    Boosting sobre a loss logística.

    Returns:
        (modelo, loss de treino: inicial + uma entrada por árvore)
    """
    config = config or GbdtConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X tem de ser 2-D com uma linha por label")
    if not np.all(np.isfinite(X)):
        raise ValueError("Features não finitas")
    pos = y.mean() if len(y) else 0.0
    if pos <= 0.0 or pos >= 1.0:
        raise ValueError("São precisas linhas positivas e negativas")

    base = float(np.log(pos / (1.0 - pos)))
    model = GbdtModel(base, config.lr, X.shape[1])
    thresholds = [bin_thresholds(X[:, f], config.bins) for f in range(X.shape[1])]
    binned = _bin_matrix(X, thresholds)
    rng = np.random.default_rng(config.seed)

    raw = np.full(len(y), base)
    trace = [logistic_loss(y, raw)]
    for _ in range(config.trees):
        p = _sigmoid(raw)
        g, h = p - y, p * (1.0 - p)
        idx = np.arange(len(y))
        if config.subsample < 1.0:
            idx = np.sort(rng.choice(idx, max(1, int(config.subsample * len(y))), replace=False))

        tree = Tree()
        _grow(tree, idx, 0, binned, thresholds, g, h, config)
        step = tree.predict(X)
        loss = logistic_loss(y, raw + config.lr * step)
        halvings = 0
        while loss > trace[-1] and halvings < MAX_HALVINGS:
            tree, step = tree.scaled(0.5), step * 0.5
            loss = logistic_loss(y, raw + config.lr * step)
            halvings += 1
        if loss > trace[-1]:
            tree, step, loss = tree.scaled(0.0), step * 0.0, trace[-1]

        model.trees.append(tree)
        raw = raw + config.lr * step
        trace.append(loss)

    console.print(f"[dim]✓ GBDT: {len(model.trees)} árvores, loss {trace[0]:.4f} → {trace[-1]:.4f}[/dim]")
    return model, trace


def gbdt_predict_many(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    return _sigmoid(model.raw(X))


def gbdt_predict(model: GbdtModel, features: Sequence[float]) -> float:
    """sigmoid(base_score + lr · Σ folhas)."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 1:
        raise ValueError("gbdt_predict espera um único vetor")
    return float(gbdt_predict_many(model, x.reshape(1, -1))[0])


# --------------------
# Persistência (JSON)
# --------------------
def save_gbdt(model: GbdtModel, path: Union[str, Path]) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = {"version": MODEL_VERSION, **asdict(model)}
    out.write_text(json.dumps(data, indent=2), encoding="utf-8")


def load_gbdt(path: Union[str, Path]) -> GbdtModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("version") != MODEL_VERSION:
        raise ValueError(f"Versão de modelo não suportada: {data.get('version')}")
    return GbdtModel(
        base_score=float(data["base_score"]),
        learning_rate=float(data["learning_rate"]),
        n_features=int(data["n_features"]),
        trees=[Tree(**t) for t in data["trees"]],
    )
