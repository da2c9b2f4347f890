# tests/test_seq_gru.py
import numpy as np
import pytest
import torch

from services.data_model import ItemMeta
from services.seq_gru import (
    GruConfig,
    GruParams,
    build_params,
    encode_session,
    fuse_embeddings,
    gru_forward,
    init_uniform,
    load_gru,
    make_batch,
    retrieve_gru,
    sampled_softmax_loss,
    save_gru,
    train_gru,
)
from tests.conftest import make_session


def _zero_gates(params: GruParams) -> GruParams:
    with torch.no_grad():
        for p in params.gru.parameters():
            p.zero_()
    return params


def _tiny_params(dim: int = 2) -> GruParams:
    return GruParams(["x", "y", "z"], dim=dim, price_edges=np.array([]))


# --------------------
# Embeddings fundidos
# --------------------
def test_no_side_info_is_item_embedding():
    params = _tiny_params()
    fused = fuse_embeddings(["x"], {"x": ItemMeta("x", "UK", title="t")}, params)
    assert torch.equal(fused[0], params.item_embedding.weight[params.item_index["x"]])


def test_item_and_price_mean():
    params = _tiny_params()
    with torch.no_grad():
        params.item_embedding.weight[params.item_index["x"]] = torch.tensor([1.0, 0.0], dtype=torch.float64)
        params.price_embedding.weight[0] = torch.tensor([0.0, 1.0], dtype=torch.float64)
    fused = fuse_embeddings(["x"], {"x": ItemMeta("x", "UK", title="t", price=5.0)}, params)
    assert fused[0].tolist() == pytest.approx([0.5, 0.5])


def test_unknown_item_uses_oov():
    params = _tiny_params()
    fused = fuse_embeddings(["nope"], None, params)
    assert torch.equal(fused[0], params.item_embedding.weight[0])


def test_empty_item_list():
    with pytest.raises(ValueError):
        fuse_embeddings([], None, _tiny_params())


# --------------------
# Célula GRU
# --------------------
def test_zero_gates_keep_hidden_zero():
    params = _zero_gates(_tiny_params(4))
    fused = torch.randn(5, 4, dtype=torch.float64)
    assert torch.equal(gru_forward(fused, params), torch.zeros(4, dtype=torch.float64))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_matches_hand_unrolled_cell():
    params = _tiny_params(2)
    rng = np.random.default_rng(3)
    with torch.no_grad():
        for p in params.gru.parameters():
            p.copy_(torch.tensor(rng.uniform(-1, 1, p.shape)))
    w_ih = params.gru.weight_ih_l0.detach().numpy()
    w_hh = params.gru.weight_hh_l0.detach().numpy()
    b_ih = params.gru.bias_ih_l0.detach().numpy()
    b_hh = params.gru.bias_hh_l0.detach().numpy()
    xs = rng.uniform(-1, 1, (3, 2))

    h = np.zeros(2)
    for x in xs:
        gi = w_ih @ x + b_ih
        gh = w_hh @ h + b_hh
        r = _sigmoid(gi[0:2] + gh[0:2])
        z = _sigmoid(gi[2:4] + gh[2:4])
        n = np.tanh(gi[4:6] + r * gh[4:6])
        h = (1 - z) * n + z * h

    out = gru_forward(torch.tensor(xs), params).detach().numpy()
    assert np.allclose(out, h, atol=1e-12)


def test_zero_gates_rep_is_mean_of_fused():
    params = _zero_gates(_tiny_params(3))
    session = make_session("s", "x y z")
    fused = fuse_embeddings(["x", "y", "z"], None, params)
    assert torch.allclose(encode_session(session, None, params), fused.mean(0), atol=0, rtol=0)


def test_zero_gates_single_item_rep():
    params = _zero_gates(_tiny_params(3))
    rep = encode_session(make_session("s", "y"), None, params)
    assert torch.equal(rep, params.item_embedding.weight[params.item_index["y"]])


def test_session_truncated_to_max_len():
    params = GruParams(["x", "y", "z"], dim=3, max_len=2)
    long = encode_session(make_session("s", "z x y"), None, params)
    short = encode_session(make_session("s", "x y"), None, params)
    assert torch.equal(long, short)


# --------------------
# Gradiente da loss
# --------------------
def test_sampled_softmax_gradient_matches_finite_differences():
    params = _tiny_params(3)
    batch = make_batch([["x", "y"], ["z"]], None, params)
    labels = torch.tensor([3, 1])
    negatives = torch.tensor([[1, 2], [2, 3]])

    loss = sampled_softmax_loss(params, batch, labels, negatives)
    loss.backward()
    weight = params.item_embedding.weight
    analytic = weight.grad.clone()

    eps = 1e-6
    with torch.no_grad():
        for row in range(1, 4):
            for col in range(3):
                orig = weight[row, col].item()
                weight[row, col] = orig + eps
                up = sampled_softmax_loss(params, batch, labels, negatives).item()
                weight[row, col] = orig - eps
                down = sampled_softmax_loss(params, batch, labels, negatives).item()
                weight[row, col] = orig
                numeric = (up - down) / (2 * eps)
                assert analytic[row, col].item() == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def _random_setup(seed: int):
    rng = np.random.default_rng(seed)
    n_items = int(rng.integers(3, 7))
    ids = [f"i{k}" for k in range(n_items)]
    catalog = {
        i: ItemMeta(
            i, "UK", title=i,
            price=float(rng.uniform(1, 50)) if rng.random() < 0.8 else None,
            brand=f"b{rng.integers(0, 3)}" if rng.random() < 0.8 else None,
        )
        for i in ids
    }
    config = GruConfig(dim=int(rng.integers(2, 5)), price_buckets=4, brand_buckets=8, max_len=4)
    params = build_params(catalog, config)
    init_uniform(params, torch.Generator().manual_seed(seed), scale=0.5)
    sequences = [list(rng.choice(ids, size=int(rng.integers(1, 6)))) for _ in range(int(rng.integers(1, 4)))]
    batch = make_batch(sequences, catalog, params)
    labels = torch.tensor(rng.integers(1, n_items + 1, size=len(sequences)))
    negatives = torch.tensor(rng.integers(1, n_items + 1, size=(len(sequences), 3)))
    return params, batch, labels, negatives, rng


@pytest.mark.parametrize("seed", range(100))
def test_gradient_of_every_block_matches_finite_differences(seed):
    params, batch, labels, negatives, rng = _random_setup(seed)
    params.zero_grad()
    sampled_softmax_loss(params, batch, labels, negatives).backward()

    eps = 1e-6
    for name, p in params.named_parameters():
        analytic = p.grad.clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        touched = torch.nonzero(analytic.view(-1)).flatten().tolist()
        picks = [int(j) for j in rng.choice(touched, size=min(4, len(touched)), replace=False)] if touched else []
        picks += [int(j) for j in rng.integers(0, flat.numel(), size=2)]
        with torch.no_grad():
            for j in picks:
                orig = flat[j].item()
                flat[j] = orig + eps
                up = sampled_softmax_loss(params, batch, labels, negatives).item()
                flat[j] = orig - eps
                down = sampled_softmax_loss(params, batch, labels, negatives).item()
                flat[j] = orig
                numeric = (up - down) / (2 * eps)
                assert analytic.view(-1)[j].item() == pytest.approx(numeric, rel=1e-5, abs=1e-8), name


# --------------------
# Treino
# --------------------
def _planted_catalog():
    return {i: ItemMeta(i, "UK", title=f"item {i}", price=float(k + 1), brand=f"b{k % 2}") for k, i in enumerate("abcdef")}


def _planted_sessions(n: int = 50):
    rng = np.random.default_rng(0)
    sessions = []
    for k in range(n):
        prefix = list(rng.choice(["c", "d", "e", "f"], size=int(rng.integers(0, 3)), replace=False))
        sessions.append(make_session(f"s{k}", " ".join(prefix + ["a"]), "b"))
    return sessions


def test_training_loss_decreases():
    config = GruConfig(dim=8, epochs=10, batch=10, negatives=4, lr=0.5, optimizer="sgd", seed=1)
    _, trace = train_gru(_planted_sessions(), _planted_catalog(), config)
    assert len(trace) == 10
    assert trace[-1] < trace[0]


def test_adam_learns_planted_transition():
    config = GruConfig(dim=8, epochs=15, batch=10, negatives=4, lr=0.05, seed=1)
    params, trace = train_gru(_planted_sessions(), _planted_catalog(), config)
    assert trace[-1] < 0.5 * trace[0]
    assert retrieve_gru(make_session("q", "c a"), params, 1).item_ids == ["b"]


def test_unknown_optimizer_rejected():
    with pytest.raises(ValueError, match="optimizer"):
        GruConfig(optimizer="rmsprop")


def test_training_is_deterministic():
    config = GruConfig(dim=4, epochs=2, batch=16, negatives=3, seed=9)
    p1, t1 = train_gru(_planted_sessions(20), _planted_catalog(), config)
    p2, t2 = train_gru(_planted_sessions(20), _planted_catalog(), config)
    assert t1 == t2
    for a, b in zip(p1.parameters(), p2.parameters()):
        assert torch.equal(a, b)


def test_training_without_labels_fails():
    with pytest.raises(ValueError):
        train_gru([make_session("s", "a b")], _planted_catalog(), GruConfig(epochs=1))


# --------------------
# Retrieval e persistência
# --------------------
def test_retrieve_argmax_and_exclusions():
    params = _zero_gates(_tiny_params(2))
    with torch.no_grad():
        params.item_embedding.weight[params.item_index["x"]] = torch.tensor([1.0, 0.0], dtype=torch.float64)
        params.item_embedding.weight[params.item_index["y"]] = torch.tensor([0.9, 0.0], dtype=torch.float64)
        params.item_embedding.weight[params.item_index["z"]] = torch.tensor([0.1, 0.0], dtype=torch.float64)
    session = make_session("s", "x")
    assert retrieve_gru(session, params, 1).item_ids == ["y"]
    full = retrieve_gru(session, params, 50)
    assert full.item_ids == ["y", "z"]
    assert "x" not in full.item_ids


def test_save_load_round_trip(tmp_path):
    params, _ = train_gru(_planted_sessions(10), _planted_catalog(), GruConfig(dim=4, epochs=1, negatives=2))
    save_gru(params, tmp_path / "gru.pt")
    loaded = load_gru(tmp_path / "gru.pt")
    session = make_session("s", "c a")
    assert retrieve_gru(session, loaded, 5) == retrieve_gru(session, params, 5)
