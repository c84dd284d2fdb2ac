import numpy as np
import pytest

from come import tensor as T
from come.expert import Expert, ExpertBank, GraphBatch, load_checkpoint, save_checkpoint
from come.gradcheck import numeric_grad, relative_error
from come.graphs import Graph, generate_motif_corpus


def _relu(a):
    return np.maximum(a, 0)


def _reference_encode(expert, g):
    """Plain-loop forward pass written from the layer rule."""
    h = g.x.copy()
    nbrs = g.neighbors()
    for l in range(expert.num_layers):
        ws, wn, b = (expert[f"enc{l}.{k}"].value for k in ("w_self", "w_neigh", "b"))
        agg = np.stack([h[nb].mean(axis=0) if nb else np.zeros(h.shape[1]) for nb in nbrs])
        h = _relu(h @ ws + agg @ wn + b)
    return h.mean(axis=0)


def test_isolated_node_uses_self_path_only():
    e = Expert(3, 2, hidden=4, layers=2, seed=0)
    x = np.array([[0.5, -1.0, 2.0]])
    out = e.encode(GraphBatch.pack([Graph(1, [], x, 0)])).value[0]
    h = x
    for l in range(2):
        h = _relu(h @ e[f"enc{l}.w_self"].value + e[f"enc{l}.b"].value)
    assert np.allclose(out, h[0], atol=1e-15)


def test_two_node_path_identity_weights():
    e = Expert(2, 2, hidden=2, layers=1, seed=0)
    e["enc0.w_self"].value = np.eye(2)
    e["enc0.w_neigh"].value = np.eye(2)
    x = np.array([[1.0, 2.0], [3.0, 0.5]])
    out = e.encode(GraphBatch.pack([Graph(2, [(0, 1)], x, 0)])).value[0]
    # each node adds its neighbour: both rows become x0 + x1, mean is the same
    assert np.allclose(out, x[0] + x[1])


def test_batched_encode_matches_reference_loop():
    graphs = generate_motif_corpus(3, 3, noise=0.2, seed=4)
    e = Expert(graphs[0].x.shape[1], 3, hidden=8, seed=1)
    H = e.encode(GraphBatch.pack(graphs)).value
    ref = np.stack([_reference_encode(e, g) for g in graphs])
    assert np.allclose(H, ref, atol=1e-12)


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    g = generate_motif_corpus(2, 1, noise=0.1, seed=2)[1]
    perm = rng.permutation(g.n)
    inv = np.argsort(perm)
    h = Graph(g.n, inv[g.edges], g.x[perm], g.y)
    e = Expert(g.x.shape[1], 2, seed=3)
    a = e.encode(GraphBatch.pack([g])).value
    b = e.encode(GraphBatch.pack([h])).value
    assert np.allclose(a, b, atol=1e-10)


def test_width_mismatch_errors():
    e = Expert(3, 2, seed=0)
    with pytest.raises(T.ShapeError):
        e.encode(GraphBatch.pack([Graph(2, [(0, 1)], np.ones((2, 4)), 0)]))
    with pytest.raises(T.ShapeError):
        e.classify(T.constant(np.ones((2, 5))))


@pytest.mark.parametrize("M", [2, 5, 100])
def test_classify_width(M):
    e = Expert(3, M, hidden=6, seed=0)
    assert e.classify(T.constant(np.ones((4, 6)))).shape == (4, M)


def test_project_unit_norm_and_zero_flag():
    e = Expert(3, 2, hidden=4, z_dim=5, seed=0)
    Z = e.project(T.constant(np.random.default_rng(0).normal(size=(3, 4)))).value
    assert np.allclose(np.linalg.norm(Z, axis=1), 1)
    for k in ("w1", "b1", "w2", "b2"):
        e[f"proj.{k}"].value = np.zeros_like(e[f"proj.{k}"].value)
    before = T.zero_norm_count
    Z = e.project(T.constant(np.zeros((1, 4)))).value
    assert np.array_equal(Z, np.zeros((1, 5))) and T.zero_norm_count == before + 1
    H = T.constant(np.ones((2, 4)))
    assert np.array_equal(e.project(H).value, e.project(H).value)


def test_anchor_width_follows_encoder_space():
    assert ExpertBank(2, 3, 4, hidden=6, z_dim=5)[0]["anchors"].shape == (4, 6)
    assert ExpertBank(2, 3, 4, hidden=6, z_dim=5, anchor_on_projection=True)[0]["anchors"].shape == (4, 5)


def test_encode_gradient_matches_finite_differences():
    g = Graph(5, [(0, 1), (1, 2), (2, 3), (1, 4)], np.random.default_rng(0).normal(size=(5, 3)), 0)
    e = Expert(3, 2, hidden=4, layers=2, seed=7)
    batch = GraphBatch.pack([g])
    w = np.random.default_rng(1).normal(size=(1, 4))

    def loss():
        return T.sum(T.mul(e.encode(batch), T.constant(w)))

    e_params = e.params
    with T.Tape() as tape:
        tape.backward(loss())
    for name, p in e_params.items():
        if not name.startswith("enc"):
            continue
        num = numeric_grad(lambda: loss().item(), p.value)
        assert relative_error(p.grad, num) < 1e-4, name


def test_experts_are_independent():
    graphs = generate_motif_corpus(2, 2, seed=0)
    bank = ExpertBank(3, graphs[0].x.shape[1], 2, hidden=8, z_dim=8, seed=5)
    before = bank.logits(graphs)
    assert not np.allclose(before[0], before[1])
    bank[0]["enc0.w_self"].value = bank[0]["enc0.w_self"].value + 1.0
    after = bank.logits(graphs)
    assert not np.array_equal(before[0], after[0])
    assert np.array_equal(before[1:], after[1:])


def test_checkpoint_round_trip(tmp_path):
    graphs = generate_motif_corpus(2, 2, seed=0)
    bank = ExpertBank(2, graphs[0].x.shape[1], 2, hidden=8, z_dim=8, seed=5)
    save_checkpoint(bank, tmp_path / "c.npz", {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta["note"] == "x"
    assert np.array_equal(back.logits(graphs), bank.logits(graphs))
    assert all(np.array_equal(back.state()[k], v) for k, v in bank.state().items())
