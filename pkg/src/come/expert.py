"""Expert networks: a mean-aggregator message-passing encoder with mean
readout, a projection head, a classifier head, class anchors and a gating
prototype."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .graphs import Graph
from .tensor import Tensor


@dataclass
class GraphBatch:
    """Disjoint union of graphs with precomputed aggregation matrices."""

    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    num_graphs: int
    neigh_matrix: object
    readout_matrix: object

    @classmethod
    def pack(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        xs, srcs, dsts, owner = [], [], [], []
        offset = 0
        for gi, g in enumerate(graphs):
            xs.append(g.x)
            if len(g.edges):
                u = g.edges[:, 0] + offset
                v = g.edges[:, 1] + offset
                srcs += [u, v]
                dsts += [v, u]
            owner.append(np.full(g.n, gi, dtype=np.int64))
            offset += g.n
        src = np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64)
        dst = np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64)
        node_graph = np.concatenate(owner)
        return cls(np.concatenate(xs), src, dst, node_graph, len(graphs),
                   T.segment_matrix(dst, offset), T.segment_matrix(node_graph, len(graphs)))

    @property
    def num_nodes(self) -> int:
        return len(self.x)


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Expert:
    """One expert's parameters and forward path.

    ``params`` is an ordered name -> :class:`Tensor` mapping; names are stable
    and double as checkpoint keys.
    """

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 64, z_dim: int = 64,
                 layers: int = 2, anchor_dim: int | None = None, seed: int = 0):
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.z_dim = z_dim
        self.num_layers = layers
        anchor_dim = hidden if anchor_dim is None else anchor_dim
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}
        width = in_dim
        for l in range(layers):
            p[f"enc{l}.w_self"] = _glorot(rng, width, hidden)
            p[f"enc{l}.w_neigh"] = _glorot(rng, width, hidden)
            p[f"enc{l}.b"] = np.zeros(hidden)
            width = hidden
        for head, out in (("proj", z_dim), ("clf", num_classes)):
            p[f"{head}.w1"] = _glorot(rng, hidden, hidden)
            p[f"{head}.b1"] = np.zeros(hidden)
            p[f"{head}.w2"] = _glorot(rng, hidden, out)
            p[f"{head}.b2"] = np.zeros(out)
        p["anchors"] = rng.standard_normal((num_classes, anchor_dim)) / np.sqrt(anchor_dim)
        p["gate"] = rng.standard_normal(num_classes) / np.sqrt(num_classes)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def encode(self, batch: GraphBatch) -> Tensor:
        """Graph embeddings [num_graphs, hidden].

        Each layer computes ``relu(h @ W_self + mean_nbr(h) @ W_neigh + b)``;
        isolated nodes get a zero neighbour mean. Readout is the node mean.
        """
        if batch.x.shape[1] != self.in_dim:
            raise T.ShapeError("encode", batch.x.shape, (batch.num_nodes, self.in_dim))
        h = T.constant(batch.x)
        for l in range(self.num_layers):
            msgs = T.gather_rows(h, batch.src)
            agg = T.scatter_mean(msgs, batch.dst, batch.num_nodes, matrix=batch.neigh_matrix)
            pre = T.matmul(h, self[f"enc{l}.w_self"]) + T.matmul(agg, self[f"enc{l}.w_neigh"])
            h = T.relu(T.add_rowvec(pre, self[f"enc{l}.b"]))
        return T.scatter_mean(h, batch.node_graph, batch.num_graphs, matrix=batch.readout_matrix)

    def _mlp(self, head: str, H: Tensor) -> Tensor:
        if H.value.ndim != 2 or H.shape[1] != self.hidden:
            raise T.ShapeError(head, H.shape, (None, self.hidden))
        a = T.relu(T.add_rowvec(T.matmul(H, self[f"{head}.w1"]), self[f"{head}.b1"]))
        return T.add_rowvec(T.matmul(a, self[f"{head}.w2"]), self[f"{head}.b2"])

    def project(self, H: Tensor) -> Tensor:
        """Unit-norm contrastive embeddings [B, z_dim]."""
        return T.l2_normalize_rows(self._mlp("proj", H))

    def classify(self, H: Tensor) -> Tensor:
        """Logits [B, M]."""
        return self._mlp("clf", H)


class ExpertBank:
    """``K`` independently initialised experts."""

    def __init__(self, K: int, in_dim: int, num_classes: int, hidden: int = 64,
                 z_dim: int = 64, layers: int = 2, anchor_on_projection: bool = False,
                 seed: int = 0):
        if K < 1:
            raise ValueError("need at least one expert")
        anchor_dim = z_dim if anchor_on_projection else hidden
        self.spec = dict(K=K, in_dim=in_dim, num_classes=num_classes, hidden=hidden,
                         z_dim=z_dim, layers=layers, anchor_on_projection=anchor_on_projection,
                         seed=seed)
        self.experts = [Expert(in_dim, num_classes, hidden, z_dim, layers, anchor_dim,
                               seed=seed * 7919 + 104729 * (k + 1)) for k in range(K)]

    def __len__(self) -> int:
        return len(self.experts)

    def __iter__(self):
        return iter(self.experts)

    def __getitem__(self, k: int) -> Expert:
        return self.experts[k]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"expert{k}.{name}": t for k, e in enumerate(self.experts)
                for name, t in e.params.items()}

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}...")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise T.ShapeError(f"load {k}", state[k].shape, t.shape)
            t.value = np.array(state[k], dtype=np.float64)

    def logits(self, graphs: Sequence[Graph], batch_size: int = 256) -> np.ndarray:
        """Per-expert logits [K, n, M] without recording a tape."""
        out = []
        for start in range(0, len(graphs), batch_size):
            batch = GraphBatch.pack(graphs[start:start + batch_size])
            out.append(np.stack([e.classify(e.encode(batch)).value for e in self.experts]))
        return np.concatenate(out, axis=1)


def save_checkpoint(bank: ExpertBank, path, extra: dict | None = None) -> None:
    """``.npz`` of named float64 arrays plus a JSON ``__meta__`` entry."""
    meta = {"bank": bank.spec, **(extra or {})}
    arrays = bank.state()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ExpertBank, dict]:
    with np.load(path) as data:
        meta = json.loads(data["__meta__"].tobytes().decode())
        bank = ExpertBank(**meta["bank"])
        bank.load_state({k: data[k] for k in data.files if k != "__meta__"})
    return bank, meta
