"""Stochastic graph augmentations for building contrastive views."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .graphs import Graph, normalize_edges

log = logging.getLogger(__name__)

KINDS = ("mask", "drop", "perturb", "subgraph")
ALIASES = {
    "attribute-masking": "mask",
    "node-dropping": "drop",
    "edge-perturbation": "perturb",
}

# Per-expert view pairs used when the config does not override them.
DEFAULT_PAIRS = (("mask", "drop"), ("drop", "perturb"), ("perturb", "subgraph"),
                 ("subgraph", "mask"))


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        kind = ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"augmentation ratio {self.ratio} outside [0, 1]")


def default_pairs(K: int) -> list[tuple[str, str]]:
    return [DEFAULT_PAIRS[k % len(DEFAULT_PAIRS)] for k in range(K)]


def view_seed(base: int, epoch: int, sample: int, view: int) -> int:
    digest = hashlib.blake2b(f"{base}:{epoch}:{sample}:{view}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _count(ratio: float, total: int) -> int:
    return int(np.floor(ratio * total + 0.5))


def mask_attributes(g: Graph, ratio: float, rng) -> Graph:
    k = _count(ratio, g.x.size)
    if k == 0:
        return g
    x = g.x.copy()
    flat = rng.choice(x.size, size=k, replace=False)
    x.reshape(-1)[flat] = 0.0
    return g.with_(x=x)


def _induce(g: Graph, keep: np.ndarray) -> Graph:
    keep = np.sort(keep)
    new_id = np.full(g.n, -1, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    e = g.edges
    if len(e):
        alive = (new_id[e[:, 0]] >= 0) & (new_id[e[:, 1]] >= 0)
        e = new_id[e[alive]]
    return g.with_(n=len(keep), edges=normalize_edges(e), x=g.x[keep])


def drop_nodes(g: Graph, ratio: float, rng) -> Graph:
    k = min(_count(ratio, g.n), g.n - 1)
    if k <= 0:
        return g
    dropped = rng.choice(g.n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(g.n), dropped)
    return _induce(g, keep)


def perturb_edges(g: Graph, ratio: float, rng) -> Graph:
    """Delete ``round(ratio*|E|/2)`` edges and add as many former non-edges.

    On graphs with too few non-edges the additions are capped; the shortfall
    is logged at debug level.
    """
    k = _count(ratio * g.num_edges / 2, 1)
    if k == 0:
        return g
    e = g.edges
    iu, ju = np.triu_indices(g.n, k=1)
    present = np.zeros((g.n, g.n), dtype=bool)
    if len(e):
        present[e[:, 0], e[:, 1]] = True
    free = np.flatnonzero(~present[iu, ju])
    n_add = min(k, len(free))
    if n_add < k:
        log.debug("perturb_edges: only %d of %d additions possible", n_add, k)
    deleted = rng.choice(len(e), size=min(k, len(e)), replace=False)
    kept = np.delete(e, deleted, axis=0)
    pick = rng.choice(free, size=n_add, replace=False) if n_add else np.zeros(0, dtype=np.int64)
    added = np.stack([iu[pick], ju[pick]], axis=1)
    return g.with_(edges=normalize_edges(np.concatenate([kept, added])))


def random_walk_subgraph(g: Graph, ratio: float, rng) -> Graph:
    """Keep the first ``round(ratio*n)`` distinct nodes visited by a random walk.

    The walk restarts at a uniformly chosen unvisited node when it gets stuck
    (dead end, or a component that is already exhausted).
    """
    target = max(1, min(_count(ratio, g.n), g.n))
    adj = g.neighbors()
    start = int(rng.integers(g.n))
    visited = {start}
    order = [start]
    cur = start
    stall = 0
    while len(visited) < target:
        nbrs = adj[cur]
        if not nbrs or stall > 4 * g.n:
            rest = np.setdiff1d(np.arange(g.n), order)
            cur = int(rng.choice(rest))
            stall = 0
        else:
            cur = nbrs[int(rng.integers(len(nbrs)))]
            stall += 1
        if cur not in visited:
            visited.add(cur)
            order.append(cur)
            stall = 0
    return _induce(g, np.asarray(order, dtype=np.int64))


_APPLY = {
    "mask": mask_attributes,
    "drop": drop_nodes,
    "perturb": perturb_edges,
    "subgraph": random_walk_subgraph,
}


def apply(g: Graph, spec: AugmentSpec) -> Graph:
    """Return an augmented copy of ``g``; deterministic in ``spec.seed``."""
    if spec.kind in ("drop", "subgraph") and g.n < 2:
        return g
    rng = np.random.default_rng(spec.seed)
    return _APPLY[spec.kind](g, spec.ratio, rng)
