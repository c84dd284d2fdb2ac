"""Graph data model, TU-format ingestion, synthetic motif corpora and
long-tail / balanced split builders."""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph with an integer class label.

    ``edges`` is an int array [E, 2] with ``u < v`` per row, sorted and
    unique; ``x`` is [n, d]. ``gid`` is a stable identifier inside the
    corpus the graph came from.
    """

    n: int
    edges: np.ndarray
    x: np.ndarray
    y: int
    gid: int = -1

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(self.n, -1)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "x", x)
        if self.n < 1:
            raise DatasetError("graph needs at least one node")
        if x.shape[0] != self.n:
            raise DatasetError(f"attribute rows {x.shape[0]} != node count {self.n}")
        if edges.size and (edges.min() < 0 or edges.max() >= self.n):
            raise DatasetError("edge endpoint outside node range")
        if edges.size and np.any(edges[:, 0] == edges[:, 1]):
            raise DatasetError("self-loop in edge list")
        if edges.size and not (np.all(edges[:, 0] < edges[:, 1])
                               and np.all(np.diff(edges[:, 0] * self.n + edges[:, 1]) > 0)):
            edges = normalize_edges(edges)
            object.__setattr__(self, "edges", edges)
        edges.setflags(write=False)
        x.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def with_(self, **changes) -> "Graph":
        fields = dict(n=self.n, edges=self.edges, x=self.x, y=self.y, gid=self.gid)
        fields.update(changes)
        return Graph(**fields)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return adj

    def same_as(self, other: "Graph") -> bool:
        return (self.n == other.n and self.y == other.y
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.x, other.x))


def normalize_edges(pairs, n: int | None = None) -> np.ndarray:
    """Drop self-loops, orient ``u < v``, dedupe and sort."""
    e = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return e
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    width = int(e.max()) + 1 if e.size else 1
    keys = np.unique(e[:, 0] * width + e[:, 1])
    return np.stack([keys // width, keys % width], axis=1)


@dataclass(frozen=True)
class DatasetStats:
    """Class-size profile. ``class_sizes`` is indexed by label, labels being
    ranked so that sizes are non-increasing."""

    class_sizes: tuple[int, ...]

    @property
    def M(self) -> int:
        return len(self.class_sizes)

    @property
    def total(self) -> int:
        return int(np.sum(self.class_sizes))

    @property
    def imbalance_factor(self) -> Fraction:
        return Fraction(self.class_sizes[0], self.class_sizes[-1])

    def is_long_tailed(self) -> bool:
        s = self.class_sizes
        return all(a >= b for a, b in zip(s, s[1:])) and min(s) >= 1

    @classmethod
    def of(cls, graphs: Sequence[Graph], M: int | None = None) -> "DatasetStats":
        M = M if M is not None else max(g.y for g in graphs) + 1
        counts = np.bincount([g.y for g in graphs], minlength=M)
        return cls(tuple(int(c) for c in counts))


def degree_features(degrees: np.ndarray, max_degree: int) -> np.ndarray:
    d = np.minimum(degrees, max_degree)
    out = np.zeros((len(d), max_degree + 1))
    out[np.arange(len(d)), d] = 1.0
    return out


# ------------------------------------------------------------------ TU format

_SPLIT = re.compile(r",\s*")


def _read_rows(path: Path, kind=float) -> list[list]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([kind(tok) for tok in _SPLIT.split(line)])
            except ValueError:
                raise DatasetError(f"{path.name} line {lineno}: cannot parse {line!r}") from None
    return rows


def _find(dir: Path, suffix: str) -> Path | None:
    hits = sorted(dir.glob(f"*_{suffix}.txt"))
    return hits[0] if hits else None


def ingest_tu(path, max_degree: int = 10) -> tuple[list[Graph], DatasetStats]:
    """Read a TU benchmark directory (``DS_A.txt``, ``DS_graph_indicator.txt``,
    ``DS_graph_labels.txt``, optional ``DS_node_attributes.txt``).

    Labels are remapped to 0..M-1 by descending class frequency (ties by the
    original label value). Without node attributes, nodes get one-hot degree
    features capped at ``max_degree``.
    """
    path = Path(path)
    a_file = _find(path, "A")
    ind_file = _find(path, "graph_indicator")
    lab_file = _find(path, "graph_labels")
    if a_file is None or ind_file is None or lab_file is None:
        raise DatasetError(f"{path}: missing one of *_A.txt, *_graph_indicator.txt, *_graph_labels.txt")
    attr_file = _find(path, "node_attributes")

    indicator = [r[0] for r in _read_rows(ind_file, int)]
    raw_labels = [r[0] for r in _read_rows(lab_file, lambda t: int(float(t)))]
    n_graphs = len(raw_labels)
    if max(indicator) > n_graphs or min(indicator) < 1:
        raise DatasetError(f"{ind_file.name}: graph id outside 1..{n_graphs}")

    node_graph = np.asarray(indicator, dtype=np.int64) - 1
    if np.any(np.diff(node_graph) < 0):
        raise DatasetError(f"{ind_file.name}: node lines are not grouped by graph")
    starts = np.searchsorted(node_graph, np.arange(n_graphs), side="left")
    stops = np.searchsorted(node_graph, np.arange(n_graphs), side="right")

    attrs = None
    if attr_file is not None:
        attrs = _read_rows(attr_file, float)
        if len(attrs) != len(indicator):
            raise DatasetError(f"{attr_file.name} line {min(len(attrs), len(indicator)) + 1}: "
                               f"{len(attrs)} attribute rows but {len(indicator)} nodes")
        attrs = np.asarray(attrs, dtype=np.float64)

    per_graph: list[list[tuple[int, int]]] = [[] for _ in range(n_graphs)]
    with open(a_file) as fh:
        lineno = 0
        for line in fh:
            lineno += 1
            line = line.strip()
            if not line:
                continue
            toks = _SPLIT.split(line)
            if len(toks) != 2:
                raise DatasetError(f"{a_file.name} line {lineno}: expected 'u, v'")
            try:
                u, v = int(toks[0]) - 1, int(toks[1]) - 1
            except ValueError:
                raise DatasetError(f"{a_file.name} line {lineno}: cannot parse {line!r}") from None
            if not (0 <= u < len(node_graph)) or not (0 <= v < len(node_graph)):
                raise DatasetError(f"{a_file.name} line {lineno}: node outside 1..{len(node_graph)}")
            gi = node_graph[u]
            if node_graph[v] != gi:
                raise DatasetError(f"{a_file.name} line {lineno}: edge ({u + 1}, {v + 1}) "
                                   f"spans graphs {gi + 1} and {node_graph[v] + 1}")
            per_graph[gi].append((u - starts[gi], v - starts[gi]))

    counts = Counter(raw_labels)
    order = sorted(counts, key=lambda lab: (-counts[lab], lab))
    remap = {lab: i for i, lab in enumerate(order)}

    graphs = []
    for gi in range(n_graphs):
        n = int(stops[gi] - starts[gi])
        if n == 0:
            raise DatasetError(f"{ind_file.name}: graph {gi + 1} has no nodes")
        edges = normalize_edges(per_graph[gi])
        if attrs is not None:
            x = attrs[starts[gi]:stops[gi]]
        else:
            x = degree_features(np.bincount(edges.ravel(), minlength=n), max_degree)
        graphs.append(Graph(n, edges, x, remap[raw_labels[gi]], gid=gi))
    return graphs, DatasetStats.of(graphs, len(order))


def write_tu(graphs: Sequence[Graph], path, name: str = "DS", attributes: bool = True) -> None:
    """Serialize to TU text files. Labels are written 1-based in their
    current dense order, so a round trip preserves them."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(path / f"{name}_A.txt", "w") as fa, \
            open(path / f"{name}_graph_indicator.txt", "w") as fi, \
            open(path / f"{name}_graph_labels.txt", "w") as fl:
        fx = open(path / f"{name}_node_attributes.txt", "w") if attributes else None
        try:
            for gi, g in enumerate(graphs):
                for u, v in g.edges:
                    fa.write(f"{u + 1 + offset}, {v + 1 + offset}\n")
                    fa.write(f"{v + 1 + offset}, {u + 1 + offset}\n")
                for row in range(g.n):
                    fi.write(f"{gi + 1}\n")
                    if fx is not None:
                        fx.write(", ".join(repr(float(t)) for t in g.x[row]) + "\n")
                fl.write(f"{g.y + 1}\n")
                offset += g.n
        finally:
            if fx is not None:
                fx.close()


# ---------------------------------------------------------------- JSON lines


def save_jsonl(graphs: Iterable[Graph], path) -> None:
    """One object per line: ``n``, ``edges`` (list of [u, v]), ``x`` (list of
    rows), ``y``. Floats are written with ``repr`` precision."""
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps({"n": g.n, "edges": g.edges.tolist(), "x": g.x.tolist(),
                                 "y": int(g.y)}) + "\n")


def load_jsonl(path) -> list[Graph]:
    graphs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            if line.strip():
                obj = json.loads(line)
                x = np.asarray(obj["x"], dtype=np.float64).reshape(obj["n"], -1)
                graphs.append(Graph(obj["n"], obj["edges"], x, obj["y"], gid=lineno))
    return graphs


# ------------------------------------------------------------- long tailing


@dataclass(frozen=True)
class LongTailSpec:
    target_if: float
    seed: int = 0

    def __post_init__(self):
        if self.target_if < 1:
            raise DatasetError("imbalance factor must be >= 1")

    def exponent(self, M: int) -> float:
        return math.log(self.target_if) / math.log(M)


def zipf_sizes(n_head: int, M: int, imbalance: float) -> list[int]:
    """``max(round(n_head * j**-s), 1)`` with ``s = log(IF)/log(M)``, j = 1..M."""
    if M < 2:
        raise DatasetError("need at least two classes")
    s = math.log(imbalance) / math.log(M)
    # half-up rounding; the slack absorbs float error at exact halves like 30/20
    return [max(int(math.floor(n_head * j ** (-s) + 0.5 + 1e-9)), 1) for j in range(1, M + 1)]


def _by_class(graphs: Sequence[Graph], M: int) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(M)]
    for i, g in enumerate(graphs):
        out[g.y].append(i)
    return out


def _rank_classes(graphs: Sequence[Graph], M: int) -> list[int]:
    counts = np.bincount([g.y for g in graphs], minlength=M)
    return sorted(range(M), key=lambda c: (-counts[c], c))


def make_long_tailed(graphs: Sequence[Graph], spec: LongTailSpec, n_head: int | None = None,
                     M: int | None = None) -> tuple[list[Graph], DatasetStats]:
    """Subsample each class to a Zipf profile with head/tail ratio ``spec.target_if``.

    Classes are ranked by available size (ties by label); rank j keeps
    ``zipf_sizes(...)[j]`` graphs drawn without replacement. Labels are
    relabelled to the rank so the returned stats are non-increasing.
    ``n_head`` defaults to the size of the largest class.
    """
    M = M if M is not None else max(g.y for g in graphs) + 1
    if M < 2:
        raise DatasetError("need at least two classes")
    members = _by_class(graphs, M)
    ranking = _rank_classes(graphs, M)
    if n_head is None:
        n_head = len(members[ranking[0]])
    sizes = zipf_sizes(n_head, M, spec.target_if)
    rng = np.random.default_rng(spec.seed)
    out: list[Graph] = []
    for rank, cls in enumerate(ranking):
        pool = members[cls]
        if sizes[rank] > len(pool):
            raise DatasetError(f"class {cls} has {len(pool)} graphs, needs {sizes[rank]}")
        pick = rng.choice(len(pool), size=sizes[rank], replace=False)
        for i in sorted(pick):
            g = graphs[pool[i]]
            out.append(g if g.y == rank else g.with_(y=rank))
    return out, DatasetStats(tuple(sizes))


def relabel_like(graphs: Sequence[Graph], ranking: Sequence[int]) -> list[Graph]:
    """Apply the class ranking used by :func:`make_long_tailed` to another split."""
    remap = {cls: rank for rank, cls in enumerate(ranking)}
    return [g if remap[g.y] == g.y else g.with_(y=remap[g.y]) for g in graphs]


def split_balanced(graphs: Sequence[Graph], per_class_val: int, per_class_test: int,
                   seed: int = 0, M: int | None = None):
    """Carve class-balanced validation and test sets; the rest is returned
    as the remainder. Returns ``(val, test, remainder)``."""
    M = M if M is not None else max(g.y for g in graphs) + 1
    members = _by_class(graphs, M)
    need = per_class_val + per_class_test + 1
    for cls, idx in enumerate(members):
        if len(idx) < need:
            raise DatasetError(f"class {cls} has {len(idx)} graphs, needs at least {need}")
    rng = np.random.default_rng(seed)
    val, test, rest = [], [], []
    for idx in members:
        perm = rng.permutation(len(idx))
        val.extend(graphs[idx[i]] for i in perm[:per_class_val])
        test.extend(graphs[idx[i]] for i in perm[per_class_val:per_class_val + per_class_test])
        rest.extend(graphs[idx[i]] for i in perm[per_class_val + per_class_test:])
    return val, test, rest


@dataclass
class Splits:
    train: list[Graph]
    val: list[Graph]
    test: list[Graph]
    stats: DatasetStats
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.stats.M

    @property
    def in_dim(self) -> int:
        return self.train[0].x.shape[1]


def build_splits(graphs: Sequence[Graph], imbalance: float, per_class_val: int,
                 per_class_test: int, seed: int = 0, n_head: int | None = None,
                 shuffle_classes: bool = False) -> Splits:
    """Balanced val/test first, then long-tail the remainder.

    Every split is relabelled by the training-set class rank, so label 0 is
    the head class everywhere. ``shuffle_classes`` permutes the labels under
    ``seed`` first, so which original class ends up as head varies by seed
    instead of always being the lowest label. ``meta["origin"]`` maps each
    final label back to the original one.
    """
    M = max(g.y for g in graphs) + 1
    perm = np.arange(M)
    if shuffle_classes:
        perm = np.random.default_rng([seed, 7]).permutation(M)
        graphs = [g.with_(y=int(perm[g.y])) for g in graphs]
    val, test, rest = split_balanced(graphs, per_class_val, per_class_test, seed=seed, M=M)
    ranking = _rank_classes(rest, M)
    train, stats = make_long_tailed(rest, LongTailSpec(imbalance, seed + 1), n_head=n_head, M=M)
    inverse = np.argsort(perm)
    origin = [int(inverse[cls]) for cls in ranking]
    return Splits(train, relabel_like(val, ranking), relabel_like(test, ranking), stats,
                  meta={"imbalance": imbalance, "seed": seed, "origin": origin})


# ------------------------------------------------------------ motif corpus


def _ring(nodes: Sequence[int]) -> list[tuple[int, int]]:
    return [(nodes[i], nodes[(i + 1) % len(nodes)]) for i in range(len(nodes))]


def generate_motif_corpus(M: int, per_class: int, noise: float = 0.0, seed: int = 0,
                          background: int = 3, motifs: int = 6, max_degree: int = 6,
                          jitter: float = 0.05) -> list[Graph]:
    """Class ``j`` graphs carry ``motifs`` cycles of length ``j + 3`` hung on a
    random background tree with ``background`` nodes plus a few chords.

    ``noise`` is the fraction of edges rewired to uniformly random non-edges.
    Attributes are degree one-hots (capped at ``max_degree``) plus Gaussian
    jitter of scale ``jitter``.
    """
    if M < 2:
        raise DatasetError("need at least two classes")
    if not 0.0 <= noise <= 1.0:
        raise DatasetError("noise must be in [0, 1]")
    rng = np.random.default_rng(seed)
    graphs: list[Graph] = []
    for cls in range(M):
        for _ in range(per_class):
            edges = [(i, int(rng.integers(0, i))) for i in range(1, background)]
            for _ in range(max(1, background // 5)):
                u, v = rng.choice(background, size=2, replace=False)
                edges.append((int(u), int(v)))
            n = background
            for _ in range(motifs):
                hook = int(rng.integers(0, background))
                ring = [hook] + list(range(n, n + cls + 2))
                n += cls + 2
                edges.extend(_ring(ring))
            e = normalize_edges(edges)
            if noise > 0 and len(e):
                e = _rewire(e, n, noise, rng)
            deg = np.bincount(e.ravel(), minlength=n)
            x = degree_features(deg, max_degree) + jitter * rng.standard_normal((n, max_degree + 1))
            graphs.append(Graph(n, e, x, cls, gid=len(graphs)))
    return graphs


def _rewire(edges: np.ndarray, n: int, frac: float, rng) -> np.ndarray:
    k = int(round(frac * len(edges)))
    if k == 0:
        return edges
    keep = np.ones(len(edges), dtype=bool)
    keep[rng.choice(len(edges), size=k, replace=False)] = False
    present = {tuple(e) for e in edges.tolist()}
    kept = edges[keep].tolist()
    added = 0
    tries = 0
    while added < k and tries < 50 * k:
        tries += 1
        u, v = sorted(int(t) for t in rng.choice(n, size=2, replace=False))
        if (u, v) not in present:
            present.add((u, v))
            kept.append([u, v])
            added += 1
    return normalize_edges(kept)


def corpus_digest(graphs: Sequence[Graph]) -> str:
    h = hashlib.sha256()
    for g in graphs:
        h.update(np.int64(g.n).tobytes())
        h.update(np.int64(g.y).tobytes())
        h.update(g.edges.tobytes())
        h.update(g.x.tobytes())
    return h.hexdigest()
