"""Training loop, evaluation, baselines and the ablation runner."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment as A
from . import ensemble as E
from . import losses as L
from . import tensor as T
from .config import TrainConfig, effective
from .expert import ExpertBank, GraphBatch, save_checkpoint
from .graphs import (DatasetStats, Graph, Splits, build_splits, generate_motif_corpus,
                     ingest_tu, load_jsonl)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, graph_ids, cause: Exception):
        self.epoch, self.batch, self.graph_ids = epoch, batch, list(graph_ids)
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} "
                         f"(graphs {self.graph_ids[:8]}...): {cause}")


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: dict[str, T.Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            p.value = p.value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ------------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    fsl: float = 0.0
    fcl: float = 0.0
    fusion: float = 0.0
    inter: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _views(graphs: Sequence[Graph], ids: Sequence[int], kinds, ratio: float, seed: int,
           epoch: int, expert: int):
    out = []
    for v, kind in enumerate(kinds):
        out.append([A.apply(g, A.AugmentSpec(kind, ratio, A.view_seed(seed, epoch, i, 2 * expert + v)))
                    for g, i in zip(graphs, ids)])
    return out


def compute_loss(bank: ExpertBank, graphs: Sequence[Graph], config: TrainConfig,
                 counts: Sequence[int], ids: Sequence[int] | None = None,
                 epoch: int = 0) -> tuple[T.Tensor, LossBreakdown]:
    """Total objective on one mini-batch (records onto the active tape)."""
    cfg = effective(config)
    B = len(graphs)
    K = len(bank)
    M = len(counts)
    ids = list(range(B)) if ids is None else list(ids)
    y = np.array([g.y for g in graphs], dtype=np.int64)
    prior = L.ClassPrior(counts) if cfg.bpp else None
    m_hard = min(cfg.m_hard, M - 1) if cfg.hcm else None
    pairs = cfg.augment.pairs or A.default_pairs(K)

    logits, S_cols, C_cols, scores, masks = [], [], [], [], []
    for k, expert in enumerate(bank):
        if cfg.contrastive:
            v1, v2 = _views(graphs, ids, pairs[k], cfg.augment.ratio, cfg.seed, epoch, k)
            H = expert.encode(GraphBatch.pack(list(graphs) + v1 + v2))
            H0 = T.gather_rows(H, np.arange(B))
            H1 = T.gather_rows(H, np.arange(B, 2 * B))
            H2 = T.gather_rows(H, np.arange(2 * B, 3 * B))
        else:
            H0 = expert.encode(GraphBatch.pack(graphs))
        O = expert.classify(H0)
        logits.append(O)
        S_cols.append(T.reshape(L.supervised_loss(O, y, prior, m_hard), (B, 1)))
        if cfg.contrastive:
            Z1, Z2 = expert.project(H1), expert.project(H2)
            C = L.balanced_contrastive_loss(Z1, Z2, H1, expert["anchors"], y, cfg.bcl, H2=H2)
            C_cols.append(T.reshape(C, (B, 1)))
        scores.append(L.prior_scores(O, prior))
        if m_hard is not None:
            masks.append(L.mine_hard_classes(O.value, y, m_hard))

    S = T.concat(S_cols, axis=1)
    C = T.concat(C_cols, axis=1) if C_cols else None
    if cfg.fusion.gating:
        W = E.gating_weights(logits, [e["gate"] for e in bank], cfg.fusion.kappa, cfg.fusion.cosine)
    else:
        W = E.uniform_weights(B, K)
    fusion = E.fusion_loss(S, C, W, cfg.fusion.eta)
    inter = None
    if cfg.distill.enabled and K > 1:
        inter = E.inter_expert_loss(scores, y, cfg.distill.beta1, cfg.distill.beta2,
                                    masks if m_hard is not None else None,
                                    cfg.distill.detach_teacher, cfg.distill.hard_support)
    total = E.total_loss(fusion, inter, cfg.distill.epsilon)

    w = W.value
    parts = LossBreakdown(
        fsl=float((w * S.value).sum() / B),
        fcl=float((w * C.value).sum() / B) if C is not None else 0.0,
        fusion=fusion.item(),
        inter=inter.item() if inter is not None else 0.0,
        total=total.item(),
    )
    return total, parts


def train_step(bank: ExpertBank, opt: Adam, graphs, config, counts, ids=None, epoch=0) -> LossBreakdown:
    bank.zero_grad()
    with T.Tape() as tape:
        loss, parts = compute_loss(bank, graphs, config, counts, ids, epoch)
        tape.backward(loss)
    opt.step()
    return parts


# --------------------------------------------------------------- evaluation


@dataclass
class Metrics:
    accuracy: float
    per_class: list[float]
    groups: dict[str, float]
    n: int
    loss_history: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class": self.per_class,
                "groups": self.groups, "n": self.n}


def class_groups(counts: Sequence[int]) -> dict[str, list[int]]:
    """Head / medium / tail class terciles by training count."""
    M = len(counts)
    order = sorted(range(M), key=lambda c: (-counts[c], c))
    edge = max(1, int(round(M / 3)))
    if M < 2 * edge:
        edge = M // 2
    return {"head": order[:edge], "medium": order[edge:M - edge], "tail": order[M - edge:]}


def metrics_from_predictions(pred, y, counts: Sequence[int]) -> Metrics:
    pred = np.asarray(pred)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty split")
    M = len(counts)
    correct = pred == y
    per_class = [float(correct[y == c].mean()) if np.any(y == c) else float("nan") for c in range(M)]
    groups = {}
    for name, members in class_groups(counts).items():
        sel = np.isin(y, members)
        groups[name] = float(correct[sel].mean()) if sel.any() else float("nan")
    return Metrics(float(correct.mean()), per_class, groups, len(y))


def predict(bank: ExpertBank, graphs: Sequence[Graph]) -> np.ndarray:
    return E.fused_inference(bank.logits(graphs)).argmax(axis=-1)


def evaluate(bank: ExpertBank, graphs: Sequence[Graph], counts: Sequence[int]) -> Metrics:
    """Top-1 accuracy of the averaged-logit prediction, per class and per group."""
    if not graphs:
        raise ValueError("cannot evaluate an empty split")
    return metrics_from_predictions(predict(bank, graphs), [g.y for g in graphs], counts)


# ------------------------------------------------------------------- data


def load_dataset(config: TrainConfig) -> Splits:
    d = config.data
    if d.source == "splits":
        root = Path(d.path)
        train = load_jsonl(root / "train.jsonl")
        val = load_jsonl(root / "val.jsonl")
        test = load_jsonl(root / "test.jsonl")
        M = max(g.y for g in train + val + test) + 1
        return Splits(train, val, test, DatasetStats.of(train, M))
    if d.source == "motif":
        graphs = generate_motif_corpus(d.classes, d.per_class, d.noise, seed=d.seed,
                                       background=d.background, motifs=d.motifs)
    elif d.source == "tu":
        graphs, _ = ingest_tu(d.path)
    elif d.source == "jsonl":
        graphs = load_jsonl(d.path)
    else:
        raise ValueError(f"unknown data source {d.source!r}")
    return build_splits(graphs, d.imbalance, d.val_per_class, d.test_per_class, seed=d.seed,
                        shuffle_classes=d.shuffle_classes)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    bank: ExpertBank
    history: list[dict]
    val: Metrics
    test: Metrics | None
    best_epoch: int
    checkpoint: Path | None = None


def make_bank(config: TrainConfig, splits: Splits) -> ExpertBank:
    cfg = effective(config)
    return ExpertBank(cfg.K, splits.in_dim, splits.M, cfg.model.hidden, cfg.model.z_dim,
                      cfg.model.layers, cfg.bcl.anchor_on_projection, seed=cfg.seed)


def _epoch_order(config: TrainConfig, train: Sequence[Graph], rng) -> np.ndarray:
    n = len(train)
    if config.method != "oversample-baseline":
        return rng.permutation(n)
    y = np.array([g.y for g in train])
    weight = 1.0 / np.bincount(y)[y]
    return rng.choice(n, size=n, replace=True, p=weight / weight.sum())


def train(config: TrainConfig, splits: Splits, out_dir=None) -> TrainResult:
    """Mini-batch Adam over the long-tailed training split with per-epoch
    validation; the best-validation parameters are restored at the end."""
    counts = list(splits.stats.class_sizes)
    bank = make_bank(config, splits)
    params = bank.named_parameters()
    opt = Adam(params, config.lr)
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        jsonl = open(out / "metrics.jsonl", "w")
    history: list[dict] = []
    best_acc, best_epoch, best_state = -1.0, -1, bank.state()
    stale = 0
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = _epoch_order(config, splits.train, rng)
            parts = []
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                batch = [splits.train[i] for i in idx]
                try:
                    parts.append(train_step(bank, opt, batch, config, counts, idx, epoch))
                except T.NumericalError as exc:
                    raise TrainingDiverged(epoch, b, [g.gid for g in batch], exc) from exc
            val = evaluate(bank, splits.val, counts)
            row = {"epoch": epoch,
                   **{k: float(np.mean([getattr(p, k) for p in parts])) for k in LossBreakdown().as_dict()},
                   "val_accuracy": val.accuracy, "seconds": time.perf_counter() - t0}
            history.append(row)
            if out is not None:
                jsonl.write(json.dumps(row) + "\n")
                jsonl.flush()
            if val.accuracy > best_acc:
                best_acc, best_epoch, best_state, stale = val.accuracy, epoch, bank.state(), 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
    finally:
        if out is not None:
            jsonl.close()
    bank.load_state(best_state)
    val = evaluate(bank, splits.val, counts)
    test = evaluate(bank, splits.test, counts) if splits.test else None
    result = TrainResult(bank, history, val, test, best_epoch)
    if out is not None:
        result.checkpoint = out / "checkpoint.npz"
        save_checkpoint(bank, result.checkpoint,
                        {"config": config.to_dict(), "class_sizes": counts, "best_epoch": best_epoch})
    return result


# ------------------------------------------------------------------ ablation

COMPONENTS = ("bcl", "hcm", "gating", "distill", "bpp")

VARIANTS = {
    "M1": dict(bcl="off", hcm=False, gating=False, distill=False),
    "M2": dict(bcl="off", hcm=True, gating=False, distill=False),
    "M3": dict(bcl="balanced", hcm=False, gating=False, distill=False),
    "M4": dict(bcl="balanced", hcm=True, gating=False, distill=False),
    "M5": dict(bcl="balanced", hcm=True, gating=True, distill=False),
    "M6": dict(bcl="balanced", hcm=True, gating=False, distill=True),
    "M7": dict(bcl="balanced", hcm=True, gating=True, distill=True),
    # contrastive-objective / balanced-probability swaps on the full model
    "plain": dict(bcl="off", bpp=False),
    "ucl+bpp": dict(bcl="unsupervised", bpp=True),
    "scl+bpp": dict(bcl="supervised", bpp=True),
    "bcl": dict(bcl="balanced", bpp=False),
    "bcl+bpp": dict(bcl="balanced", bpp=True),
}


def apply_switches(config: TrainConfig, switches: dict) -> TrainConfig:
    """Map component switches onto a ``come`` config. Missing switches keep
    the config's own setting."""
    unknown = set(switches) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown ablation switch(es): {sorted(unknown)}")
    cfg = config.replace(method="come")
    if "bcl" in switches:
        mode = switches["bcl"]
        if mode in (False, "off", None):
            cfg = cfg.replace(contrastive=False)
        else:
            mode = "balanced" if mode is True else mode
            cfg = cfg.replace(contrastive=True, bcl=dataclasses.replace(cfg.bcl, mode=mode))
    if "hcm" in switches:
        cfg = cfg.replace(hcm=bool(switches["hcm"]))
    if "bpp" in switches:
        cfg = cfg.replace(bpp=bool(switches["bpp"]))
    if "gating" in switches:
        cfg = cfg.replace(fusion=dataclasses.replace(cfg.fusion, gating=bool(switches["gating"])))
    if "distill" in switches:
        cfg = cfg.replace(distill=dataclasses.replace(cfg.distill, enabled=bool(switches["distill"])))
    return cfg


def variant_switches(name: str) -> dict:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")
    return dict(VARIANTS[name])


def seeded(config: TrainConfig, seed: int) -> TrainConfig:
    return config.replace(seed=seed, data=dataclasses.replace(config.data, seed=seed))


def run_seeds(config: TrainConfig, seeds: Sequence[int], cache: dict | None = None) -> list[Metrics]:
    """Train and test once per seed; the seed drives both data and init."""
    cache = {} if cache is None else cache
    out = []
    for s in seeds:
        cfg = seeded(config, s)
        key = json.dumps(dataclasses.asdict(cfg.data), sort_keys=True)
        if key not in cache:
            cache[key] = load_dataset(cfg)
        out.append(train(cfg, cache[key]).test)
    return out


def summarize(name: str, runs: Sequence[Metrics]) -> dict:
    accs = [m.accuracy for m in runs]
    row = {"variant": name, "accuracy": float(np.mean(accs)), "std": float(np.std(accs)),
           "seeds": len(runs)}
    for g in ("head", "medium", "tail"):
        row[g] = float(np.nanmean([m.groups[g] for m in runs]))
    return row


def run_ablation(config: TrainConfig, variants: Sequence[str] = ("M1", "M2", "M3", "M4", "M5", "M6", "M7"),
                 seeds: Sequence[int] = (0, 1, 2, 3, 4), switches: dict | None = None) -> list[dict]:
    """Train every variant over the seeds; rows carry mean accuracy and the
    delta against M1 (or the first variant when M1 is absent).

    ``switches`` are extra component settings applied on top of every variant.
    """
    cache: dict = {}
    rows = []
    for name in variants:
        sw = {**variant_switches(name), **(switches or {})}
        row = summarize(name, run_seeds(apply_switches(config, sw), seeds, cache))
        row.update({k: sw.get(k, "") for k in COMPONENTS})
        rows.append(row)
    base = next((r for r in rows if r["variant"] == "M1"), rows[0])
    for r in rows:
        r["delta"] = r["accuracy"] - base["accuracy"]
    return rows
