"""Per-expert loss kernels: the anchor-weighted balanced contrastive loss,
prior-adjusted (balanced) probabilities, hard-class mining and the
individual supervised loss.

Batched kernels take and return :class:`~come.tensor.Tensor` and produce one
value per sample, leaving the reduction to the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CONTRASTIVE_MODES = ("balanced", "supervised", "unsupervised")


@dataclass(frozen=True)
class BclConfig:
    tau: float = 0.2
    alpha: float = 0.05
    mode: str = "balanced"
    symmetrize: bool = False
    anchor_on_projection: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mode not in CONTRASTIVE_MODES:
            raise ValueError(f"unknown contrastive mode {self.mode!r}")


class ClassPrior:
    """Training-split class counts used as the label prior."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size < 1 or np.any(counts < 1):
            raise ValueError("class counts must be a non-empty vector of values >= 1")
        self.counts = counts
        self.log_counts = np.log(counts)

    @property
    def M(self) -> int:
        return len(self.counts)

    @classmethod
    def uniform(cls, M: int) -> "ClassPrior":
        return cls(np.ones(M))


# ------------------------------------------------------------ probabilities


def balanced_probability(o, prior: ClassPrior) -> np.ndarray:
    """``N_j exp(o_j) / sum_m N_m exp(o_m)`` for a logit vector (or rows)."""
    o = np.asarray(o, dtype=np.float64)
    if o.shape[-1] != prior.M:
        raise T.ShapeError("balanced_probability", o.shape, prior.counts.shape)
    s = o + prior.log_counts
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def mine_hard_classes(o, y, m_hard: int) -> np.ndarray:
    """Boolean mask of the ``m_hard`` highest non-target logits plus the target.

    Works on a single vector (``y`` an int) or on rows (``y`` an int array).
    Ties go to the lower class index.
    """
    o = np.asarray(o, dtype=np.float64)
    single = o.ndim == 1
    o2 = o[None] if single else o
    y2 = np.atleast_1d(np.asarray(y, dtype=np.int64))
    M = o2.shape[1]
    if not 1 <= m_hard <= M - 1:
        raise ValueError(f"m_hard must be in [1, {M - 1}], got {m_hard}")
    rows = np.arange(len(o2))
    masked = o2.copy()
    masked[rows, y2] = -np.inf
    order = np.argsort(-masked, axis=1, kind="stable")[:, :m_hard]
    mask = np.zeros(o2.shape, dtype=bool)
    mask[rows[:, None], order] = True
    mask[rows, y2] = True
    return mask[0] if single else mask


def hard_set(mask: np.ndarray) -> set[int]:
    return {int(j) for j in np.flatnonzero(mask)}


def hard_balanced_probability(o, prior: ClassPrior, mask) -> np.ndarray:
    """Balanced probability renormalised over the classes where ``mask`` holds;
    entries outside the set are NaN (they are undefined, not zero)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum(axis=-1).min() < 2:
        raise ValueError("hard class set must hold the target and at least one other class")
    s = np.where(mask, np.asarray(o, dtype=np.float64) + prior.log_counts, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.where(mask, p, np.nan)


def prior_scores(O: Tensor, prior: ClassPrior | None) -> Tensor:
    """``O + log N`` per row, or ``O`` itself for the plain-softmax path."""
    if prior is None:
        return O
    return T.add_rowvec(O, T.constant(prior.log_counts))


def supervised_loss(O: Tensor, y, prior: ClassPrior | None, m_hard: int | None) -> Tensor:
    """Per-sample ``-(log p_y + log p~_y)`` [B].

    ``prior=None`` swaps the balanced probability for a plain softmax;
    ``m_hard=None`` drops the hard-class term. The hard set is computed from
    the current logit values and carries no gradient.
    """
    y = np.asarray(y, dtype=np.int64)
    s = prior_scores(O, prior)
    nll = -T.take_along_rows(T.log_softmax_rows(s), y)
    if m_hard is None:
        return nll
    mask = mine_hard_classes(O.value, y, m_hard)
    return nll - T.take_along_rows(T.log_softmax_rows(s, mask), y)


# ------------------------------------------------------------- contrastive


def _pair_weights(y: np.ndarray, mode: str, alpha: float) -> np.ndarray:
    B = len(y)
    both = np.concatenate([y, y])
    w = (y[:, None] == both[None, :]).astype(np.float64)
    w[np.arange(B), np.arange(B)] = 0.0
    if mode == "balanced":
        return alpha * w
    if mode == "supervised":
        counts = w.sum(axis=1, keepdims=True)
        return np.divide(w, counts, out=np.zeros_like(w), where=counts > 0)
    out = np.zeros_like(w)
    out[np.arange(B), B + np.arange(B)] = 1.0
    return out


def _one_side(Z1: Tensor, Z2: Tensor, H1: Tensor, anchors: Tensor | None, y, cfg: BclConfig) -> Tensor:
    B = Z1.shape[0]
    both = T.concat([Z1, Z2], axis=0)
    pair = T.scale(T.matmul(Z1, T.transpose(both)), 1.0 / cfg.tau)
    keep = np.ones((B, 2 * B), dtype=bool)
    keep[np.arange(B), np.arange(B)] = False
    weights = _pair_weights(y, cfg.mode, cfg.alpha)
    if cfg.mode == "balanced":
        anchor = T.scale(T.matmul(H1, T.transpose(anchors)), 1.0 / cfg.tau)
        M = anchors.shape[0]
        scores = T.concat([pair, anchor], axis=1)
        keep = np.concatenate([keep, np.ones((B, M), dtype=bool)], axis=1)
        aw = np.zeros((B, M))
        aw[np.arange(B), y] = 1.0
        weights = np.concatenate([weights, aw], axis=1)
    else:
        scores = pair
    logp = T.log_softmax_rows(scores, keep)
    return -T.sum_rows(T.mul(logp, T.constant(weights)))


def balanced_contrastive_loss(Z1: Tensor, Z2: Tensor, H1: Tensor, anchors: Tensor | None,
                              y, cfg: BclConfig = BclConfig(), H2: Tensor | None = None) -> Tensor:
    """Per-sample contrastive loss [B] over a batch of two views.

    For sample ``i`` the candidates are every other view embedding in the batch
    (scored ``z . z_i / tau``) plus every class anchor (scored ``e . h_i / tau``,
    with ``h_i`` the raw view-1 embedding, or ``z_i`` when
    ``cfg.anchor_on_projection``). Same-label candidates weigh ``alpha`` and
    the own-class anchor weighs 1.

    ``cfg.mode`` switches to plain supervised contrast (no anchors, positives
    averaged) or to unsupervised contrast (the other view is the only
    positive). With ``cfg.symmetrize`` the view-2 mirrored loss is averaged in.
    """
    y = np.asarray(y, dtype=np.int64)
    if Z1.shape != Z2.shape or Z1.shape[0] != len(y):
        raise T.ShapeError("balanced_contrastive_loss", Z1.shape, Z2.shape)
    key1 = Z1 if cfg.anchor_on_projection else H1
    loss = _one_side(Z1, Z2, key1, anchors, y, cfg)
    if cfg.symmetrize:
        key2 = Z2 if cfg.anchor_on_projection else (H2 if H2 is not None else H1)
        loss = T.scale(loss + _one_side(Z2, Z1, key2, anchors, y, cfg), 0.5)
    return loss


def bcl_minimizer(W: int, alpha: float) -> tuple[float, float]:
    """Closed-form optimum ``(p_pair, p_anchor)`` of the weighted objective
    ``-alpha * sum_q log p_q - log p_e`` on the probability simplex."""
    return alpha / (alpha * W + 1.0), 1.0 / (alpha * W + 1.0)
