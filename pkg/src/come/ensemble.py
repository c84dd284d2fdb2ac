"""Gated fusion of expert losses, disentangled inter-expert distillation and
test-time fusion of expert logits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class FusionConfig:
    eta: float = 1.0
    kappa: float = 0.1
    gating: bool = True
    cosine: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.kappa <= 0:
            raise ValueError("gating temperature kappa must be > 0")


@dataclass(frozen=True)
class DistillConfig:
    beta1: float = 1.0
    beta2: float = 1.0
    epsilon: float = 0.6
    enabled: bool = True
    detach_teacher: bool = False
    hard_support: str = "first"

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.epsilon) < 0:
            raise ValueError("distillation weights must be >= 0")
        if self.hard_support not in ("first", "intersection"):
            raise ValueError(f"unknown hard_support {self.hard_support!r}")


# ------------------------------------------------------------------- gating


def gating_logits(logits: Sequence[Tensor], prototypes: Sequence[Tensor], kappa: float,
                  cosine: bool = True) -> Tensor:
    """[B, K] similarity between each expert's logits and its prototype, / kappa."""
    if kappa <= 0:
        raise ValueError("gating temperature kappa must be > 0")
    if len(logits) != len(prototypes):
        raise ValueError(f"{len(logits)} logit blocks but {len(prototypes)} prototypes")
    cols = []
    for O, w in zip(logits, prototypes):
        w_row = T.reshape(w, (1, w.size))
        if cosine:
            O = T.l2_normalize_rows(O)
            w_row = T.l2_normalize_rows(w_row)
        cols.append(T.matmul(O, T.transpose(w_row)))
    return T.scale(T.concat(cols, axis=1), 1.0 / kappa)


def gating_weights(logits, prototypes, kappa: float, cosine: bool = True) -> Tensor:
    """Softmax over experts of the gating scores, one row per sample [B, K].

    Plain arrays are accepted too: ``logits`` [K, M] and ``prototypes``
    [K, M] give the weights for a single sample.
    """
    if not isinstance(logits[0], Tensor):
        logits = [T.constant(np.asarray(o, dtype=np.float64).reshape(1, -1)) for o in logits]
        prototypes = [T.constant(np.asarray(w, dtype=np.float64)) for w in prototypes]
    return T.exp(T.log_softmax_rows(gating_logits(logits, prototypes, kappa, cosine)))


def uniform_weights(B: int, K: int) -> Tensor:
    return T.constant(np.full((B, K), 1.0 / K))


def fusion_loss(S: Tensor, C: Tensor | None, weights: Tensor, eta: float) -> Tensor:
    """Batch mean of ``sum_k w_ik (S_ik + eta * C_ik)`` over [B, K] blocks."""
    if S.shape != weights.shape or (C is not None and C.shape != S.shape):
        raise T.ShapeError("fusion_loss", S.shape, weights.shape)
    per = S if C is None or eta == 0 else S + T.scale(C, eta)
    return T.scale(T.sum(T.mul(weights, per)), 1.0 / S.shape[0])


# ------------------------------------------------------ KL and disentangling


def kl(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def _check_dist(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError(f"{name} has non-positive entries")
    return p


def kl_decomposition_check(p, q, y: int) -> tuple[float, float]:
    """``(KL(p||q), KL(b_p||b_q) + (1 - p_y) KL(p_nt||q_nt))`` where ``b`` is the
    target/non-target binary split and ``p_nt`` the distribution renormalised
    over the non-target classes."""
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    lhs = kl(p, q)
    return lhs, _target_kl(p, q, y) + (1.0 - p[y]) * _nontarget_kl(p, q, y)


def _target_kl(p, q, y) -> float:
    bp = np.array([p[y], max(1.0 - p[y], PROB_FLOOR)])
    bq = np.array([q[y], max(1.0 - q[y], PROB_FLOOR)])
    return kl(bp, bq)


def _nontarget_kl(p, q, y) -> float:
    keep = np.arange(len(p)) != y
    pn = p[keep] / p[keep].sum()
    qn = q[keep] / q[keep].sum()
    return kl(pn, qn)


def dkl(p, q, y: int, beta1: float, beta2: float) -> float:
    """Disentangled KL between two probability vectors (floored at 1e-12)."""
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    return beta1 * _target_kl(p, q, y) + beta2 * _nontarget_kl(p, q, y)


def dkl_scores(sk: Tensor, sq: Tensor, y, beta1, beta2, support=None) -> Tensor:
    """Per-sample disentangled KL [B] between the distributions ``softmax(sk)``
    and ``softmax(sq)`` restricted to ``support`` (all classes if None).

    Works in log space: ``log(1 - p_y)`` is the non-target log-sum-exp minus
    the full one, so saturated predictions stay finite. ``beta1`` and
    ``beta2`` may be scalars or per-sample arrays; ``beta2="natural"`` uses
    ``1 - p_y`` of the first distribution, which turns the sum back into the
    ordinary KL divergence.
    """
    y = np.asarray(y, dtype=np.int64)
    B, M = sk.shape
    full = np.ones((B, M), dtype=bool) if support is None else np.asarray(support, dtype=bool)
    nontarget = full.copy()
    nontarget[np.arange(B), y] = False

    def parts(s):
        lse = T.logsumexp_rows(s, full)
        lse_nt = T.logsumexp_rows(s, nontarget)
        log_py = T.take_along_rows(s, y) - lse
        log_ny = lse_nt - lse
        return log_py, log_ny, T.log_softmax_rows(s, nontarget)

    lpk, lnk, ntk = parts(sk)
    lpq, lnq, ntq = parts(sq)
    binary = T.mul(T.exp(lpk), lpk - lpq) + T.mul(T.exp(lnk), lnk - lnq)
    nt_mask = T.constant(nontarget.astype(np.float64))
    nontarget_kl = T.sum_rows(T.mul(T.mul(T.exp(ntk), nt_mask), ntk - ntq))
    w2 = T.exp(lnk) if isinstance(beta2, str) and beta2 == "natural" else _per_row(beta2, B)
    return T.mul(binary, _per_row(beta1, B)) + T.mul(nontarget_kl, w2)


def _per_row(beta, B) -> Tensor:
    return T.constant(np.broadcast_to(np.asarray(beta, dtype=np.float64), (B,)).copy())


def inter_expert_loss(scores: Sequence[Tensor], y, beta1, beta2,
                      hard_masks: Sequence[np.ndarray] | None = None,
                      detach_teacher: bool = False, hard_support: str = "first") -> Tensor:
    """Sum over ordered expert pairs (k, q), k != q, of the batch-mean
    disentangled KL from expert k to expert q, on the global distributions
    and (when ``hard_masks`` is given) on the hard-class distributions.

    For the hard term expert q is renormalised over expert k's hard set; with
    ``hard_support="intersection"`` both use the shared classes, and samples
    whose shared set holds only the target contribute nothing.
    """
    K = len(scores)
    B = scores[0].shape[0]
    if K < 2:
        return T.constant(0.0)
    total = None
    for k in range(K):
        for q in range(K):
            if q == k:
                continue
            teacher = T.constant(scores[q].value) if detach_teacher else scores[q]
            term = dkl_scores(scores[k], teacher, y, beta1, beta2)
            if hard_masks is not None:
                support = hard_masks[k]
                live = np.ones(B)
                if hard_support == "intersection":
                    shared = hard_masks[k] & hard_masks[q]
                    live = (shared.sum(axis=1) >= 2).astype(np.float64)
                    support = np.where(live[:, None] > 0, shared, hard_masks[k])
                hard = dkl_scores(scores[k], teacher, y, beta1, beta2, support)
                term = term + T.mul(hard, T.constant(live))
            pair = T.mean(term)
            total = pair if total is None else total + pair
    return total


def inter_expert_loss_plain_kl(scores: Sequence[np.ndarray], y, hard_masks=None) -> float:
    """Reference value of :func:`inter_expert_loss` written with ordinary KL on
    explicit probability vectors (no decomposition)."""
    y = np.asarray(y, dtype=np.int64)
    K = len(scores)
    total = 0.0

    def dist(s, mask):
        s = np.where(mask, s, -np.inf)
        e = np.exp(s - s.max())
        return e[mask] / e[mask].sum()

    for k in range(K):
        for q in range(K):
            if q == k:
                continue
            acc = 0.0
            for i in range(len(y)):
                full = np.ones(scores[k].shape[1], dtype=bool)
                acc += kl(dist(scores[k][i], full), dist(scores[q][i], full))
                if hard_masks is not None:
                    m = hard_masks[k][i]
                    acc += kl(dist(scores[k][i], m), dist(scores[q][i], m))
            total += acc / len(y)
    return total


def total_loss(fusion: Tensor, inter: Tensor | None, epsilon: float) -> Tensor:
    if inter is None or epsilon == 0:
        return fusion
    return fusion + T.scale(inter, epsilon)


def fused_inference(logits) -> np.ndarray:
    """Softmax of the expert-averaged logits.

    ``logits`` is [K, M] for one sample or [K, n, M] for many."""
    avg = np.asarray(logits, dtype=np.float64).mean(axis=0)
    avg = avg - avg.max(axis=-1, keepdims=True)
    e = np.exp(avg)
    return e / e.sum(axis=-1, keepdims=True)
