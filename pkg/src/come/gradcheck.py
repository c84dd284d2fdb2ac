"""Central finite-difference checks for the tensor ops and loss kernels."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ensemble as E
from . import losses as L
from . import tensor as T


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, scale-relative per tensor."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(build: Callable[[list[T.Tensor]], T.Tensor], arrays: list[np.ndarray],
          eps: float = 1e-5) -> float:
    """Worst relative error between tape gradients and finite differences
    of ``sum(build(inputs))`` over every input array."""
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = build(leaves)
        loss = T.sum(out) if out.size > 1 else out
        tape.backward(loss)
    worst = 0.0
    for leaf in leaves:
        probe = leaf.value

        def f():
            return float(np.sum(build(leaves).value))

        numeric = numeric_grad(f, probe, eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(probe)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ------------------------------------------------------------ the suite


def _case_bcl(rng):
    B, d, h, M = int(rng.integers(2, 5)), 3, 4, 3
    y = rng.integers(0, M, size=B)
    alpha = float(rng.uniform(0.05, 1.0))
    cfg = L.BclConfig(tau=float(rng.uniform(0.3, 1.0)), alpha=alpha)
    arrays = [rng.normal(size=(B, d)), rng.normal(size=(B, d)), rng.normal(size=(B, h)),
              rng.normal(size=(M, h))]

    def build(t):
        z1, z2 = T.l2_normalize_rows(t[0]), T.l2_normalize_rows(t[1])
        return L.balanced_contrastive_loss(z1, z2, t[2], t[3], y, cfg)

    return build, arrays


def _prior(rng, M):
    return L.ClassPrior(rng.integers(1, 20, size=M))


def _case_balanced_nll(rng):
    B, M = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    y = rng.integers(0, M, size=B)
    prior = _prior(rng, M)
    return (lambda t: L.supervised_loss(t[0], y, prior, None)), [rng.normal(size=(B, M))]


def _case_hard_nll(rng):
    B, M = int(rng.integers(1, 5)), int(rng.integers(3, 7))
    y = rng.integers(0, M, size=B)
    prior = _prior(rng, M)
    O = rng.normal(size=(B, M))
    mask = L.mine_hard_classes(O, y, int(rng.integers(1, M)))

    def build(t):
        s = L.prior_scores(t[0], prior)
        return -T.take_along_rows(T.log_softmax_rows(s, mask), y)

    return build, [O]


def _case_fusion(rng):
    B, K, M = int(rng.integers(1, 4)), int(rng.integers(1, 4)), 3
    eta = float(rng.uniform(0, 2))
    kappa = float(rng.uniform(0.2, 1.0))
    arrays = ([rng.normal(size=(B, M)) for _ in range(K)] + [rng.normal(size=M) for _ in range(K)]
              + [rng.uniform(0.5, 2, size=(B, K)), rng.uniform(0.5, 2, size=(B, K))])

    def build(t):
        W = E.gating_weights(t[:K], t[K:2 * K], kappa)
        return E.fusion_loss(t[2 * K], t[2 * K + 1], W, eta)

    return build, arrays


def _case_inter(rng):
    B, K, M = int(rng.integers(1, 3)), 2, int(rng.integers(3, 5))
    y = rng.integers(0, M, size=B)
    b1, b2 = rng.uniform(0, 2, size=2)
    logits = [rng.normal(size=(B, M)) for _ in range(K)]
    m_hard = int(rng.integers(1, M))
    masks = [L.mine_hard_classes(o, y, m_hard) for o in logits]

    def build(t):
        return E.inter_expert_loss(t, y, b1, b2, masks)

    return build, logits


def _case_total(rng):
    B, K, M = 2, 2, 3
    y = rng.integers(0, M, size=B)
    prior = _prior(rng, M)
    eps_w = float(rng.uniform(0, 1))
    arrays = [rng.normal(size=(B, M)) for _ in range(K)] + [rng.normal(size=M) for _ in range(K)]
    # fixed outside the closure so finite-difference probes cannot flip a selection
    masks = [L.mine_hard_classes(a, y, 2) for a in arrays[:K]]

    def build(t):
        O = t[:K]
        S = T.concat([T.reshape(L.supervised_loss(o, y, prior, 2), (B, 1)) for o in O], axis=1)
        W = E.gating_weights(O, t[K:], 0.5)
        fusion = E.fusion_loss(S, None, W, 1.0)
        inter = E.inter_expert_loss([L.prior_scores(o, prior) for o in O], y, 1.0, 2.0, masks)
        return E.total_loss(fusion, inter, eps_w)

    return build, arrays


KERNELS = {
    "balanced_contrastive": _case_bcl,
    "balanced_nll": _case_balanced_nll,
    "hard_nll": _case_hard_nll,
    "gated_fusion": _case_fusion,
    "inter_expert_dkl": _case_inter,
    "total": _case_total,
}


@dataclass
class SuiteResult:
    kernel: str
    instances: int
    worst: float
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol


def run_suite(instances: int = 50, seed: int = 0, eps: float = 1e-5) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, make in KERNELS.items():
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            build, arrays = make(rng)
            worst = max(worst, check(build, arrays, eps))
        out.append(SuiteResult(name, instances, worst, time.perf_counter() - t0))
    return out
