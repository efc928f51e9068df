"""Numerical checks of the global-attention approximation bound.

The attention here is the unscaled single-head form
``A(X) = softmax(H_b W_Q (X W_K)^T)`` and ``O(X) = A(X) X W_V``, kept
separate from the scaled multi-head attention of :mod:`fedgt.model`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .validation import check_random_state


class UnbalancedAssignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttentionInstance:
    h: np.ndarray  # (n_i, d) node representations
    h_b: np.ndarray  # (b, d) query batch
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    mu: np.ndarray  # (n_g, d) global nodes
    p: np.ndarray  # (n_i, n_g) one-hot assignment

    @property
    def is_balanced(self) -> bool:
        cols = self.p.sum(axis=0)
        return bool(np.all(self.p.sum(axis=1) == 1) and np.all(cols == cols[0]))


def attention_score(inst: AttentionInstance, x) -> np.ndarray:
    logits = inst.h_b @ inst.w_q @ (np.asarray(x) @ inst.w_k).T
    return softmax(logits, axis=1)


def attention_output(inst: AttentionInstance, x) -> np.ndarray:
    x = np.asarray(x)
    return attention_score(inst, x) @ x @ inst.w_v


def balanced_assignment(n_i: int, n_g: int, rng) -> np.ndarray:
    if n_i % n_g:
        raise ValueError(f"n_i={n_i} is not a multiple of n_g={n_g}")
    rng = check_random_state(rng)
    cols = rng.permutation(np.repeat(np.arange(n_g), n_i // n_g))
    p = np.zeros((n_i, n_g))
    p[np.arange(n_i), cols] = 1.0
    return p


def random_instance(n_i: int = 32, d: int = 8, n_g: int = 4, b: int = 8, d_out: int | None = None,
                    seed=None) -> AttentionInstance:
    """Gaussian H, H_b, weights and mu with a random balanced assignment."""
    rng = check_random_state(seed)
    d_out = d if d_out is None else d_out
    w = lambda: rng.standard_normal((d, d_out)) / np.sqrt(d)  # noqa: E731
    return AttentionInstance(
        h=rng.standard_normal((n_i, d)), h_b=rng.standard_normal((b, d)),
        w_q=w(), w_k=w(), w_v=w(), mu=rng.standard_normal((n_g, d)),
        p=balanced_assignment(n_i, n_g, rng),
    )


def lemma_residual(inst: AttentionInstance) -> float:
    """``||O(P mu) - O(mu)||_F``; zero up to rounding for a balanced assignment."""
    if not inst.is_balanced:
        raise UnbalancedAssignmentError("assignment must give every global node the same number of nodes")
    return float(np.linalg.norm(attention_output(inst, inst.p @ inst.mu) - attention_output(inst, inst.mu)))


def approximation_error(inst: AttentionInstance) -> float:
    return float(np.linalg.norm(inst.h - inst.p @ inst.mu) / np.linalg.norm(inst.h))


def lipschitz_estimate(inst: AttentionInstance, trials: int = 1000, seed=None) -> float:
    """Largest observed ``||A(X) - A(Y)||_F / ||X - Y||_F``.

    Pairs are drawn around ``H`` and ``P mu`` at several perturbation scales,
    and include points on the segment between them. This is a lower estimate
    of the true constant.
    """
    rng = check_random_state(seed)
    h, pmu = inst.h, inst.p @ inst.mu
    scale = np.linalg.norm(h) / np.sqrt(h.size)
    kind = np.arange(trials) % 3
    xs = np.empty((trials,) + h.shape)
    ys = np.empty_like(xs)
    seg = kind == 0
    lo_hi = np.sort(rng.random((int(seg.sum()), 2)), axis=1)
    xs[seg] = h + lo_hi[:, 0, None, None] * (pmu - h)
    ys[seg] = h + lo_hi[:, 1, None, None] * (pmu - h)
    for k, base in ((1, h), (2, pmu)):
        sel = kind == k
        m = int(sel.sum())
        outer = rng.choice([0.01, 0.1, 1.0], size=m)[:, None, None]
        inner = rng.choice([1e-3, 1e-2, 1e-1], size=m)[:, None, None]
        xs[sel] = base + rng.standard_normal((m,) + h.shape) * scale * outer
        ys[sel] = xs[sel] + rng.standard_normal((m,) + h.shape) * scale * inner
    q = inst.h_b @ inst.w_q
    a_x = softmax(np.einsum("bd,tnd->tbn", q, xs @ inst.w_k), axis=-1)
    a_y = softmax(np.einsum("bd,tnd->tbn", q, ys @ inst.w_k), axis=-1)
    gap = np.linalg.norm((xs - ys).reshape(trials, -1), axis=1)
    num = np.linalg.norm((a_x - a_y).reshape(trials, -1), axis=1)
    ok = gap > 0
    return float(np.max(num[ok] / gap[ok])) if np.any(ok) else 0.0


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    sigma: float
    c_hat: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


def bound_check(inst: AttentionInstance, trials: int = 1000, seed=None) -> BoundCheck:
    lhs = float(np.linalg.norm(attention_output(inst, inst.mu) - attention_output(inst, inst.h)))
    sigma = approximation_error(inst)
    c_hat = lipschitz_estimate(inst, trials, seed)
    rhs = c_hat * sigma * (2.0 + sigma) * np.linalg.norm(inst.h) ** 2 * np.linalg.norm(inst.w_v)
    return BoundCheck(lhs, float(rhs), sigma, c_hat)


def blob_instance(n_i: int = 32, d: int = 8, n_g: int = 4, b: int = 8, spread: float = 0.1,
                  separation: float = 3.0, seed=None, centroids: str = "kmeans") -> AttentionInstance:
    """Balanced blob-structured ``H`` with ``mu`` from k-means or drawn at random.

    With ``centroids="random"`` the global nodes are Gaussian draws and each
    node is assigned to its nearest one (the assignment may be unbalanced).
    """
    from sklearn.cluster import KMeans

    rng = check_random_state(seed)
    centers = rng.standard_normal((n_g, d)) * separation / np.sqrt(2.0)
    truth = balanced_assignment(n_i, n_g, rng)
    h = truth @ centers + spread * rng.standard_normal((n_i, d))
    w = lambda: rng.standard_normal((d, d)) / np.sqrt(d)  # noqa: E731
    h_b, w_q, w_k, w_v = rng.standard_normal((b, d)), w(), w(), w()
    if centroids == "kmeans":
        km = KMeans(n_clusters=n_g, n_init=10, random_state=int(rng.integers(2**31 - 1))).fit(h)
        mu, labels = km.cluster_centers_, km.labels_
    elif centroids == "random":
        mu = rng.standard_normal((n_g, d)) * separation / np.sqrt(2.0)
        labels = np.argmin(((h[:, None, :] - mu[None]) ** 2).sum(-1), axis=1)
    else:
        raise ValueError(f"unknown centroid mode {centroids!r}")
    p = np.zeros((n_i, n_g))
    p[np.arange(n_i), labels] = 1.0
    return AttentionInstance(h, h_b, w_q, w_k, w_v, mu, p)


def run_harness(trials: int = 100, n_i: int = 32, d: int = 8, n_gs=(2, 4, 8), bound_trials: int = 100,
                lipschitz_trials: int = 1000, seed: int = 0) -> dict:
    """Lemma exactness over random instances plus bound checks on blob instances."""
    rng = np.random.default_rng(seed)
    residuals = []
    for t in range(trials):
        residuals.append(lemma_residual(random_instance(n_i, d, n_gs[t % len(n_gs)], seed=rng)))
    checks = [bound_check(blob_instance(n_i, d, 4, seed=rng), lipschitz_trials, rng) for _ in range(bound_trials)]
    return {
        "residual_max": float(max(residuals)),
        "trials": trials,
        "bound_trials": bound_trials,
        "bound_holds": int(sum(c.holds for c in checks)),
        "lhs": float(max(c.lhs for c in checks)),
        "rhs": float(min(c.rhs for c in checks)),
        "sigma": float(np.mean([c.sigma for c in checks])),
        "c_hat": float(np.mean([c.c_hat for c in checks])),
        "min_margin": float(min(c.margin for c in checks)),
    }
