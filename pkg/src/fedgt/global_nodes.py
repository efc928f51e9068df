"""Momentum online clustering that maintains a client's global nodes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .validation import check_positive_int, check_random_state


@dataclass(frozen=True, eq=False)
class GlobalNodes:
    """Centroids ``mu`` (n_g, d), running counts ``counts`` (n_g,), momentum ``gamma``."""

    mu: np.ndarray
    counts: np.ndarray
    gamma: float = 0.9

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if mu.ndim != 2 or counts.shape != (mu.shape[0],):
            raise ValueError(f"mu {mu.shape} and counts {counts.shape} disagree")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "counts", counts)

    @property
    def n_g(self) -> int:
        return self.mu.shape[0]

    def with_mu(self, mu) -> "GlobalNodes":
        return replace(self, mu=np.array(mu, dtype=np.float64))


def init_global_nodes(n_g: int = 10, d: int = 128, seed=None, gamma: float = 0.9) -> GlobalNodes:
    n_g = check_positive_int(n_g, "n_g", allow_zero=True)
    d = check_positive_int(d, "d")
    rng = check_random_state(seed)
    return GlobalNodes(rng.standard_normal((n_g, d)) / np.sqrt(d), np.ones(n_g), gamma)


def find_nearest(h_b, mu) -> np.ndarray:
    """One-hot ``(b, n_g)`` assignment to the Euclidean-nearest centroid (lowest index on ties)."""
    h_b = np.asarray(h_b, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if h_b.ndim != 2 or mu.ndim != 2 or h_b.shape[1] != mu.shape[1]:
        raise ValueError(f"dimension mismatch: batch {h_b.shape}, centroids {mu.shape}")
    dist = ((h_b[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
    p = np.zeros((h_b.shape[0], mu.shape[0]))
    p[np.arange(h_b.shape[0]), np.argmin(dist, axis=1)] = 1.0
    return p


def online_update(gn: GlobalNodes, h_b) -> GlobalNodes:
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_b.shape[0] == 0:
        raise ValueError("online_update needs a nonempty batch")
    if gn.n_g == 0:
        return gn
    g = gn.gamma
    p = find_nearest(h_b, gn.mu)
    mu = gn.counts[:, None] * gn.mu * g + (p.T @ h_b) * (1.0 - g)
    hits = p.sum(axis=0)
    counts = gn.counts * g + hits * (1.0 - g)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = mu / counts[:, None]
    # gamma cancels for clusters without points; keep them bitwise unchanged
    mu[hits == 0] = gn.mu[hits == 0]
    return GlobalNodes(mu, counts, g)
