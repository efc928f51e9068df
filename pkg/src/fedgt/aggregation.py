"""Server-side alignment of global nodes, client similarity and personalized averaging."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


class ZeroNormWarning(UserWarning):
    """A global-node row had zero norm; its cosine similarities were set to 0."""


def cosine_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        warnings.warn("zero-norm global node; cosine set to 0", ZeroNormWarning, stacklevel=3)
    na = np.where(na == 0, np.inf, na)
    nb = np.where(nb == 0, np.inf, nb)
    return np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)


def align_and_score(mu_i, mu_j):
    """Match rows of ``mu_j`` to rows of ``mu_i`` maximising mean cosine similarity.

    Returns ``(perm, score)`` where ``mu_j[perm]`` is aligned row-for-row with
    ``mu_i`` and ``score`` is the maximal mean cosine.
    """
    mu_i = np.asarray(mu_i, dtype=np.float64)
    mu_j = np.asarray(mu_j, dtype=np.float64)
    if mu_i.shape != mu_j.shape:
        raise ValueError(f"global-node sets differ in shape: {mu_i.shape} vs {mu_j.shape}")
    if mu_i.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), 1.0
    cos = cosine_matrix(mu_i, mu_j)
    rows, cols = linear_sum_assignment(cos, maximize=True)
    perm = np.empty(mu_i.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(cos[rows, cols].mean())


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """``values[i, j]`` is the aligned similarity; ``alignments[i][j]`` maps ``mu_j`` onto ``mu_i``."""

    values: np.ndarray
    alignments: list

    @property
    def num_clients(self) -> int:
        return self.values.shape[0]


def similarity_matrix(mus) -> SimilarityMatrix:
    mus = [np.asarray(m, dtype=np.float64) for m in mus]
    m = len(mus)
    if m == 0:
        raise ValueError("need at least one client")
    values = np.eye(m)
    n_g = mus[0].shape[0]
    ident = np.arange(n_g)
    alignments = [[ident.copy() if i == j else None for j in range(m)] for i in range(m)]
    for i, j in itertools.combinations(range(m), 2):
        perm, score = align_and_score(mus[i], mus[j])
        values[i, j] = values[j, i] = score
        alignments[i][j] = perm
        alignments[j][i] = np.argsort(perm)
    return SimilarityMatrix(values, alignments)


def personalized_weights(s_row, tau: float = 5.0) -> np.ndarray:
    """Softmax of ``tau * s_row`` over all clients, the client itself included."""
    z = tau * np.asarray(s_row, dtype=np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def aggregate_params(thetas, alpha_row) -> np.ndarray:
    """Convex combination ``sum_j alpha_j * theta_j``, summed left to right."""
    thetas = [np.asarray(t, dtype=np.float64) for t in thetas]
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if len(thetas) != alpha_row.size:
        raise ValueError(f"{len(thetas)} vectors but {alpha_row.size} weights")
    shape = thetas[0].shape
    out = np.zeros(shape)
    for a, t in zip(alpha_row, thetas):
        if t.shape != shape:
            raise ValueError(f"parameter shapes differ: {shape} vs {t.shape}")
        out = out + a * t
    return out


def aggregate_global_nodes(mus, alignments, alpha_row) -> np.ndarray:
    """Weighted average of aligned global-node sets.

    ``alignments[j]`` reorders ``mus[j]`` onto the receiving client's row order.
    """
    aligned = [np.asarray(mu, dtype=np.float64)[np.asarray(perm)] for mu, perm in zip(mus, alignments)]
    return aggregate_params(aligned, alpha_row)
