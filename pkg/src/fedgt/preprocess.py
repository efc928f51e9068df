"""Per-client preprocessing: personalized PageRank, Laplacian PE, context sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .validation import check_positive_int, check_random_state

EXACT_PPR_MAX_NODES = 2000
MAX_POWER_ITERATIONS = 10_000


class ConvergenceError(RuntimeError):
    pass


def _adjacency(s, n: int | None = None) -> sp.csr_matrix:
    """Local symmetric adjacency of a SubgraphSpec, a Graph, or a sparse matrix."""
    if sp.issparse(s):
        return sp.csr_matrix(s, dtype=np.float64)
    if hasattr(s, "local_edges"):
        edges, n = s.local_edges(), s.n
    else:
        edges, n = s.edges, s.n
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


@dataclass(frozen=True, eq=False)
class PPRMatrix:
    """``values = nu * (I - (1 - nu) * A_bar)^-1`` with ``A_bar`` column-normalized.

    Column ``c`` is the PageRank vector personalized at node ``c``.
    """

    values: np.ndarray
    nu: float

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def scores(self, center: int) -> np.ndarray:
        return self.values[:, center]


def ppr_matrix(s, nu: float = 0.15, method: str = "auto", tol: float = 1e-10) -> PPRMatrix:
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    adj = _adjacency(s)
    n = adj.shape[0]
    if n == 0:
        raise ValueError("subgraph is empty")
    if method == "auto":
        method = "exact" if n <= EXACT_PPR_MAX_NODES else "power_iteration"
    deg = np.asarray(adj.sum(axis=0)).ravel()
    isolated = deg == 0
    inv = np.zeros(n)
    inv[~isolated] = 1.0 / deg[~isolated]
    a_bar = adj @ sp.diags(inv)

    if method == "exact":
        system = np.eye(n) - (1.0 - nu) * a_bar.toarray()
        values = nu * np.linalg.solve(system, np.eye(n))
    elif method == "power_iteration":
        eye = np.eye(n)
        values = nu * eye
        for _ in range(MAX_POWER_ITERATIONS):
            nxt = nu * eye + (1.0 - nu) * (a_bar @ values)
            change = np.max(np.abs(nxt - values))
            values = nxt
            if change < tol:
                break
        else:
            raise ConvergenceError(f"power iteration did not converge in {MAX_POWER_ITERATIONS} steps")
    else:
        raise ValueError(f"unknown PPR method {method!r}")

    idx = np.flatnonzero(isolated)
    values[idx, :] = 0.0
    values[:, idx] = 0.0
    values[idx, idx] = 1.0
    np.maximum(values, 0.0, out=values)
    values.setflags(write=False)
    return PPRMatrix(values, float(nu))


@dataclass(frozen=True, eq=False)
class PositionalEncoding:
    vectors: np.ndarray
    eigenvalues: np.ndarray

    @property
    def k(self) -> int:
        return self.vectors.shape[1]


def normalized_laplacian(adj: sp.spmatrix) -> np.ndarray:
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    norm = sp.diags(inv_sqrt) @ adj @ sp.diags(inv_sqrt)
    return np.eye(adj.shape[0]) - norm.toarray()


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive (first one on ties)
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def laplacian_pe(s, k: int = 8) -> PositionalEncoding:
    """Eigenvectors of ``I - D^-1/2 A D^-1/2`` for the k smallest eigenvalues after the first.

    Columns beyond the available eigenpairs are zero (eigenvalue reported as nan).
    """
    k = check_positive_int(k, "k")
    adj = _adjacency(s)
    n = adj.shape[0]
    lap = normalized_laplacian(adj)
    evals, evecs = np.linalg.eigh(lap)
    usable = min(k, n - 1)
    vectors = np.zeros((n, k))
    values = np.full(k, np.nan)
    if usable > 0:
        vectors[:, :usable] = _fix_signs(evecs[:, 1:usable + 1])
        values[:usable] = evals[1:usable + 1]
    vectors.setflags(write=False)
    return PositionalEncoding(vectors, values)


# -------------------------------------------------------------- local context


@dataclass(frozen=True)
class LocalContext:
    center: int
    neighbors: np.ndarray  # length n_s, padding entries are -1
    mask: np.ndarray  # True for real samples

    @property
    def num_real(self) -> int:
        return int(self.mask.sum())


SAMPLING_STRATEGIES = ("ppr", "uniform_neighbor", "attribute")


def _weighted_sample(candidates, weights, n_s, rng) -> np.ndarray:
    if candidates.size <= n_s:
        return candidates
    p = weights / weights.sum()
    return rng.choice(candidates, size=n_s, replace=False, p=p)


def sample_local_context(center: int, ppr: PPRMatrix | None, n_s: int = 16, strategy: str = "ppr",
                         seed=None, *, adjacency=None, features=None) -> LocalContext:
    """Sample ``n_s`` distinct context nodes for ``center``.

    ``ppr`` draws proportionally to the center's personalized PageRank scores,
    ``uniform_neighbor`` uniformly among graph neighbours (needs ``adjacency``),
    ``attribute`` proportionally to positive feature cosine similarity (needs
    ``features``). Short candidate lists are padded with masked ``-1`` entries.
    """
    n_s = check_positive_int(n_s, "n_s", allow_zero=True)
    rng = check_random_state(seed)
    if strategy == "ppr":
        if ppr is None:
            raise ValueError("ppr strategy needs a PPRMatrix")
        w = np.array(ppr.scores(center), dtype=np.float64)
    elif strategy == "uniform_neighbor":
        if adjacency is None:
            raise ValueError("uniform_neighbor strategy needs the adjacency matrix")
        w = np.asarray(sp.csr_matrix(adjacency)[center].toarray()).ravel().astype(np.float64)
    elif strategy == "attribute":
        if features is None:
            raise ValueError("attribute strategy needs node features")
        x = np.asarray(features, dtype=np.float64)
        norms = np.linalg.norm(x, axis=1)
        norms[norms == 0] = 1.0
        w = np.maximum(x @ x[center] / (norms * norms[center]), 0.0)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}; expected one of {SAMPLING_STRATEGIES}")
    w[center] = 0.0
    candidates = np.flatnonzero(w > 0)
    chosen = _weighted_sample(candidates, w[candidates], n_s, rng) if n_s else candidates[:0]
    neighbors = np.full(n_s, -1, dtype=np.int64)
    neighbors[:chosen.size] = chosen
    mask = np.zeros(n_s, dtype=bool)
    mask[:chosen.size] = True
    return LocalContext(int(center), neighbors, mask)


def sample_contexts(centers, ppr, n_s, strategy="ppr", seed=None, **kwargs):
    """Sample contexts for many centers; returns ``(neighbors, mask)`` arrays of shape (b, n_s)."""
    rng = check_random_state(seed)
    centers = np.asarray(centers, dtype=np.int64)
    neighbors = np.full((centers.size, n_s), -1, dtype=np.int64)
    mask = np.zeros((centers.size, n_s), dtype=bool)
    for i, c in enumerate(centers):
        ctx = sample_local_context(int(c), ppr, n_s, strategy, rng, **kwargs)
        neighbors[i] = ctx.neighbors
        mask[i] = ctx.mask
    return neighbors, mask


# ---------------------------------------------------------------- cache files

MATRIX_MAGIC = b"FEDGTMAT"


def write_matrix(path, matrix) -> None:
    """Write a float64 matrix: 8-byte magic, two uint64 dims, row-major LE data."""
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError("only 1-d or 2-d arrays can be written")
    with Path(path).open("wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", *m.shape))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MATRIX_MAGIC:
        raise ValueError(f"{path}: bad magic header")
    rows, cols = struct.unpack("<QQ", data[8:24])
    body = data[24:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows}x{cols} float64 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
