"""Graph container, CSV ingestion, synthetic graphs, partitioning and statistics."""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
import scipy.sparse as sp

from .validation import check_positive_int, check_probability, check_random_state


class GraphFormatError(ValueError):
    """Raised for a malformed row in a nodes/edges/partition file."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class ReferentialError(ValueError):
    """Raised when a file references a node id that does not exist."""


class PartitionFallbackWarning(UserWarning):
    pass


def _canonical_edges(edges, n: int) -> np.ndarray:
    """Sorted, deduplicated ``(m, 2)`` array of undirected edges with ``i < j``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ReferentialError("edge endpoint out of range")
    edges = edges[edges[:, 0] != edges[:, 1]]
    edges = np.sort(edges, axis=1)
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(edges, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable simple undirected graph with node features and labels.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    """

    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    num_classes: int
    node_ids: tuple = ()
    adjacency: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"features {features.shape} and labels {labels.shape} disagree"
            )
        n = labels.shape[0]
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        edges = _canonical_edges(self.edges, n)
        node_ids = tuple(self.node_ids) if self.node_ids else tuple(str(i) for i in range(n))
        if len(node_ids) != n:
            raise ValueError("node_ids length must equal the node count")
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        for arr in (features, labels, edges):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "node_ids", node_ids)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(map(tuple, self.edges.tolist()))
        return g


@dataclass(frozen=True, eq=False)
class SubgraphSpec:
    """A client's induced subgraph; ``edges`` are in parent (global) indices."""

    client_id: int
    nodes: np.ndarray
    edges: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    def local_edges(self) -> np.ndarray:
        """Edges re-indexed to positions in ``nodes``."""
        order = np.argsort(self.nodes)
        pos = order[np.searchsorted(self.nodes[order], self.edges)]
        return pos.reshape(-1, 2)

    def local_graph(self, parent: Graph) -> Graph:
        return Graph(
            features=parent.features[self.nodes],
            labels=parent.labels[self.nodes],
            edges=self.local_edges(),
            num_classes=parent.num_classes,
            node_ids=tuple(parent.node_ids[i] for i in self.nodes),
        )


def induced_subgraph(g: Graph, nodes, client_id: int = 0) -> SubgraphSpec:
    nodes = np.asarray(nodes, dtype=np.int64)
    if np.unique(nodes).size != nodes.size:
        raise ValueError(f"client {client_id}: duplicate node indices")
    member = np.zeros(g.n, dtype=bool)
    member[nodes] = True
    keep = member[g.edges[:, 0]] & member[g.edges[:, 1]]
    nodes = nodes.copy()
    edges = g.edges[keep].copy()
    nodes.setflags(write=False)
    edges.setflags(write=False)
    return SubgraphSpec(client_id=client_id, nodes=nodes, edges=edges)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def part(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)


# --------------------------------------------------------------------- ingestion


def load_graph(nodes_path, edges_path, num_classes: int | None = None) -> Graph:
    """Read a graph from ``id,label,f0,...`` and ``src,dst`` CSV files.

    Edges are symmetrized and deduplicated; self-loops are dropped.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    ids, labels, feats = [], [], []
    index = {}
    with nodes_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["id", "label"]:
            raise GraphFormatError(nodes_path, 1, "header must start with 'id,label'")
        p = len(header) - 2
        if header[2:] != [f"f{i}" for i in range(p)]:
            raise GraphFormatError(nodes_path, 1, "feature columns must be f0..f{p-1}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 2:
                raise GraphFormatError(nodes_path, line, f"expected {p + 2} fields, got {len(row)}")
            node_id = row[0]
            if node_id in index:
                raise GraphFormatError(nodes_path, line, f"duplicate node id {node_id!r}")
            try:
                label = int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise GraphFormatError(nodes_path, line, str(exc)) from None
            if label < 0:
                raise GraphFormatError(nodes_path, line, "negative label")
            index[node_id] = len(ids)
            ids.append(node_id)
            labels.append(label)
            feats.append(values)

    edges = []
    with edges_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["src", "dst"]:
            raise GraphFormatError(edges_path, 1, "header must be 'src,dst'")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise GraphFormatError(edges_path, line, f"expected 2 fields, got {len(row)}")
            try:
                edges.append((index[row[0]], index[row[1]]))
            except KeyError as exc:
                raise ReferentialError(
                    f"{edges_path}:{line}: unknown node id {exc.args[0]!r}"
                ) from None

    k = num_classes if num_classes is not None else (max(labels) + 1 if labels else 0)
    features = np.array(feats, dtype=np.float64).reshape(len(ids), -1)
    return Graph(features, np.array(labels, dtype=np.int64), np.array(edges).reshape(-1, 2), k, tuple(ids))


def save_graph(g: Graph, nodes_path, edges_path) -> None:
    with Path(nodes_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{i}" for i in range(g.num_features)])
        for i in range(g.n):
            w.writerow([g.node_ids[i], int(g.labels[i])] + [repr(float(v)) for v in g.features[i]])
    with Path(edges_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        for i, j in g.edges.tolist():
            w.writerow([g.node_ids[i], g.node_ids[j]])


def load_partition(path, g: Graph) -> np.ndarray:
    """Read an ``id,client`` assignment file; every node must be assigned."""
    path = Path(path)
    index = {node_id: i for i, node_id in enumerate(g.node_ids)}
    assignment = np.full(g.n, -1, dtype=np.int64)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["id", "client"]:
            raise GraphFormatError(path, 1, "header must be 'id,client'")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise GraphFormatError(path, line, f"expected 2 fields, got {len(row)}")
            if row[0] not in index:
                raise ReferentialError(f"{path}:{line}: unknown node id {row[0]!r}")
            try:
                client = int(row[1])
            except ValueError:
                raise GraphFormatError(path, line, f"bad client id {row[1]!r}") from None
            if client < 0:
                raise GraphFormatError(path, line, "negative client id")
            assignment[index[row[0]]] = client
    missing = np.flatnonzero(assignment < 0)
    if missing.size:
        raise ReferentialError(f"{path}: node {g.node_ids[missing[0]]!r} has no client")
    return assignment


def save_partition(path, g: Graph, assignment) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "client"])
        for node_id, c in zip(g.node_ids, np.asarray(assignment).tolist()):
            w.writerow([node_id, c])


# ------------------------------------------------------------------- synthetic


def _block_means(num_blocks: int, dim: int, shift: float, rng) -> np.ndarray:
    """Unit-norm, mutually orthogonal block means scaled so pairwise distance is ``shift``."""
    if num_blocks <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_blocks)))
        means = q.T
    else:
        means = rng.standard_normal((num_blocks, dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means * (shift / math.sqrt(2.0))


def _sample_sbm_edges(sizes, prob, rng) -> np.ndarray:
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for a, b in itertools.combinations_with_replacement(range(len(sizes)), 2):
        p = prob(a, b)
        if p <= 0:
            continue
        ra = np.arange(offsets[a], offsets[a + 1])
        rb = np.arange(offsets[b], offsets[b + 1])
        if a == b:
            iu, ju = np.triu_indices(len(ra), k=1)
            cand = np.stack([ra[iu], ra[ju]], axis=1)
        else:
            cand = np.stack(np.meshgrid(ra, rb, indexing="ij"), axis=-1).reshape(-1, 2)
        keep = rng.random(cand.shape[0]) < p
        out.append(cand[keep])
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def generate_sbm(blocks, p_in: float, p_out: float, feature_dim: int = 16,
                 feature_shift: float = 3.0, seed=None) -> Graph:
    """Stochastic block model graph; the label of a node is its block id.

    Features are the block mean plus unit Gaussian noise. Block means are
    orthogonal directions (when ``len(blocks) <= feature_dim``) placed
    ``feature_shift`` apart.
    """
    sizes = [check_positive_int(b, "block size") for b in blocks]
    p_in = check_probability(p_in, "p_in")
    p_out = check_probability(p_out, "p_out")
    check_positive_int(feature_dim, "feature_dim")
    rng = check_random_state(seed)
    edges = _sample_sbm_edges(sizes, lambda a, b: p_in if a == b else p_out, rng)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    means = _block_means(len(sizes), feature_dim, feature_shift, rng)
    features = means[labels] + rng.standard_normal((labels.size, feature_dim))
    return Graph(features, labels, edges, len(sizes))


def generate_regime_sbm(num_regions: int = 4, num_classes: int = 4, nodes_per_class: int = 40,
                        p_class: float = 0.25, p_region: float = 0.02, p_out: float = 0.002,
                        feature_dim: int = 16, feature_shift: float = 3.0,
                        num_groups: int = 2, group_offset: float = 1.0, subspace_mix: float = 0.0,
                        seed=None):
    """SBM of regions with class blocks inside, and group-specific label regimes.

    Regions are dense communities that become clients. Regions are split into
    ``num_groups`` groups. Within group ``g`` the features of class ``c`` are
    centred on base mean ``(c + g) mod num_classes`` plus a group offset, so the
    same feature pattern means different labels in different groups.
    ``subspace_mix`` in [0, 1] rotates each group towards its own orthogonal
    set of class means: centre = sqrt(1 - mix) * shared + sqrt(mix) * own.

    Returns ``(graph, region, group)`` where the last two are per-node and
    per-region integer arrays.
    """
    if not 0.0 <= subspace_mix <= 1.0:
        raise ValueError(f"subspace_mix must lie in [0, 1], got {subspace_mix}")
    rng = check_random_state(seed)
    sizes = [nodes_per_class] * (num_regions * num_classes)

    def prob(a, b):
        if a == b:
            return p_class
        return p_region if a // num_classes == b // num_classes else p_out

    edges = _sample_sbm_edges(sizes, prob, rng)
    block = np.repeat(np.arange(len(sizes)), sizes)
    region = block // num_classes
    labels = block % num_classes
    group_of_region = np.arange(num_regions) * num_groups // num_regions
    k = num_classes
    means = _block_means(k * (1 + num_groups) if subspace_mix else k, feature_dim, feature_shift, rng)
    offsets = rng.standard_normal((num_groups, feature_dim))
    offsets *= group_offset / np.linalg.norm(offsets, axis=1, keepdims=True)
    g_node = group_of_region[region]
    centre = means[(labels + g_node) % k] + offsets[g_node]
    if subspace_mix:
        own = means[k + g_node * k + labels]
        centre = math.sqrt(1.0 - subspace_mix) * means[(labels + g_node) % k] + math.sqrt(subspace_mix) * own
        centre += offsets[g_node]
    features = centre + rng.standard_normal((labels.size, feature_dim))
    return Graph(features, labels, edges, num_classes), region, group_of_region


# ---------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray
    round_robin: bool = False

    @property
    def num_clients(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0


def _inter_edges(adj: sp.csr_matrix, groups: list) -> np.ndarray:
    n = adj.shape[0]
    member = np.zeros(n, dtype=np.int64)
    for gi, nodes in enumerate(groups):
        member[nodes] = gi
    onehot = sp.csr_matrix((np.ones(n), (np.arange(n), member)), shape=(n, len(groups)))
    return (onehot.T @ adj @ onehot).toarray()


def _split_group(nodes: np.ndarray, pieces: int, g: nx.Graph) -> list:
    """Cut a group into ``pieces`` contiguous chunks of a BFS ordering."""
    sub = g.subgraph(nodes.tolist())
    order = []
    for comp in sorted(nx.connected_components(sub), key=min):
        order.extend(nx.bfs_tree(sub, min(comp)).nodes)
    return [np.sort(np.array(chunk, dtype=np.int64)) for chunk in np.array_split(np.array(order), pieces)]


def partition_louvain(g: Graph, num_clients: int, seed=None, balance: float = 0.2) -> Partition:
    """Assign nodes to exactly ``num_clients`` clients from Louvain communities.

    Communities are split when too large and agglomerated by connectivity
    when too many, then nodes are moved across group borders until every
    group size is within ``balance`` of ``n / num_clients`` (when feasible).
    """
    k = check_positive_int(num_clients, "num_clients")
    if k > g.n:
        raise ValueError(f"num_clients={k} exceeds node count {g.n}")
    if k == 1:
        return Partition(np.zeros(g.n, dtype=np.int64))
    if g.num_edges == 0:
        warnings.warn("graph has no edges; using round-robin assignment", PartitionFallbackWarning)
        return Partition(np.arange(g.n, dtype=np.int64) % k, round_robin=True)

    nxg = g.to_networkx()
    seed_int = int(check_random_state(seed).integers(2**31 - 1)) if not isinstance(seed, int) else seed
    comms = nx.community.louvain_communities(nxg, seed=seed_int)
    groups = [np.array(sorted(c), dtype=np.int64) for c in comms]
    groups.sort(key=lambda a: (-a.size, a[0]))

    target = g.n / k
    hi = max(1, math.floor(target * (1 + balance)))
    lo = math.ceil(target * (1 - balance))

    split = []
    for grp in groups:
        if grp.size > hi:
            split.extend(_split_group(grp, math.ceil(grp.size / target), nxg))
        else:
            split.append(grp)
    groups = split
    while len(groups) < k:
        # split the largest group in two
        groups.sort(key=lambda a: (-a.size, a[0]))
        big = groups.pop(0)
        groups.extend(_split_group(big, 2, nxg))

    adj = g.adjacency
    while len(groups) > k:
        inter = _inter_edges(adj, groups)
        sizes = np.array([grp.size for grp in groups], dtype=np.float64)
        best, best_score = None, -1.0
        for a, b in itertools.combinations(range(len(groups)), 2):
            if sizes[a] + sizes[b] > hi:
                continue
            score = inter[a, b] / (sizes[a] * sizes[b])
            if score > best_score:
                best, best_score = (a, b), score
        if best is None:
            a, b = np.argsort(sizes, kind="stable")[:2]
            best = (min(a, b), max(a, b))
        a, b = best
        merged = np.sort(np.concatenate([groups[a], groups[b]]))
        groups = [grp for i, grp in enumerate(groups) if i not in best] + [merged]

    assignment = np.empty(g.n, dtype=np.int64)
    groups.sort(key=lambda a: a[0])
    for gi, grp in enumerate(groups):
        assignment[grp] = gi
    _rebalance(assignment, adj, k, lo, hi)
    return Partition(assignment)


def _rebalance(assignment: np.ndarray, adj: sp.csr_matrix, k: int, lo: int, hi: int) -> None:
    """Move border nodes from the largest to the smallest group until within bounds."""
    n = assignment.size
    for _ in range(n):
        sizes = np.bincount(assignment, minlength=k)
        if sizes.max() <= hi and sizes.min() >= lo:
            return
        src = int(np.argmax(sizes))
        dst = int(np.argmin(sizes))
        cand = np.flatnonzero(assignment == src)
        links = np.asarray(adj[cand][:, assignment == dst].sum(axis=1)).ravel()
        own = np.asarray(adj[cand][:, assignment == src].sum(axis=1)).ravel()
        # prefer nodes strongly tied to dst and weakly tied to src; lowest index on ties
        node = cand[np.lexsort((cand, own, -links))[0]]
        assignment[node] = dst


def make_nonoverlapping(g: Graph, assignment) -> list:
    assignment = np.asarray(getattr(assignment, "assignment", assignment), dtype=np.int64)
    if assignment.shape != (g.n,):
        raise ValueError("assignment must cover every node")
    if assignment.min() < 0:
        raise ValueError("assignment contains negative client ids")
    k = int(assignment.max()) + 1
    out = []
    for c in range(k):
        nodes = np.flatnonzero(assignment == c)
        if nodes.size == 0:
            raise ValueError(f"client {c} is empty")
        out.append(induced_subgraph(g, nodes, client_id=c))
    return out


def make_overlapping(g: Graph, num_base_parts: int, samples_per_part: int = 5,
                     sample_frac: float = 0.5, seed=None) -> list:
    """Draw ``samples_per_part`` random node samples from each Louvain base part."""
    check_positive_int(num_base_parts, "num_base_parts")
    check_positive_int(samples_per_part, "samples_per_part")
    if not 0.0 < sample_frac <= 1.0:
        raise ValueError(f"sample_frac must lie in (0, 1], got {sample_frac}")
    rng = check_random_state(seed)
    part = partition_louvain(g, num_base_parts, seed=int(rng.integers(2**31 - 1)))
    out = []
    for p in range(num_base_parts):
        members = np.flatnonzero(part.assignment == p)
        if members.size < 2:
            raise ValueError(f"base part {p} has fewer than 2 nodes")
        size = math.ceil(sample_frac * members.size)
        for _ in range(samples_per_part):
            nodes = np.sort(rng.choice(members, size=size, replace=False))
            out.append(induced_subgraph(g, nodes, client_id=len(out)))
    return out


def split_nodes(s: SubgraphSpec, ratios=(0.2, 0.4, 0.4), seed=None) -> Split:
    """Random train/val/test split in local indices; the remainder goes to test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) > 1 + 1e-12:
        raise ValueError(f"invalid split ratios {ratios}")
    n = s.n
    if n < 3:
        raise ValueError(f"client {s.client_id} has {n} nodes; at least 3 required")
    perm = check_random_state(seed).permutation(n)
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    if math.isclose(sum(ratios), 1.0):
        test = perm[n_train + n_val:]
    else:
        test = perm[n_train + n_val:n_train + n_val + math.floor(ratios[2] * n + 1e-9)]
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(test))


# ------------------------------------------------------------------ statistics


def count_missing_links(g: Graph, subgraphs) -> int:
    """Edges of ``g`` that no client stores."""
    if g.num_edges == 0:
        return 0
    covered = np.zeros(g.num_edges, dtype=bool)
    key = g.edges[:, 0] * g.n + g.edges[:, 1]
    for s in subgraphs:
        if s.edges.size:
            covered[np.searchsorted(key, s.edges[:, 0] * g.n + s.edges[:, 1])] = True
    return int((~covered).sum())


def label_histograms(subgraphs, labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([np.bincount(labels[s.nodes], minlength=num_classes) for s in subgraphs]).astype(np.float64)


def heterogeneity(subgraphs, labels, num_classes: int) -> float:
    """Mean pairwise cosine distance between client label histograms."""
    subgraphs = list(subgraphs)
    if len(subgraphs) < 2:
        raise ValueError("heterogeneity needs at least 2 subgraphs")
    for s in subgraphs:
        if s.n == 0:
            raise ValueError(f"client {s.client_id} has no nodes")
    hist = label_histograms(subgraphs, labels, num_classes)
    unit = hist / np.linalg.norm(hist, axis=1, keepdims=True)
    dists = [1.0 - float(unit[a] @ unit[b]) for a, b in itertools.combinations(range(len(hist)), 2)]
    return float(np.mean(dists))


def graph_stats(g: Graph, subgraphs) -> dict:
    subgraphs = list(subgraphs)
    return {
        "missing_links": count_missing_links(g, subgraphs),
        "heterogeneity": heterogeneity(subgraphs, g.labels, g.num_classes) if len(subgraphs) > 1 else 0.0,
        "client_sizes": [int(s.n) for s in subgraphs],
    }
