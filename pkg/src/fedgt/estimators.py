"""scikit-learn style wrappers over the functional core.

These follow the usual estimator contract (constructor stores hyperparameters
verbatim, learned state gets a trailing underscore, ``get_params`` /
``set_params`` / ``clone`` work) so the pieces can sit in pipelines or
parameter searches.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import global_nodes as gn_mod
from .graph import Graph
from .preprocess import laplacian_pe, ppr_matrix
from .privacy import LDPConfig
from .runtime import RunConfig, evaluate, predict, train


def _check_adjacency(a) -> sp.csr_matrix:
    a = sp.csr_matrix(check_array(a, accept_sparse="csr", dtype=np.float64))
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if (abs(a - a.T) > 0).nnz:
        raise ValueError("adjacency must be symmetric")
    return a


class LaplacianPositionalEncoding(TransformerMixin, BaseEstimator):
    """Laplacian eigenvector encoding of a graph given by its adjacency matrix."""

    def __init__(self, n_components: int = 8):
        self.n_components = n_components

    def fit(self, A, y=None):
        a = _check_adjacency(A)
        pe = laplacian_pe(a, self.n_components)
        self.embedding_ = np.array(pe.vectors)
        self.eigenvalues_ = pe.eigenvalues
        self.n_nodes_ = a.shape[0]
        return self

    def transform(self, A):
        check_is_fitted(self, "embedding_")
        a = _check_adjacency(A)
        if a.shape[0] != self.n_nodes_:
            raise ValueError("transform expects the graph the encoder was fitted on")
        return self.embedding_.copy()


class PersonalizedPageRank(TransformerMixin, BaseEstimator):
    def __init__(self, teleport: float = 0.15, method: str = "auto", tol: float = 1e-10):
        self.teleport = teleport
        self.method = method
        self.tol = tol

    def fit(self, A, y=None):
        a = _check_adjacency(A)
        self.matrix_ = np.array(ppr_matrix(a, self.teleport, self.method, self.tol).values)
        return self

    def transform(self, A):
        check_is_fitted(self, "matrix_")
        return self.matrix_.copy()


class OnlineGlobalNodes(ClusterMixin, BaseEstimator):
    """Momentum online clustering, usable like ``MiniBatchKMeans``.

    ``fit`` streams shuffled mini-batches through the update; ``partial_fit``
    applies a single batch.
    """

    def __init__(self, n_global_nodes: int = 10, momentum: float = 0.9, batch_size: int = 64,
                 max_epochs: int = 1, random_state=None):
        self.n_global_nodes = n_global_nodes
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.random_state = random_state

    def _init_state(self, d: int):
        rng = np.random.default_rng(self.random_state)
        self._rng = rng
        self.state_ = gn_mod.init_global_nodes(self.n_global_nodes, d, rng, self.momentum)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "state_"):
            self._init_state(X.shape[1])
        self.state_ = gn_mod.online_update(self.state_, X)
        self.n_features_in_ = X.shape[1]
        return self

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self._init_state(X.shape[1])
        for _ in range(self.max_epochs):
            order = self._rng.permutation(X.shape[0])
            for start in range(0, X.shape[0], self.batch_size):
                self.state_ = gn_mod.online_update(self.state_, X[order[start:start + self.batch_size]])
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.predict(X)
        return self

    @property
    def cluster_centers_(self):
        check_is_fitted(self, "state_")
        return self.state_.mu

    @property
    def counts_(self):
        check_is_fitted(self, "state_")
        return self.state_.counts

    def predict(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        return np.argmax(gn_mod.find_nearest(X, self.state_.mu), axis=1)


class FedGTClassifier(BaseEstimator):
    """Federated hybrid-attention graph transformer over client subgraphs.

    ``fit(graph, subgraphs)`` runs the full round loop; afterwards each client
    holds its personalized model and ``predict(client)`` / ``score(...)``
    query it on the client's own nodes (local indices).
    """

    def __init__(self, rounds: int = 100, local_epochs: int = 1, lr: float = 1e-3,
                 weight_decay: float = 5e-4, batch_size: int = 64, tau: float = 5.0,
                 gamma: float = 0.9, nu: float = 0.15, pe_dim: int = 8, n_s: int = 16,
                 n_g: int = 10, hidden: int = 128, heads: int = 4, layers: int = 2,
                 sampler: str = "ppr", split=(0.2, 0.4, 0.4), ldp_delta: float = 0.002,
                 ldp_lambda: float = 0.001, ldp_target: str = "global_nodes_only",
                 aggregation: str = "fedgt", random_state: int = 0):
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.tau = tau
        self.gamma = gamma
        self.nu = nu
        self.pe_dim = pe_dim
        self.n_s = n_s
        self.n_g = n_g
        self.hidden = hidden
        self.heads = heads
        self.layers = layers
        self.sampler = sampler
        self.split = split
        self.ldp_delta = ldp_delta
        self.ldp_lambda = ldp_lambda
        self.ldp_target = ldp_target
        self.aggregation = aggregation
        self.random_state = random_state

    def run_config(self) -> RunConfig:
        p = self.get_params()
        ldp = LDPConfig(p.pop("ldp_delta"), p.pop("ldp_lambda"), p.pop("ldp_target"))
        seed = p.pop("random_state")
        p["split"] = tuple(p["split"])
        return RunConfig(ldp=ldp, seed=seed, **p)

    def fit(self, graph: Graph, subgraphs, splits=None):
        if not isinstance(graph, Graph):
            raise TypeError("fit expects a fedgt.graph.Graph as its first argument")
        self.history_ = train(self.run_config(), graph, subgraphs, splits)
        self.server_ = self.history_.server
        self.n_clients_ = len(self.server_.clients)
        self.classes_ = np.arange(graph.num_classes)
        return self

    def _client(self, client: int):
        check_is_fitted(self, "server_")
        if not 0 <= client < self.n_clients_:
            raise ValueError(f"client must lie in [0, {self.n_clients_})")
        return self.server_.clients[client]

    def predict(self, client: int, nodes=None):
        state = self._client(client)
        nodes = np.arange(state.local.n) if nodes is None else nodes
        return predict(state.params, state, nodes)

    def score(self, client: int | None = None, part: str = "test") -> float:
        """Accuracy on one client's split part, or the mean over clients."""
        check_is_fitted(self, "server_")
        clients = range(self.n_clients_) if client is None else [client]
        return float(np.mean([evaluate(self._client(c).params, self._client(c), part) for c in clients]))
