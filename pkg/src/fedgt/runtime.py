"""Round-based federated training with personalized aggregation.

Everything runs in one process. Clients are stepped one after another inside
a round and only exchange :class:`RoundMessage` values with the server, so
the result does not depend on the execution order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import aggregation as agg
from .global_nodes import GlobalNodes, init_global_nodes, online_update
from .graph import Graph, Split, SubgraphSpec, split_nodes
from .model import (AdamState, ModelConfig, adam_step, build_batch, flatten, forward,
                    init_params, loss_and_grad, unflatten)
from .preprocess import laplacian_pe, ppr_matrix, sample_contexts
from .privacy import LDPConfig, ldp_apply, privacy_budget

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("fedgt", "uniform", "local")


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 100
    local_epochs: int = 1
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    tau: float = 5.0
    gamma: float = 0.9
    nu: float = 0.15
    pe_dim: int = 8
    n_s: int = 16
    n_g: int = 10
    hidden: int = 128
    heads: int = 4
    layers: int = 2
    sampler: str = "ppr"
    split: tuple = (0.2, 0.4, 0.4)
    ldp: LDPConfig = field(default_factory=LDPConfig)
    aggregation: str = "fedgt"
    seed: int = 0
    eval_seed: int = 12345

    def __post_init__(self):
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}")
        for name in ("rounds", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def model_config(self, num_features: int, num_classes: int) -> ModelConfig:
        return ModelConfig(num_features=num_features, num_classes=num_classes, hidden=self.hidden,
                           heads=self.heads, layers=self.layers, pe_dim=self.pe_dim,
                           n_s=self.n_s, n_g=self.n_g)

    @property
    def epsilon(self) -> float | None:
        if self.ldp.target == "off" or self.ldp.lam == 0:
            return None
        return privacy_budget(self.ldp.delta, self.ldp.lam)


@dataclass
class RoundMessage:
    client_id: int
    delta: np.ndarray
    mu: np.ndarray
    num_train: int
    train_loss: float


@dataclass
class ClientState:
    """Everything one client owns. Only its :class:`RoundMessage` leaves it."""

    client_id: int
    subgraph: SubgraphSpec
    local: Graph
    inputs: np.ndarray
    ppr: object
    split: Split
    model_cfg: ModelConfig
    rng: np.random.Generator
    eval_contexts: tuple
    params: dict | None = None
    opt_state: AdamState | None = None
    global_nodes: GlobalNodes | None = None

    @property
    def num_train(self) -> int:
        return int(self.split.train.size)


def init_client(parent: Graph, subgraph: SubgraphSpec, split: Split, cfg: RunConfig,
                model_cfg: ModelConfig, seed) -> ClientState:
    """Preprocess one client: PPR matrix, Laplacian PE and evaluation contexts."""
    if split.train.size == 0:
        raise ValueError(f"client {subgraph.client_id} has no training nodes")
    local = subgraph.local_graph(parent)
    ppr = ppr_matrix(subgraph, cfg.nu)
    parts = [local.features]
    if cfg.pe_dim:
        parts.append(laplacian_pe(subgraph, cfg.pe_dim).vectors)
    inputs = np.concatenate(parts, axis=1)
    eval_rng = np.random.default_rng([cfg.eval_seed, subgraph.client_id])
    ctx = sample_contexts(np.arange(local.n), ppr, cfg.n_s, cfg.sampler, eval_rng,
                          adjacency=local.adjacency, features=local.features)
    return ClientState(subgraph.client_id, subgraph, local, inputs, ppr, split, model_cfg,
                       np.random.default_rng(seed), ctx)


def run_client(state: ClientState, theta_hat: np.ndarray, mu_hat: np.ndarray, epochs: int,
               cfg: RunConfig) -> RoundMessage:
    """Load the personalized model, train locally, return the (privatized) upload."""
    mcfg = state.model_cfg
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    params = unflatten(theta_hat, mcfg)
    if state.global_nodes is None:
        gn = GlobalNodes(mu_hat, np.ones(mcfg.n_g), cfg.gamma)
    else:
        gn = state.global_nodes.with_mu(mu_hat)
    opt = state.opt_state or AdamState.zeros_like(params)
    losses = []
    train = state.split.train
    labels = state.local.labels
    for _ in range(epochs):
        order = state.rng.permutation(train)
        for start in range(0, order.size, cfg.batch_size):
            centers = order[start:start + cfg.batch_size]
            nb, mask = sample_contexts(centers, state.ppr, mcfg.n_s, cfg.sampler, state.rng,
                                       adjacency=state.local.adjacency, features=state.local.features)
            batch = build_batch(state.inputs, centers, nb, mask, gn.mu, labels[centers])
            loss, grads, reprs = loss_and_grad(params, mcfg, batch, return_repr=True)
            params, opt = adam_step(opt, params, grads, lr=cfg.lr, weight_decay=cfg.weight_decay)
            if mcfg.n_g:
                gn = online_update(gn, reprs)
            losses.append(loss)
    delta = flatten(params, mcfg) - theta_hat
    # adopt theta_hat + delta so the server's reconstruction is bitwise the client's model
    state.params = unflatten(theta_hat + delta, mcfg)
    state.opt_state, state.global_nodes = opt, gn
    mu = gn.mu.copy()
    if cfg.ldp.protects_updates:
        delta = ldp_apply(delta, cfg.ldp, state.rng)
    if cfg.ldp.protects_global_nodes:
        mu = ldp_apply(mu, cfg.ldp, state.rng)
    return RoundMessage(state.client_id, delta, mu, state.num_train,
                        float(np.mean(losses)) if losses else math.nan)


def predict(params, state: ClientState, nodes, global_nodes=None, chunk: int = 256) -> np.ndarray:
    """Class predictions for local ``nodes`` using the fixed evaluation contexts."""
    mcfg = state.model_cfg
    mu = state.global_nodes.mu if global_nodes is None else global_nodes
    nb_all, mask_all = state.eval_contexts
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.empty(nodes.size, dtype=np.int64)
    for start in range(0, nodes.size, chunk):
        c = nodes[start:start + chunk]
        batch = build_batch(state.inputs, c, nb_all[c], mask_all[c], mu)
        logits, _ = forward(params, mcfg, batch)
        out[start:start + chunk] = np.argmax(logits, axis=1)
    return out


def evaluate(params, state: ClientState, split_part: str = "test") -> float:
    nodes = state.split.part(split_part)
    if nodes.size == 0:
        raise ValueError(f"client {state.client_id}: empty {split_part} split")
    pred = predict(params, state, nodes)
    return float(np.mean(pred == state.local.labels[nodes]))


# ---------------------------------------------------------------------- server


@dataclass
class ClientMetrics:
    round: int
    client: int
    train_loss: float
    val_acc: float
    test_acc: float


@dataclass
class Server:
    cfg: RunConfig
    model_cfg: ModelConfig
    clients: list
    theta_init: np.ndarray
    mu_init: np.ndarray
    thetas: list = field(default_factory=list)
    mus: list = field(default_factory=list)
    similarity: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def aggregation_weights(self, s: np.ndarray) -> np.ndarray:
        m = s.shape[0]
        if self.cfg.aggregation == "uniform":
            return np.full((m, m), 1.0 / m)
        if self.cfg.aggregation == "local":
            return np.eye(m)
        return agg.personalized_weights(s, self.cfg.tau)

    def personalize(self):
        """Per-client ``(theta_hat, mu_hat)`` from the last uploads, plus S and alpha."""
        sim = agg.similarity_matrix(self.mus)
        alpha = self.aggregation_weights(sim.values)
        out = []
        for i in range(self.num_clients):
            theta_hat = agg.aggregate_params(self.thetas, alpha[i])
            mu_hat = agg.aggregate_global_nodes(self.mus, sim.alignments[i], alpha[i])
            out.append((theta_hat, mu_hat))
        return out, sim.values, alpha


def build_server(parent: Graph, subgraphs, cfg: RunConfig, splits=None) -> Server:
    subgraphs = list(subgraphs)
    mcfg = cfg.model_config(parent.num_features, parent.num_classes)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(subgraphs) + 2)
    if splits is None:
        splits = [split_nodes(s, cfg.split, np.random.default_rng(seeds[i])) for i, s in enumerate(subgraphs)]
    clients = [init_client(parent, s, sp_, cfg, mcfg, np.random.default_rng(seeds[i].spawn(1)[0]))
               for i, (s, sp_) in enumerate(zip(subgraphs, splits))]
    theta = flatten(init_params(mcfg, np.random.default_rng(seeds[-2])), mcfg)
    mu = init_global_nodes(cfg.n_g, cfg.hidden, np.random.default_rng(seeds[-1]), cfg.gamma).mu
    return Server(cfg, mcfg, clients, theta, mu)


def run_round(server: Server, r: int) -> list:
    """One synchronous round; returns a :class:`ClientMetrics` per client."""
    cfg = server.cfg
    if r == 1:
        targets = [(server.theta_init.copy(), server.mu_init.copy()) for _ in server.clients]
        s = alpha = None
    else:
        targets, s, alpha = server.personalize()
    server.similarity.append(s)
    server.weights.append(alpha)

    messages = {}
    for state, (theta_hat, mu_hat) in zip(server.clients, targets):
        msg = run_client(state, theta_hat, mu_hat, cfg.local_epochs, cfg)
        messages[msg.client_id] = (theta_hat, msg)

    thetas, mus, metrics = [], [], []
    for state in server.clients:
        if state.client_id not in messages:
            raise RuntimeError(f"round {r}: no message from client {state.client_id}")
        theta_hat, msg = messages[state.client_id]
        thetas.append(theta_hat + msg.delta)
        mus.append(msg.mu)
        metrics.append(ClientMetrics(r, state.client_id, msg.train_loss,
                                     evaluate(state.params, state, "val"),
                                     evaluate(state.params, state, "test")))
    server.thetas, server.mus = thetas, mus
    return metrics


@dataclass
class History:
    records: list = field(default_factory=list)
    similarity: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    epsilon: float | None = None
    server: Server | None = field(default=None, repr=False)

    @property
    def num_rounds(self) -> int:
        return max((m.round for m in self.records), default=0)

    def client_ids(self) -> list:
        return sorted({m.client for m in self.records})

    def best_val_test(self) -> dict:
        """Per client, the test accuracy at its best validation round (earliest on ties)."""
        best = {}
        for m in self.records:
            cur = best.get(m.client)
            if cur is None or m.val_acc > cur.val_acc:
                best[m.client] = m
        return {c: m.test_acc for c, m in sorted(best.items())}

    def avg_test_acc_at_best_val(self) -> float:
        return float(np.mean(list(self.best_val_test().values())))


def train(cfg: RunConfig, parent: Graph, subgraphs, splits=None, callback=None) -> History:
    server = build_server(parent, subgraphs, cfg, splits)
    history = History(epsilon=cfg.epsilon)
    for r in range(1, cfg.rounds + 1):
        metrics = run_round(server, r)
        history.records.extend(metrics)
        if callback is not None:
            callback(r, metrics, server)
        logger.info("round %d: mean val %.4f", r, np.mean([m.val_acc for m in metrics]))
    history.similarity = server.similarity
    history.weights = server.weights
    history.server = server
    return history
