"""Subgraph federated learning with a hybrid-attention graph transformer."""

from .aggregation import (aggregate_global_nodes, aggregate_params, align_and_score,
                          personalized_weights, similarity_matrix)
from .estimators import (FedGTClassifier, LaplacianPositionalEncoding, OnlineGlobalNodes,
                         PersonalizedPageRank)
from .global_nodes import GlobalNodes, find_nearest, init_global_nodes, online_update
from .graph import (Graph, Split, SubgraphSpec, count_missing_links, generate_regime_sbm,
                    generate_sbm, heterogeneity, load_graph, make_nonoverlapping,
                    make_overlapping, partition_louvain, split_nodes)
from .model import ModelConfig, adam_step, flatten, forward, init_params, loss_and_grad, unflatten
from .preprocess import laplacian_pe, ppr_matrix, sample_local_context
from .privacy import LDPConfig, ldp_apply, privacy_budget
from .runtime import RunConfig, evaluate, run_client, run_round, train

__version__ = "0.1.0"
