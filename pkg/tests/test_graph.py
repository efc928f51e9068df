import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgt.graph import (Graph, GraphFormatError, PartitionFallbackWarning, ReferentialError,
                         count_missing_links, generate_sbm, graph_stats, heterogeneity,
                         induced_subgraph, load_graph, load_partition, make_nonoverlapping,
                         make_overlapping, partition_louvain, save_graph, save_partition,
                         split_nodes)

from conftest import erdos_renyi, triangle


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def nodes_csv(tmp_path):
    return write(tmp_path, "nodes.csv", "id,label,f0,f1\na,0,1.0,2.0\nb,1,0.5,0.0\nc,0,-1,3\n")


class TestLoadGraph:
    def test_path(self, tmp_path, nodes_csv):
        edges = write(tmp_path, "edges.csv", "src,dst\na,b\nb,c\n")
        g = load_graph(nodes_csv, edges)
        assert g.n == 3 and g.num_edges == 2
        assert g.node_ids == ("a", "b", "c")
        assert g.num_classes == 2
        np.testing.assert_array_equal(g.features[2], [-1.0, 3.0])

    def test_duplicates_and_reversed_edges_collapse(self, tmp_path, nodes_csv):
        edges = write(tmp_path, "edges.csv", "src,dst\na,b\na,b\nb,a\n")
        assert load_graph(nodes_csv, edges).num_edges == 1

    def test_self_loop_dropped(self, tmp_path, nodes_csv):
        edges = write(tmp_path, "edges.csv", "src,dst\na,a\nb,c\n")
        g = load_graph(nodes_csv, edges)
        assert g.num_edges == 1
        assert g.adjacency.diagonal().sum() == 0

    def test_unknown_endpoint(self, tmp_path, nodes_csv):
        edges = write(tmp_path, "edges.csv", "src,dst\na,b\nb,zzz\n")
        with pytest.raises(ReferentialError, match="zzz"):
            load_graph(nodes_csv, edges)

    def test_malformed_row_reports_line(self, tmp_path):
        nodes = write(tmp_path, "nodes.csv", "id,label,f0\na,0,1.0\nb,1,notanumber\n")
        edges = write(tmp_path, "edges.csv", "src,dst\n")
        with pytest.raises(GraphFormatError) as info:
            load_graph(nodes, edges)
        assert info.value.line == 3

    def test_wrong_field_count(self, tmp_path, nodes_csv):
        edges = write(tmp_path, "edges.csv", "src,dst\na,b,c\n")
        with pytest.raises(GraphFormatError, match=":2:"):
            load_graph(nodes_csv, edges)

    def test_save_load_roundtrip(self, tmp_path):
        g = generate_sbm([5, 5], 0.5, 0.1, feature_dim=3, seed=1)
        save_graph(g, tmp_path / "n.csv", tmp_path / "e.csv")
        h = load_graph(tmp_path / "n.csv", tmp_path / "e.csv")
        np.testing.assert_array_equal(h.edges, g.edges)
        np.testing.assert_array_equal(h.features, g.features)
        np.testing.assert_array_equal(h.labels, g.labels)


def test_graph_invariants():
    g = erdos_renyi(20, 0.2, seed=4)
    a = g.adjacency.toarray()
    np.testing.assert_array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)
    with pytest.raises(ValueError):
        Graph(np.zeros((2, 1)), np.array([0, 3]), np.zeros((0, 2)), 2)


class TestSBM:
    def test_degenerate_probabilities(self):
        g = generate_sbm([4, 4], 1.0, 0.0, seed=0)
        assert g.num_edges == 2 * 6
        assert np.all(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]])

    def test_deterministic(self):
        a = generate_sbm([50, 50], 0.2, 0.01, seed=7)
        b = generate_sbm([50, 50], 0.2, 0.01, seed=7)
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.features, b.features)

    @pytest.mark.parametrize("seed", range(5))
    def test_cross_block_edges_binomial(self, seed):
        g = generate_sbm([50, 50], 0.2, 0.01, seed=seed)
        cross = int(np.sum(g.labels[g.edges[:, 0]] != g.labels[g.edges[:, 1]]))
        trials, p = 50 * 50, 0.01
        mean, sd = trials * p, math.sqrt(trials * p * (1 - p))
        assert abs(cross - mean) <= 3 * sd

    def test_block_mean_distance(self):
        g = generate_sbm([400, 400], 0.0, 0.0, feature_dim=8, feature_shift=4.0, seed=2)
        m0 = g.features[g.labels == 0].mean(0)
        m1 = g.features[g.labels == 1].mean(0)
        assert abs(np.linalg.norm(m0 - m1) - 4.0) < 0.5

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            generate_sbm([3, 3], 1.5, 0.0)


class TestPartition:
    def test_two_cliques(self):
        g = generate_sbm([4, 4], 1.0, 0.0, seed=0)
        a = partition_louvain(g, 2, seed=0).assignment
        assert len(set(a[:4])) == 1 and len(set(a[4:])) == 1 and a[0] != a[4]

    def test_single_client(self):
        g = generate_sbm([10, 10], 0.3, 0.05, seed=0)
        assert np.all(partition_louvain(g, 1, seed=0).assignment == 0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_recovers_blocks(self, seed):
        g = generate_sbm([60, 60], 0.2, 0.005, seed=seed)
        a = partition_louvain(g, 2, seed=seed).assignment
        for block in (0, 1):
            counts = np.bincount(a[g.labels == block], minlength=2)
            assert counts.max() >= 0.9 * counts.sum()

    @pytest.mark.parametrize("k", [3, 4, 7])
    def test_balance(self, k):
        g = generate_sbm([40, 40, 40], 0.15, 0.01, seed=5)
        a = partition_louvain(g, k, seed=5).assignment
        sizes = np.bincount(a, minlength=k)
        assert sizes.size == k
        target = g.n / k
        assert sizes.min() >= math.ceil(0.8 * target) and sizes.max() <= math.floor(1.2 * target)

    def test_deterministic(self):
        g = generate_sbm([30, 30, 30], 0.2, 0.02, seed=1)
        np.testing.assert_array_equal(partition_louvain(g, 3, seed=9).assignment,
                                      partition_louvain(g, 3, seed=9).assignment)

    def test_no_edges_round_robin(self):
        g = Graph(np.zeros((5, 1)), np.zeros(5, dtype=int), np.zeros((0, 2)), 1)
        with pytest.warns(PartitionFallbackWarning):
            part = partition_louvain(g, 2, seed=0)
        assert part.round_robin
        np.testing.assert_array_equal(part.assignment, [0, 1, 0, 1, 0])

    def test_too_many_clients(self):
        with pytest.raises(ValueError):
            partition_louvain(triangle(), 4)

    def test_partition_file_roundtrip(self, tmp_path):
        g = generate_sbm([6, 6], 0.5, 0.1, seed=0)
        a = partition_louvain(g, 2, seed=0).assignment
        save_partition(tmp_path / "p.csv", g, a)
        np.testing.assert_array_equal(load_partition(tmp_path / "p.csv", g), a)

    def test_partition_file_missing_node(self, tmp_path):
        g = triangle()
        path = tmp_path / "p.csv"
        path.write_text("id,client\n0,0\n1,1\n")
        with pytest.raises(ReferentialError, match="'2'"):
            load_partition(path, g)


class TestSubgraphs:
    def test_triangle_nonoverlapping(self):
        subs = make_nonoverlapping(triangle(), np.array([0, 1, 1]))
        assert subs[0].edges.shape[0] == 0
        assert subs[1].edges.shape[0] == 1
        np.testing.assert_array_equal(subs[1].local_edges(), [[0, 1]])

    def test_single_client_is_whole_graph(self):
        g = erdos_renyi(15, 0.3)
        (s,) = make_nonoverlapping(g, np.zeros(g.n, dtype=int))
        np.testing.assert_array_equal(s.edges, g.edges)
        np.testing.assert_array_equal(s.nodes, np.arange(g.n))

    def test_partition_completeness(self):
        g = generate_sbm([25] * 4, 0.3, 0.02, seed=3)
        subs = make_nonoverlapping(g, partition_louvain(g, 4, seed=3))
        all_nodes = np.concatenate([s.nodes for s in subs])
        assert sorted(all_nodes.tolist()) == list(range(g.n))
        for a, b in itertools.combinations(subs, 2):
            assert not set(a.nodes.tolist()) & set(b.nodes.tolist())

    def test_induced_edges_correct(self):
        g = erdos_renyi(30, 0.2, seed=8)
        edge_set = set(map(tuple, g.edges.tolist()))
        for s in make_nonoverlapping(g, np.arange(g.n) % 3):
            members = set(s.nodes.tolist())
            for i, j in s.edges.tolist():
                assert (i, j) in edge_set and i in members and j in members
            expected = {e for e in edge_set if e[0] in members and e[1] in members}
            assert set(map(tuple, s.edges.tolist())) == expected

    def test_empty_client(self):
        with pytest.raises(ValueError, match="client 1"):
            make_nonoverlapping(triangle(), np.array([0, 0, 2]))

    def test_overlapping_full_sample(self):
        g = generate_sbm([20, 20], 0.3, 0.01, seed=0)
        subs = make_overlapping(g, 2, samples_per_part=3, sample_frac=1.0, seed=0)
        assert len(subs) == 6
        for base in (0, 3):
            for s in subs[base:base + 3]:
                np.testing.assert_array_equal(s.nodes, subs[base].nodes)

    def test_overlapping_sizes(self):
        g = generate_sbm([20, 21], 0.3, 0.01, seed=0)
        subs = make_overlapping(g, 2, samples_per_part=5, sample_frac=0.5, seed=0)
        assert len(subs) == 10
        assert [s.client_id for s in subs] == list(range(10))

    def test_overlap_hypergeometric(self):
        # one base part of 100 nodes, two half-samples: overlap ~ Hypergeometric(100, 50, 50)
        g = erdos_renyi(100, 0.05, seed=1)
        trials = 300
        overlaps = []
        for seed in range(trials):
            a, b = make_overlapping(g, 1, samples_per_part=2, sample_frac=0.5, seed=seed)
            overlaps.append(len(set(a.nodes.tolist()) & set(b.nodes.tolist())))
        N, K, n = 100, 50, 50
        mean = n * K / N
        var = n * K * (N - K) * (N - n) / (N * N * (N - 1))
        assert mean == 25
        assert abs(np.mean(overlaps) - mean) <= 3 * math.sqrt(var / trials)
        assert abs(overlaps[0] - mean) <= 3 * math.sqrt(var)

    def test_overlapping_small_part(self):
        g = Graph(np.zeros((3, 1)), np.zeros(3, dtype=int), np.array([[0, 1]]), 1)
        with pytest.raises(ValueError):
            make_overlapping(g, 3, samples_per_part=1, seed=0)


class TestSplit:
    def spec(self, n):
        return induced_subgraph(erdos_renyi(n, 0.3), np.arange(n))

    def test_default_ratios(self):
        s = split_nodes(self.spec(10), (0.2, 0.4, 0.4), seed=0)
        assert (s.train.size, s.val.size, s.test.size) == (2, 4, 4)

    def test_all_train(self):
        s = split_nodes(self.spec(10), (1.0, 0.0, 0.0), seed=0)
        assert s.train.size == 10 and s.val.size == 0 and s.test.size == 0

    def test_deterministic_and_disjoint(self):
        a = split_nodes(self.spec(37), (0.2, 0.4, 0.4), seed=5)
        b = split_nodes(self.spec(37), (0.2, 0.4, 0.4), seed=5)
        for part in ("train", "val", "test"):
            np.testing.assert_array_equal(a.part(part), b.part(part))
        union = np.concatenate([a.train, a.val, a.test])
        assert np.unique(union).size == union.size == 37

    def test_partial_ratios(self):
        s = split_nodes(self.spec(20), (0.5, 0.2, 0.1), seed=0)
        assert (s.train.size, s.val.size, s.test.size) == (10, 4, 2)

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_nodes(self.spec(2), seed=0)


class TestStatistics:
    def test_missing_links_triangle(self):
        g = triangle()
        # the three edges are (0,1), (1,2), (0,2); only (1,2) is inside a client
        assert count_missing_links(g, make_nonoverlapping(g, np.array([0, 1, 1]))) == 2

    def test_no_missing_links(self):
        g = erdos_renyi(20, 0.2)
        assert count_missing_links(g, make_nonoverlapping(g, np.zeros(g.n, dtype=int))) == 0

    def test_overlapping_cover(self):
        g = triangle()
        subs = [induced_subgraph(g, [0, 1], 0), induced_subgraph(g, [1, 2], 1), induced_subgraph(g, [0, 2], 2)]
        assert count_missing_links(g, subs) == 0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
    def test_missing_link_identity(self, seed, k):
        g = erdos_renyi(25, 0.15, seed=seed)
        rng = np.random.default_rng(seed)
        subs = [induced_subgraph(g, np.sort(rng.choice(g.n, size=12, replace=False)), c) for c in range(k)]
        covered = set()
        for s in subs:
            covered |= set(map(tuple, s.edges.tolist()))
        assert count_missing_links(g, subs) == g.num_edges - len(covered)

    def test_heterogeneity_identical(self):
        g = Graph(np.zeros((4, 1)), np.array([0, 1, 0, 1]), np.zeros((0, 2)), 2)
        subs = [induced_subgraph(g, [0, 1], 0), induced_subgraph(g, [2, 3], 1)]
        assert heterogeneity(subs, g.labels, 2) == pytest.approx(0.0, abs=1e-12)

    def test_heterogeneity_disjoint(self):
        g = Graph(np.zeros((4, 1)), np.array([0, 0, 1, 1]), np.zeros((0, 2)), 2)
        subs = [induced_subgraph(g, [0, 1], 0), induced_subgraph(g, [2, 3], 1)]
        assert heterogeneity(subs, g.labels, 2) == pytest.approx(1.0)

    def test_heterogeneity_three_clients(self):
        # histograms (1,0), (0,1), (1,1): distances 1, 1 - 1/sqrt2, 1 - 1/sqrt2
        g = Graph(np.zeros((4, 1)), np.array([0, 1, 0, 1]), np.zeros((0, 2)), 2)
        subs = [induced_subgraph(g, [0], 0), induced_subgraph(g, [1], 1), induced_subgraph(g, [2, 3], 2)]
        expected = (1 + 2 * (1 - 1 / math.sqrt(2))) / 3
        assert heterogeneity(subs, g.labels, 2) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.5286, abs=1e-4)

    def test_heterogeneity_pairwise_oracle(self):
        g = generate_sbm([10, 10, 10], 0.2, 0.05, seed=0)
        rng = np.random.default_rng(1)
        subs = [induced_subgraph(g, np.sort(rng.choice(g.n, 8, replace=False)), c) for c in range(4)]
        hists = [np.bincount(g.labels[s.nodes], minlength=3).astype(float) for s in subs]
        terms = [1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in itertools.combinations(hists, 2)]
        assert heterogeneity(subs, g.labels, 3) == pytest.approx(np.mean(terms), abs=1e-12)

    def test_heterogeneity_errors(self):
        g = triangle()
        with pytest.raises(ValueError):
            heterogeneity([induced_subgraph(g, [0], 0)], g.labels, 2)
        with pytest.raises(ValueError):
            heterogeneity([induced_subgraph(g, [0], 0), induced_subgraph(g, [], 1)], g.labels, 2)

    def test_stats_report(self):
        g = triangle()
        stats = graph_stats(g, make_nonoverlapping(g, np.array([0, 1, 1])))
        assert stats == {"missing_links": 2, "heterogeneity": pytest.approx(1 - 1 / math.sqrt(2)),
                         "client_sizes": [1, 2]}
