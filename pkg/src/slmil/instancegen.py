"""Subnet-combination instances: every choice of ``i`` subnets induces one sub-graph."""
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .connectome import BrainGraph
from .errors import ConfigError


@dataclass(frozen=True)
class InstanceSpec:
    subnet_ids: tuple
    instance_index: int

    def label(self, parc):
        return "&".join(parc.subnet_names[s] for s in self.subnet_ids)


@dataclass
class SubnetInstance:
    spec: InstanceSpec
    adjacency: np.ndarray  # (N_k, N_k)
    features: np.ndarray  # (N_k, T)
    node_roi_ids: np.ndarray

    @property
    def n_nodes(self):
        return self.adjacency.shape[0]


def instance_count(subnet_count, i):
    return comb(subnet_count, i)


def enumerate_instances(parc, i, whole_network=False):
    """All ``C(S, i)`` subnet combinations in lexicographic order.

    ``i`` ranges over ``1..S-1``; ``i == S`` (the whole network as one
    instance) needs ``whole_network=True``.
    """
    s = parc.subnet_count
    hi = s if whole_network else s - 1
    if not isinstance(i, (int, np.integer)) or not 1 <= i <= hi:
        raise ConfigError(f"instance subnet count must be in [1, {hi}], got {i!r}")
    return [InstanceSpec(tuple(c), k) for k, c in enumerate(combinations(range(s), int(i)))]


def _node_ids(spec, parc):
    ids = np.asarray(spec.subnet_ids)
    if ids.size == 0 or np.any(ids < 0) or np.any(ids >= parc.subnet_count):
        raise ConfigError(f"instance {spec.instance_index}: unknown subnet in {spec.subnet_ids}")
    if np.any(np.diff(ids) <= 0):
        raise ConfigError(f"instance {spec.instance_index}: subnet ids must be strictly increasing")
    return np.flatnonzero(np.isin(parc.assignment, ids))


def extract_instance(graph, spec, parc):
    if graph.n_roi != parc.roi_count:
        raise ConfigError(f"graph has {graph.n_roi} ROIs, parcellation has {parc.roi_count}")
    nodes = _node_ids(spec, parc)
    return SubnetInstance(spec, graph.adjacency[np.ix_(nodes, nodes)].copy(),
                          graph.features[nodes].copy(), nodes)


def build_instance_bag(graph, parc, i, whole_network=False):
    return [extract_instance(graph, spec, parc)
            for spec in enumerate_instances(parc, i, whole_network)]


class BagLayout:
    """Padded gather tables that turn a batch of graphs into stacked bags.

    ``gather`` returns adjacency ``(B, K, M, M)`` and features ``(B, K, M, T)``
    where ``M`` is the largest instance size; padded rows and columns are zero
    and ``mask`` (``(K, M)``) marks real nodes.
    """

    def __init__(self, parc, i, whole_network=False):
        self.parcellation = parc
        self.specs = enumerate_instances(parc, i, whole_network)
        nodes = [_node_ids(s, parc) for s in self.specs]
        self.max_nodes = max(len(n) for n in nodes)
        k = len(self.specs)
        self.index = np.zeros((k, self.max_nodes), dtype=np.int64)
        self.mask = np.zeros((k, self.max_nodes))
        for j, n in enumerate(nodes):
            self.index[j, : len(n)] = n
            self.mask[j, : len(n)] = 1.0
        self.node_ids = nodes

    @property
    def n_instances(self):
        return len(self.specs)

    def labels(self):
        return [s.label(self.parcellation) for s in self.specs]

    def gather(self, graphs):
        if isinstance(graphs, BrainGraph):
            graphs = [graphs]
        adj = np.stack([g.adjacency for g in graphs])  # (B, N, N)
        feats = np.stack([g.features for g in graphs])  # (B, N, T)
        idx = self.index
        a = adj[:, idx[:, :, None], idx[:, None, :]]
        h = feats[:, idx, :]
        m = self.mask
        a *= (m[:, :, None] * m[:, None, :])[None]
        h *= m[None, :, :, None]
        return a, h
