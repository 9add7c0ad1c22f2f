"""Undirected communication graphs, Laplacians and per-channel matrices.

Node indices are 0-based here; configuration files and CSV exports use
1-based indices and convert at the boundary.

A *channel* is the unit that carries one delay signal. Three channel models
are supported:

``directed``
    one channel per direction of every union edge, ordered
    ``(i->k), (k->i)`` for each edge ``(i, k)``, ``i < k``, edges sorted
    lexicographically. ``T`` has ``+1`` at ``(i, i)`` and ``-1`` at ``(i, k)``.
``undirected``
    one channel per union edge, shared by both directions. ``T`` is the edge
    Laplacian ``(e_i - e_k)(e_i - e_k)^T``.
``lumped``
    a single channel whose matrix is the full Laplacian of the active
    topology (uniform delay on every link).

In every model the channel matrices of a topology sum to its Laplacian and
annihilate the ones vector. Channels absent from a topology map to zero
matrices so all topologies share one channel layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CHANNEL_MODELS = ("directed", "undirected", "lumped")


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on nodes ``0..n-1``."""

    n: int
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"graph needs at least one node, got n={self.n}")
        for i, k in self.edges:
            if not (0 <= i < self.n and 0 <= k < self.n):
                raise ValueError(f"edge ({i}, {k}) out of range for n={self.n}")
            if i >= k:
                raise ValueError(f"edge ({i}, {k}) must be stored as (min, max) without self-loops")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]]) -> "Graph":
        normalized = set()
        for e in edges:
            i, k = int(e[0]), int(e[1])
            if i == k:
                raise ValueError(f"self-loop at node {i}")
            pair = (min(i, k), max(i, k))
            if pair in normalized:
                raise ValueError(f"duplicate edge {pair}")
            normalized.add(pair)
        return cls(n, frozenset(normalized))

    @classmethod
    def ring(cls, n: int) -> "Graph":
        if n < 3:
            return cls.from_edges(n, [(0, 1)] if n == 2 else [])
        return cls.from_edges(n, [(i, (i + 1) % n) for i in range(n)])

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def without(self, edge: Sequence[int]) -> "Graph":
        pair = (min(edge), max(edge))
        if pair not in self.edges:
            raise ValueError(f"edge {pair} not in graph")
        return Graph(self.n, self.edges - {pair})


def laplacian(g: Graph) -> np.ndarray:
    """Integer Laplacian ``degree - adjacency``."""
    L = np.zeros((g.n, g.n), dtype=np.int64)
    for i, k in g.edges:
        L[i, i] += 1
        L[k, k] += 1
        L[i, k] -= 1
        L[k, i] -= 1
    return L


def is_connected(g: Graph) -> bool:
    parent = list(range(g.n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    components = g.n
    for i, k in g.edges:
        ri, rk = find(i), find(k)
        if ri != rk:
            parent[ri] = rk
            components -= 1
    return components == 1


@dataclass(frozen=True)
class TopologySet:
    """Finite family of communication graphs over one node set.

    Attributes:
        graphs: the topologies, indexed ``0..nu-1``.
        channel_model: one of ``CHANNEL_MODELS``.
        channels: directed pairs (``directed``), undirected pairs
            (``undirected``) or empty (``lumped``).
    """

    graphs: tuple[Graph, ...]
    channel_model: str = "directed"
    channels: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("topology set is empty")
        if self.channel_model not in CHANNEL_MODELS:
            raise ValueError(f"unknown channel model {self.channel_model!r}")
        sizes = {g.n for g in self.graphs}
        if len(sizes) != 1:
            raise ValueError(f"graphs disagree on node count: {sorted(sizes)}")

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], channel_model: str = "directed") -> "TopologySet":
        union = sorted(set().union(*(g.edges for g in graphs)))
        if channel_model == "directed":
            channels = tuple(c for i, k in union for c in ((i, k), (k, i)))
        elif channel_model == "undirected":
            channels = tuple(union)
        elif channel_model == "lumped":
            channels = ()
        else:
            raise ValueError(f"unknown channel model {channel_model!r}")
        return cls(tuple(graphs), channel_model, channels)

    @property
    def n(self) -> int:
        return self.graphs[0].n

    @property
    def nu(self) -> int:
        return len(self.graphs)

    @property
    def n_channels(self) -> int:
        return 1 if self.channel_model == "lumped" else len(self.channels)

    @property
    def max_edges(self) -> int:
        return max(len(g.edges) for g in self.graphs)

    def membership(self) -> np.ndarray:
        """Boolean ``(nu, n_channels)`` array: is channel m active in topology l."""
        out = np.zeros((self.nu, self.n_channels), dtype=bool)
        for ell, g in enumerate(self.graphs):
            if self.channel_model == "lumped":
                out[ell, 0] = bool(g.edges)
                continue
            for m, (i, k) in enumerate(self.channels):
                out[ell, m] = (min(i, k), max(i, k)) in g.edges
        return out

    def channel_labels(self) -> list[str]:
        """1-based human-readable channel names, used for CSV headers and witnesses."""
        if self.channel_model == "lumped":
            return ["all"]
        sep = "->" if self.channel_model == "directed" else "-"
        return [f"{i + 1}{sep}{k + 1}" for i, k in self.channels]


def channel_matrices(ts: TopologySet) -> np.ndarray:
    """Integer array ``T[l, m]`` of shape ``(nu, n_channels, n, n)``.

    Raises:
        ValueError: if some topology edge is not carried by any channel.
    """
    n = ts.n
    T = np.zeros((ts.nu, ts.n_channels, n, n), dtype=np.int64)
    if ts.channel_model == "lumped":
        for ell, g in enumerate(ts.graphs):
            T[ell, 0] = laplacian(g)
        return T

    covered = {}
    for m, (i, k) in enumerate(ts.channels):
        if i == k or not (0 <= i < n and 0 <= k < n):
            raise ValueError(f"invalid channel ({i}, {k})")
        covered.setdefault((min(i, k), max(i, k)), []).append((m, i, k))
    for ell, g in enumerate(ts.graphs):
        for edge in g.edges:
            chans = covered.get(edge, [])
            if ts.channel_model == "directed":
                directions = {(i, k) for _, i, k in chans}
                if directions != {edge, edge[::-1]}:
                    raise ValueError(f"topology {ell}: edge {edge} lacks a channel per direction")
            elif len(chans) != 1:
                raise ValueError(f"topology {ell}: edge {edge} must be carried by exactly one channel")
            for m, i, k in chans:
                if ts.channel_model == "directed":
                    T[ell, m, i, i] = 1
                    T[ell, m, i, k] = -1
                else:
                    T[ell, m, i, i] = T[ell, m, k, k] = 1
                    T[ell, m, i, k] = T[ell, m, k, i] = -1
    return T


@dataclass(frozen=True)
class TopologyDiagnostics:
    ok: bool
    connected: tuple[bool, ...]
    offending: tuple[int, ...]

    def describe(self) -> str:
        if self.ok:
            return f"all {len(self.connected)} topologies connected"
        return "disconnected topologies (1-based): " + ", ".join(str(i + 1) for i in self.offending)


def validate_topology_set(ts: TopologySet) -> TopologyDiagnostics:
    connected = tuple(is_connected(g) for g in ts.graphs)
    offending = tuple(i for i, c in enumerate(connected) if not c)
    return TopologyDiagnostics(not offending, connected, offending)
