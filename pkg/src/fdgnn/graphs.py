"""Graph topologies: random generators, shift operators, consensus weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHIFT_VARIANTS = (
    "adjacency",
    "laplacian",
    "normalized-adjacency",
    "normalized-laplacian",
)


class GraphGenerationError(RuntimeError):
    """A random generator failed to produce a usable (connected) graph."""


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes 0..n-1.

    Edges are normalized to sorted (i, j) pairs with i < j; adjacency lists
    are precomputed for neighbor lookups.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    _adj: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
            seen.add((min(i, j), max(i, j)))
        norm = tuple(sorted(seen))
        object.__setattr__(self, "edges", norm)
        adj = [[] for _ in range(self.n)]
        for i, j in norm:
            adj[i].append(j)
            adj[j].append(i)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self._adj], dtype=np.int64)

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in set(self.edges)

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in self._adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.n


@dataclass(frozen=True)
class ShiftOperator:
    """Dense n x n mixing matrix whose support is restricted to closed neighborhoods."""

    variant: str
    S: np.ndarray


@dataclass(frozen=True)
class ConsensusWeights:
    """Doubly stochastic neighbor-averaging matrix."""

    W: np.ndarray


def generate_ba(n: int, m: int, seed: int) -> Graph:
    """Preferential-attachment graph: each new node attaches m edges.

    Starts from a complete clique on the first m nodes, so the result is
    always connected and has m*(n-m) + m*(m-1)//2 edges.
    """
    if not n > m >= 1:
        raise ValueError(f"need n > m >= 1, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    # One entry per unit of degree; sampling from it is degree-proportional.
    endpoints: list[int] = [v for e in edges for v in e]
    for new in range(m, n):
        targets: set[int] = set()
        while len(targets) < m:
            if endpoints:
                targets.add(endpoints[int(rng.integers(len(endpoints)))])
            else:
                targets.add(int(rng.integers(new)))
        for t in sorted(targets):
            edges.append((t, new))
            endpoints.extend((t, new))
    return Graph(n, tuple(edges))


def generate_er(n: int, p: float, seed: int, max_tries: int = 100) -> Graph:
    """Connected G(n, p) sample; resamples until connected, up to max_tries."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"edge probability must be in (0, 1], got {p}")
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for _ in range(max_tries):
        mask = rng.random(len(pairs)) < p
        g = Graph(n, tuple(e for e, keep in zip(pairs, mask) if keep))
        if g.is_connected():
            return g
    raise GraphGenerationError(
        f"no connected G({n}, {p}) sample in {max_tries} tries"
    )


def adjacency_matrix(g: Graph) -> np.ndarray:
    A = np.zeros((g.n, g.n))
    for i, j in g.edges:
        A[i, j] = 1.0
        A[j, i] = 1.0
    return A


def build_shift(g: Graph, variant: str = "normalized-adjacency") -> ShiftOperator:
    """Build the requested mixing matrix from the topology."""
    if variant not in SHIFT_VARIANTS:
        raise ValueError(f"unknown shift variant {variant!r}")
    A = adjacency_matrix(g)
    d = A.sum(axis=1)
    if variant == "adjacency":
        S = A
    elif variant == "laplacian":
        S = np.diag(d) - A
    else:
        with np.errstate(divide="ignore"):
            dinv = np.where(d > 0, d, 1.0) ** -0.5
        dinv = np.where(d > 0, dinv, 0.0)
        norm_adj = dinv[:, None] * A * dinv[None, :]
        if variant == "normalized-adjacency":
            S = norm_adj
        else:
            S = np.eye(g.n) - norm_adj
    return ShiftOperator(variant, S)


def metropolis_weights(g: Graph) -> ConsensusWeights:
    """Degree-based symmetric doubly stochastic averaging weights.

    Off-diagonal entries are 1 / (1 + max(d(i), d(j))) on edges; diagonals
    absorb the remainder so every row sums to one.
    """
    W = np.zeros((g.n, g.n))
    d = g.degrees
    for i, j in g.edges:
        w = 1.0 / (1.0 + max(d[i], d[j]))
        W[i, j] = w
        W[j, i] = w
    for i in range(g.n):
        W[i, i] = 1.0 - W[i].sum()
    return ConsensusWeights(W)


def metropolis_row(degree: int, neighbor_degrees: dict[int, int]) -> dict[int, float]:
    """One node's averaging weights, computable from its own and neighbor degrees."""
    row = {
        j: 1.0 / (1.0 + max(degree, dj)) for j, dj in neighbor_degrees.items()
    }
    return row


def save_edge_list(g: Graph, path: str | Path) -> None:
    """Write `n` on the first line, then one ascending `i j` pair per line."""
    lines = [str(g.n)]
    lines.extend(f"{i} {j}" for i, j in g.edges)
    Path(path).write_text("\n".join(lines) + "\n")


def load_edge_list(path: str | Path) -> Graph:
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise ValueError(f"empty graph file {path}")
    n = int(text[0])
    edges = []
    for line in text[1:]:
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"malformed edge line {line!r}")
        edges.append((int(parts[0]), int(parts[1])))
    return Graph(n, tuple(edges))
