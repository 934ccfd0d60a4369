"""
Communication graphs and mixing matrices.

A decentralized network is an undirected connected graph over ``N`` agents.
Agents average their neighbours' estimates through a symmetric, stochastic,
graph-sparse mixing matrix ``W``. PG-EXTRA needs a second matrix ``W_tilde``;
the pair must satisfy the usual EXTRA conditions, which `check_assumption1`
verifies numerically.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NotPSDError, ParameterError, ParseError, ValidationError

__all__ = [
    "CommGraph",
    "MixingPair",
    "CheckResult",
    "sample_connected_graph",
    "metropolis_weights",
    "make_pg_extra_pair",
    "check_assumption1",
    "psd_sqrt",
    "graph_to_text",
    "graph_from_text",
    "write_graph",
    "read_graph",
    "as_rng",
]


def as_rng(seed):
    """Return a PCG64-backed generator for ``seed``.

    Generators pass through unchanged so that callers can thread one stream
    through several sampling steps.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class CommGraph:
    """Undirected connected graph on nodes ``0..n_nodes-1``.

    Parameters
    ----------
    n_nodes : int
        Number of agents.
    edges : iterable of (int, int)
        Unordered node pairs. Stored normalised as sorted ``(i, j)`` with
        ``i < j``.
    """

    n_nodes: int
    edges: tuple = field(default=())

    def __post_init__(self):
        n = int(self.n_nodes)
        if n < 1:
            raise ValidationError(f"n_nodes must be positive, got {self.n_nodes}")
        norm = []
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise ValidationError(f"self-loop at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"edge ({i}, {j}) out of range for {n} nodes")
            norm.append((min(i, j), max(i, j)))
        if len(set(norm)) != len(norm):
            raise ValidationError("duplicate edge")
        object.__setattr__(self, "n_nodes", n)
        object.__setattr__(self, "edges", tuple(sorted(norm)))
        if not self.is_connected():
            raise ValidationError("graph is not connected")

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def neighbors(self):
        """Neighbour lists, one sorted list per node."""
        nbrs = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(v) for v in nbrs]

    @property
    def degrees(self):
        return np.array([len(v) for v in self.neighbors], dtype=int)

    def adjacency(self):
        """Dense 0/1 adjacency matrix without self-loops."""
        adj = np.zeros((self.n_nodes, self.n_nodes))
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = 1.0
        return adj

    def support(self):
        """Boolean mask of entries a mixing matrix may occupy (edges and diagonal)."""
        return self.adjacency().astype(bool) | np.eye(self.n_nodes, dtype=bool)

    def is_connected(self):
        if self.n_nodes == 1:
            return True
        nbrs = self.neighbors
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n_nodes

    def relabel(self, perm):
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = list(perm)
        return CommGraph(self.n_nodes, [(perm[i], perm[j]) for i, j in self.edges])


def sample_connected_graph(n_nodes, n_edges, seed=None, max_tries=100_000):
    """Sample a connected graph with a fixed number of edges.

    Edge sets of the requested size are drawn uniformly and rejected until
    connected, so the result is uniform over connected graphs of that size.

    Parameters
    ----------
    n_nodes, n_edges : int
    seed : int, SeedSequence or Generator, optional
    max_tries : int
        Rejection budget.

    Returns
    -------
    CommGraph
    """
    n_nodes, n_edges = int(n_nodes), int(n_edges)
    if n_nodes < 1:
        raise ParameterError("n_nodes must be positive")
    max_edges = n_nodes * (n_nodes - 1) // 2
    if n_edges < n_nodes - 1 or n_edges > max_edges:
        raise ParameterError(
            f"cannot build a connected graph with {n_nodes} nodes and {n_edges} edges "
            f"(need {n_nodes - 1} <= edges <= {max_edges})"
        )
    rng = as_rng(seed)
    pairs = list(itertools.combinations(range(n_nodes), 2))
    for _ in range(max_tries):
        idx = np.sort(rng.choice(len(pairs), size=n_edges, replace=False))
        edges = [pairs[k] for k in idx]
        try:
            return CommGraph(n_nodes, edges)
        except ValidationError:
            continue
    raise ParameterError(f"no connected graph found in {max_tries} draws")


def metropolis_weights(g):
    """Metropolis-Hastings mixing matrix of ``g``.

    ``w_ij = 1 / (1 + max(deg_i, deg_j))`` on edges and the diagonal absorbs
    the remainder, giving a symmetric doubly stochastic matrix.
    """
    deg = g.degrees
    W = np.zeros((g.n_nodes, g.n_nodes))
    for i, j in g.edges:
        W[i, j] = W[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    W[np.diag_indices(g.n_nodes)] = 1.0 - W.sum(axis=1)
    return W


@dataclass(frozen=True)
class MixingPair:
    """Mixing matrices ``(W, W_tilde)`` used by PG-EXTRA.

    ``graph`` is optional; when present it defines the admissible sparsity
    pattern, otherwise the pattern of ``W`` is used.
    """

    W: np.ndarray
    W_tilde: np.ndarray
    graph: CommGraph | None = None

    @property
    def n_nodes(self):
        return self.W.shape[0]

    def support(self):
        if self.graph is not None:
            return self.graph.support()
        return (self.W != 0) | np.eye(self.n_nodes, dtype=bool)


def _validate_mixing(W, graph, tol):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValidationError(f"mixing matrix must be square, got shape {W.shape}")
    if graph is not None and graph.n_nodes != W.shape[0]:
        raise ValidationError("mixing matrix size does not match graph")
    if np.max(np.abs(W - W.T), initial=0.0) > tol:
        raise ValidationError("mixing matrix is not symmetric")
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > tol:
        raise ValidationError("mixing matrix rows do not sum to 1")
    if graph is not None:
        off = ~graph.support()
        if np.any(np.abs(W[off]) > tol):
            raise ValidationError("mixing matrix has weight outside the graph")
    return W


def make_pg_extra_pair(W, graph=None, tol=1e-10):
    """Pair ``W`` with ``W_tilde = (I + W) / 2``.

    Raises
    ------
    ValidationError
        If ``W`` is not symmetric, row-stochastic and graph-sparse.
    """
    W = _validate_mixing(W, graph, tol)
    W_tilde = 0.5 * (np.eye(W.shape[0]) + W)
    return MixingPair(W, W_tilde, graph)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    residual: float


def _min_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def check_assumption1(pair, tol=1e-10):
    """Numerically check the EXTRA mixing conditions on ``pair``.

    Every condition yields a `CheckResult`; residuals are non-negative and a
    check passes when its residual is at most ``tol``. The null-space
    condition is split into a residual on ``(W_tilde - W) 1`` and a spectral
    gap test on the second-smallest eigenvalue.

    Returns
    -------
    list of CheckResult
    """
    W = np.asarray(pair.W, dtype=float)
    Wt = np.asarray(pair.W_tilde, dtype=float)
    n = W.shape[0]
    if W.shape != (n, n) or Wt.shape != (n, n):
        raise ValidationError("mixing matrices must be square and equal-sized")
    ones = np.ones(n)
    eye = np.eye(n)
    supp = pair.support()
    off = ~supp
    out = []

    def add(name, residual):
        residual = float(residual) if residual > 0 else 0.0
        out.append(CheckResult(name, residual <= tol, residual))

    add("W symmetric", np.max(np.abs(W - W.T)))
    add("W_tilde symmetric", np.max(np.abs(Wt - Wt.T)))
    add("W graph-sparse", np.max(np.abs(W[off]), initial=0.0))
    add("W_tilde graph-sparse", np.max(np.abs(Wt[off]), initial=0.0))
    # strictly positive on the support: residual is how far the smallest entry misses
    add("W positive on support", -np.min(W[supp]) if np.min(W[supp]) <= 0 else 0.0)
    add("W_tilde positive on support", -np.min(Wt[supp]) if np.min(Wt[supp]) <= 0 else 0.0)
    add("W rows sum to 1", np.max(np.abs(W @ ones - 1.0)))
    add("W_tilde rows sum to 1", np.max(np.abs(Wt @ ones - 1.0)))
    add("W_tilde PSD", -_min_eig(Wt))
    add("(I+W)/2 >= W_tilde", -_min_eig(0.5 * (eye + W) - Wt))
    add("W_tilde >= W", -_min_eig(Wt - W))

    D = 0.5 * ((Wt - W) + (Wt - W).T)
    evals = np.linalg.eigvalsh(D)
    add("(W_tilde-W) 1 = 0", np.linalg.norm(D @ ones) / np.sqrt(n))
    if n > 1:
        # gap residual is zero when the second eigenvalue clears tol
        gap = evals[1]
        out.append(CheckResult("null(W_tilde-W) = span{1}", bool(gap > tol), float(max(tol - gap, 0.0))))
    else:
        out.append(CheckResult("null(W_tilde-W) = span{1}", True, 0.0))
    add("lambda_max(W_tilde) = 1", abs(np.linalg.eigvalsh(0.5 * (Wt + Wt.T))[-1] - 1.0))
    return out


def psd_sqrt(M, eig_floor=1e-10):
    """Symmetric square root of a positive semidefinite matrix.

    Eigenvalues in ``[-eig_floor, eig_floor]`` are treated as round-off and
    set to zero before the square root, so exact null vectors stay null.

    Raises
    ------
    NotPSDError
        If an eigenvalue is below ``-eig_floor``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-10 * max(1.0, np.abs(M).max(initial=0.0)):
        raise ValidationError("matrix is not symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (M + M.T))
    if evals.size and evals[0] < -eig_floor:
        raise NotPSDError(f"smallest eigenvalue {evals[0]:.3e} below -{eig_floor:g}")
    root = np.sqrt(np.where(evals > eig_floor, evals, 0.0))
    R = (evecs * root) @ evecs.T
    return 0.5 * (R + R.T)


def graph_to_text(g):
    lines = [f"{g.n_nodes} {g.n_edges}"]
    lines += [f"{i} {j}" for i, j in g.edges]
    return "\n".join(lines) + "\n"


def graph_from_text(text):
    """Parse the ``n_nodes n_edges`` / ``i j`` edge-list format."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty graph document", line=1)
    try:
        n, e = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("header must be 'n_nodes n_edges'", line=1) from None
    if len(lines) - 1 != e:
        raise ParseError(f"expected {e} edge lines, found {len(lines) - 1}", line=len(lines))
    edges = []
    for k, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 2:
            raise ParseError("edge line must be 'i j'", line=k)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError("edge endpoints must be integers", line=k) from None
        if not i < j:
            raise ParseError("edge endpoints must satisfy i < j", line=k)
        edges.append((i, j))
    try:
        return CommGraph(n, edges)
    except ValidationError as exc:
        raise ParseError(str(exc)) from exc


def write_graph(path, g):
    Path(path).write_text(graph_to_text(g))


def read_graph(path):
    return graph_from_text(Path(path).read_text())
