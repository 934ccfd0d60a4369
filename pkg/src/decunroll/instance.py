"""
Decentralized LASSO instances, recovery metrics and dataset files.

Each agent ``i`` of a `CommGraph` privately holds ``y_i = A_i x* + eps_i``
with Gaussian ``A_i`` and a Bernoulli-Gaussian sparse ``x*``. Estimates of
all agents are stacked row-wise into an ``(N, d)`` array.

Sampling uses a PCG64 stream consumed in a fixed order: graph, ``x*``,
``A_i`` for agents ``0..N-1``, then ``eps_i`` in agent order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError, ValidationError
from .topology import (
    CommGraph,
    as_rng,
    make_pg_extra_pair,
    metropolis_weights,
    sample_connected_graph,
)

__all__ = [
    "InstanceConfig",
    "LassoInstance",
    "sample_sparse_signal",
    "noise_sigma_from_snr",
    "sample_instance",
    "sample_dataset",
    "derive_seed",
    "namse",
    "stack",
    "local_gradient",
    "write_dataset",
    "read_dataset",
    "DATASET_MAGIC",
]

DATASET_MAGIC = "decunroll-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class InstanceConfig:
    """Sampling parameters for one family of LASSO instances.

    ``p_s`` is the expected number of nonzeros of ``x*``; it defaults to
    ``m_total / (2 n_nodes)``. ``sigma_override`` replaces the SNR-derived
    noise level, either by one scalar or by one value per agent.
    """

    n_nodes: int = 5
    n_edges: int = 6
    d: int = 100
    m_total: int = 300
    snr_db: float = 50.0
    p_s: float | None = None
    seed: int | None = 0
    sigma_override: float | tuple | None = None

    def __post_init__(self):
        if self.n_nodes < 1 or self.d < 1 or self.m_total < 1:
            raise ParameterError("n_nodes, d and m_total must be positive")
        if self.m_total % self.n_nodes:
            raise ParameterError(
                f"m_total={self.m_total} is not divisible by n_nodes={self.n_nodes}"
            )
        if self.p_s is None:
            object.__setattr__(self, "p_s", self.m_total / (2 * self.n_nodes))
        if not 0 < self.p_s <= self.d:
            raise ParameterError(f"p_s must lie in (0, d], got {self.p_s}")
        if self.sigma_override is not None:
            s = np.atleast_1d(np.asarray(self.sigma_override, dtype=float))
            if np.any(s < 0) or s.size not in (1, self.n_nodes):
                raise ParameterError("sigma_override must be >= 0, scalar or per-agent")

    @property
    def m_i(self):
        return self.m_total // self.n_nodes

    def sigma(self):
        """Noise standard deviation, scalar or per-agent array."""
        if self.sigma_override is not None:
            s = np.asarray(self.sigma_override, dtype=float)
            return float(s) if s.ndim == 0 or s.size == 1 else s.copy()
        return noise_sigma_from_snr(self.snr_db, self.p_s)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class LassoInstance:
    """One decentralized sparse recovery problem.

    Attributes
    ----------
    graph : CommGraph
    A : ndarray, shape (N, m_i, d)
        Per-agent sensing matrices.
    y : ndarray, shape (N, m_i)
        Per-agent measurements.
    x_star : ndarray, shape (d,)
        Ground truth.
    sigma : float or ndarray
        Noise level, scalar or one value per agent.
    p_s : float
        Expected sparsity the instance was drawn with.
    seed : int or None
        Seed that regenerates the instance through `sample_instance`.
    """

    graph: CommGraph
    A: np.ndarray
    y: np.ndarray
    x_star: np.ndarray
    sigma: float | np.ndarray = 0.0
    p_s: float = float("nan")
    seed: int | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x_star, dtype=float)
        if A.ndim != 3:
            raise ValidationError(f"A must have shape (N, m_i, d), got {A.shape}")
        N, m_i, d = A.shape
        if N != self.graph.n_nodes:
            raise ValidationError(f"{N} agent blocks for a {self.graph.n_nodes}-node graph")
        if y.shape != (N, m_i):
            raise ValidationError(f"y must have shape {(N, m_i)}, got {y.shape}")
        if x.shape != (d,):
            raise ValidationError(f"x_star must have shape {(d,)}, got {x.shape}")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValidationError("sigma must be non-negative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_star", x)

    @property
    def n_nodes(self):
        return self.A.shape[0]

    @property
    def m_i(self):
        return self.A.shape[1]

    @property
    def d(self):
        return self.A.shape[2]

    @cached_property
    def AtA(self):
        """Per-agent Gram matrices ``A_i^T A_i``, shape (N, d, d)."""
        return np.einsum("nmi,nmj->nij", self.A, self.A)

    @cached_property
    def Aty(self):
        """Per-agent ``A_i^T y_i``, shape (N, d)."""
        return np.einsum("nmi,nm->ni", self.A, self.y)

    def gradient(self, x):
        """Stacked gradient of ``sum_i 0.5 ||A_i x_i - y_i||^2`` at ``x`` (N, d)."""
        return np.einsum("nij,nj->ni", self.AtA, x) - self.Aty

    def x_star_stacked(self):
        return stack(self.x_star, self.n_nodes)

    def mixing_pair(self):
        """Metropolis ``W`` with ``W_tilde = (I + W) / 2`` on this instance's graph."""
        return make_pg_extra_pair(metropolis_weights(self.graph), self.graph)


def stack(v, n_nodes):
    """Repeat a length-d vector on ``n_nodes`` rows."""
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v, (n_nodes,) + v.shape).copy()


def sample_sparse_signal(d, p_s, rng=None):
    """Bernoulli-Gaussian vector with ``p_s`` expected nonzeros.

    Each entry is nonzero with probability ``p_s / d``; nonzeros are
    standard normal.
    """
    if not 0 < p_s <= d:
        raise ParameterError(f"p_s must lie in (0, d], got {p_s}")
    rng = as_rng(rng)
    mask = rng.random(d) < p_s / d
    values = rng.standard_normal(d)
    return np.where(mask, values, 0.0)


def noise_sigma_from_snr(snr_db, expected_signal_power):
    """Invert ``SNR = 10 log10(E||x*||^2 / sigma^2)`` for sigma."""
    if expected_signal_power <= 0:
        raise ParameterError("expected_signal_power must be positive")
    return float(np.sqrt(expected_signal_power / 10.0 ** (snr_db / 10.0)))


def sample_instance(cfg):
    """Draw a `LassoInstance` deterministically from ``cfg.seed``."""
    rng = as_rng(cfg.seed)
    graph = sample_connected_graph(cfg.n_nodes, cfg.n_edges, rng)
    x_star = sample_sparse_signal(cfg.d, cfg.p_s, rng)
    A = np.stack([rng.standard_normal((cfg.m_i, cfg.d)) for _ in range(cfg.n_nodes)])
    sigma = cfg.sigma()
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (cfg.n_nodes,))
    eps = np.stack([sig[i] * rng.standard_normal(cfg.m_i) for i in range(cfg.n_nodes)])
    y = np.einsum("nmd,d->nm", A, x_star) + eps
    return LassoInstance(graph, A, y, x_star, sigma, float(cfg.p_s), cfg.seed)


def derive_seed(master_seed, *path):
    """Child seed for sample ``path`` under ``master_seed`` (seed splitting)."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, path)])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_dataset(cfg, n_samples, stream=0):
    """``n_samples`` independent instances with seeds split from ``cfg.seed``."""
    if cfg.seed is None:
        raise ParameterError("dataset generation needs an explicit seed")
    return [
        sample_instance(cfg.replace(seed=derive_seed(cfg.seed, stream, k)))
        for k in range(n_samples)
    ]


def namse(x, x_star):
    """Normalized average mean square error in dB.

    ``10 log10( E||x - x*||_F^2 / (N E||x*||_F^2) )`` with ``x*`` stacked on
    all ``N`` rows. Pass ``x`` of shape (N, d) with ``x_star`` of shape (d,)
    for one sample, or (B, N, d) with (B, d) to average over a batch before
    the logarithm. An exact estimate returns ``-inf``.
    """
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    if x.ndim == 2:
        x, x_star = x[None], x_star[None]
    if x.ndim != 3 or x_star.shape != (x.shape[0], x.shape[2]):
        raise ValidationError(f"shape mismatch: x {x.shape}, x_star {x_star.shape}")
    N = x.shape[1]
    err = np.mean(np.sum((x - x_star[:, None, :]) ** 2, axis=(1, 2)))
    ref = N * np.mean(N * np.sum(x_star**2, axis=1))
    if ref == 0:
        raise ParameterError("NAMSE undefined for an all-zero ground truth")
    if err == 0:
        return float("-inf")
    return float(10.0 * np.log10(err / ref))


def local_gradient(inst, i, x_i):
    """``A_i^T (A_i x_i - y_i)``, the gradient of agent ``i``'s data fit."""
    x_i = np.asarray(x_i, dtype=float)
    if x_i.shape != (inst.d,):
        raise ValidationError(f"x_i must have shape {(inst.d,)}, got {x_i.shape}")
    A = inst.A[i]
    return A.T @ (A @ x_i - inst.y[i])


# -- dataset files ---------------------------------------------------------

def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def write_dataset(path, samples, meta=None):
    """Write instances to a self-describing text file.

    Layout: a header block of ``key value`` lines closed by ``count``, then
    per sample a ``sample`` line, its graph, ``x_star``, per-agent ``A``
    rows and ``y``. Floats carry 17 significant digits so the round trip is
    exact.
    """
    meta = dict(meta or {})
    first = samples[0] if samples else None
    header = {
        "N": first.n_nodes if first else meta.get("N", 0),
        "d": first.d if first else meta.get("d", 0),
        "m_i": first.m_i if first else meta.get("m_i", 0),
        "sigma": meta.get("sigma", _fmt(np.atleast_1d(first.sigma)[:1]) if first else "nan"),
        "p_s": meta.get("p_s", _fmt([first.p_s]) if first else "nan"),
        "seed": meta.get("seed", "none"),
    }
    lines = [f"{DATASET_MAGIC} {DATASET_VERSION}"]
    lines += [f"{k} {v}" for k, v in header.items()]
    lines.append(f"count {len(samples)}")
    for idx, s in enumerate(samples):
        N, m_i, d = s.A.shape
        sig = np.atleast_1d(np.asarray(s.sigma, dtype=float))
        lines.append(f"sample {idx} {N} {m_i} {d} {s.graph.n_edges} {'none' if s.seed is None else s.seed}")
        lines.append(f"sigma {_fmt(sig)}")
        lines.append(f"p_s {_fmt([s.p_s])}")
        lines += [f"{i} {j}" for i, j in s.graph.edges]
        lines.append(_fmt(s.x_star))
        for n in range(N):
            lines += [_fmt(row) for row in s.A[n]]
            lines.append(_fmt(s.y[n]))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


class _Cursor:
    def __init__(self, text):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def next(self, what):
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {what}", line=self.pos + 1)
        self.pos += 1
        return self.lines[self.pos - 1]

    def keyed(self, key):
        parts = self.next(key).split()
        if not parts or parts[0] != key:
            raise ParseError(f"expected '{key}' record", line=self.pos)
        return parts[1:]

    def floats(self, n, what):
        line = self.next(what)
        try:
            vals = np.array([float(v) for v in line.split()])
        except ValueError:
            raise ParseError(f"bad number in {what}", line=self.pos) from None
        if vals.size != n:
            raise ParseError(f"{what}: expected {n} values, got {vals.size}", line=self.pos)
        return vals

    def ints(self, parts, what):
        try:
            return [int(p) for p in parts]
        except ValueError:
            raise ParseError(f"bad integer in {what}", line=self.pos) from None


def read_dataset(path, with_header=False):
    """Read a file produced by `write_dataset`.

    Raises
    ------
    ParseError
        With the 1-based line of the first malformed or missing record.
    """
    cur = _Cursor(Path(path).read_text())
    magic = cur.next("magic").split()
    if len(magic) != 2 or magic[0] != DATASET_MAGIC:
        raise ParseError("not a decunroll dataset", line=1)
    if int(magic[1]) != DATASET_VERSION:
        raise ParseError(f"unsupported dataset version {magic[1]}", line=1)
    header = {}
    for key in ("N", "d", "m_i", "sigma", "p_s", "seed"):
        header[key] = " ".join(cur.keyed(key))
    (count,) = cur.ints(cur.keyed("count"), "count")
    samples = []
    for idx in range(count):
        parts = cur.keyed("sample")
        if len(parts) != 6:
            raise ParseError("sample record needs 6 fields", line=cur.pos)
        k, N, m_i, d, n_edges = cur.ints(parts[:5], "sample record")
        seed = None if parts[5] == "none" else cur.ints(parts[5:], "sample seed")[0]
        if k != idx:
            raise ParseError(f"expected sample {idx}, found {k}", line=cur.pos)
        sig_parts = cur.keyed("sigma")
        try:
            sig = np.array([float(v) for v in sig_parts])
        except ValueError:
            raise ParseError("bad sigma", line=cur.pos) from None
        sigma = float(sig[0]) if sig.size == 1 else sig
        (p_s,) = (float(v) for v in cur.keyed("p_s"))
        edges = [tuple(cur.ints(cur.next("edge").split(), "edge")) for _ in range(n_edges)]
        x_star = cur.floats(d, "x_star")
        A = np.empty((N, m_i, d))
        y = np.empty((N, m_i))
        for n in range(N):
            for r in range(m_i):
                A[n, r] = cur.floats(d, f"A[{n}] row {r}")
            y[n] = cur.floats(m_i, f"y[{n}]")
        try:
            graph = CommGraph(N, edges)
            samples.append(LassoInstance(graph, A, y, x_star, sigma, p_s, seed))
        except ValidationError as exc:
            raise ParseError(f"sample {idx}: {exc}", line=cur.pos) from exc
    if cur.next("end") != "end":
        raise ParseError("expected 'end'", line=cur.pos)
    return (samples, header) if with_header else samples
