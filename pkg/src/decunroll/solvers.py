"""
Prox-DGD and PG-EXTRA for the decentralized LASSO.

All iterates are stacked ``(N, d)`` arrays, one row per agent. Mixing is a
left multiplication by a graph-sparse matrix, so agent ``i`` only ever
combines rows ``j`` with ``w_ij != 0``, i.e. itself and its neighbours.

The step functions also accept a `ProblemBatch` in place of a single
instance; every array then carries one extra leading axis.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError, StateError, ValidationError
from .instance import namse
from .topology import MixingPair, psd_sqrt

__all__ = [
    "PROX_DGD",
    "PG_EXTRA",
    "ALGORITHMS",
    "ParamSchedule",
    "SolverState",
    "Trajectory",
    "ProblemBatch",
    "soft_threshold",
    "prox_dgd_step",
    "pg_extra_first_step",
    "pg_extra_step",
    "run_solver",
    "normalize_algorithm",
    "write_trajectory_csv",
    "TRAJECTORY_SCHEMA",
]

PROX_DGD = "prox-dgd"
PG_EXTRA = "pg-extra"
ALGORITHMS = (PROX_DGD, PG_EXTRA)

TRAJECTORY_SCHEMA = "# schema: decunroll.trajectory/1"


def normalize_algorithm(name):
    key = str(name).lower().replace("_", "-")
    aliases = {"proxdgd": PROX_DGD, "prox-dgd": PROX_DGD, "pgextra": PG_EXTRA, "pg-extra": PG_EXTRA}
    if key not in aliases:
        raise ParameterError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")
    return aliases[key]


def soft_threshold(v, t):
    """Elementwise ``sign(v) * max(|v| - t, 0)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ParameterError("threshold must be non-negative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


@dataclass(frozen=True)
class ParamSchedule:
    """Per-iteration step sizes and regularization weights.

    Entry ``k`` drives the update that produces ``x^{k+1}``.
    """

    alphas: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        lam = np.atleast_1d(np.asarray(self.lambdas, dtype=float))
        if a.shape != lam.shape or a.ndim != 1:
            raise ParameterError("alphas and lambdas must be 1-D of equal length")
        if np.any(a <= 0):
            raise ParameterError("step sizes must be positive")
        if np.any(lam < 0):
            raise ParameterError("regularization weights must be non-negative")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def constant(cls, alpha, lam, K):
        return cls(np.full(K, float(alpha)), np.full(K, float(lam)))

    def __len__(self):
        return len(self.alphas)


@dataclass
class SolverState:
    """Iterate ``x^k`` plus the history PG-EXTRA needs.

    ``x_prev`` and ``x_half_prev`` hold ``x^{k-1}`` and ``x^{k-1/2}``;
    ``q_acc`` is the running sum of ``(W_tilde - W)^{1/2} x^t``.
    """

    x_curr: np.ndarray
    x_prev: np.ndarray | None = None
    x_half_prev: np.ndarray | None = None
    q_acc: np.ndarray | None = None
    iter: int = 0


@dataclass
class Trajectory:
    """Recorded run of a solver.

    ``iterates`` has ``K + 1`` entries including the starting point;
    ``halves`` holds the ``K`` pre-threshold points.
    """

    algorithm: str
    iterates: np.ndarray
    halves: np.ndarray
    namse_db: np.ndarray | None = None
    consensus: np.ndarray | None = None
    q: np.ndarray | None = None
    schedule: ParamSchedule | None = None
    wall_time: float = 0.0

    def __len__(self):
        return len(self.iterates)

    @property
    def final(self):
        return self.iterates[-1]


@dataclass
class ProblemBatch:
    """Several instances stacked along a leading axis for vectorized runs.

    Sensing matrices of all instances must share ``(N, m_i, d)``.
    """

    AtA: np.ndarray
    Aty: np.ndarray
    W: np.ndarray
    W_tilde: np.ndarray
    x_star: np.ndarray
    instances: list = field(default_factory=list)

    @classmethod
    def from_instances(cls, instances, pairs=None):
        if not instances:
            raise ValidationError("empty batch")
        if pairs is None:
            pairs = [inst.mixing_pair() for inst in instances]
        return cls(
            AtA=np.stack([inst.AtA for inst in instances]),
            Aty=np.stack([inst.Aty for inst in instances]),
            W=np.stack([p.W for p in pairs]),
            W_tilde=np.stack([p.W_tilde for p in pairs]),
            x_star=np.stack([inst.x_star for inst in instances]),
            instances=list(instances),
        )

    def __len__(self):
        return self.AtA.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return ProblemBatch(
            self.AtA[idx], self.Aty[idx], self.W[idx], self.W_tilde[idx], self.x_star[idx],
            [self.instances[i] for i in idx] if self.instances else [],
        )

    @property
    def n_nodes(self):
        return self.AtA.shape[1]

    @property
    def d(self):
        return self.AtA.shape[2]


def _hess(AtA, v):
    return np.einsum("...ij,...j->...i", AtA, v)


def _grad(problem, x):
    return _hess(problem.AtA, x) - problem.Aty


def _check_shape(problem, x):
    want = problem.Aty.shape
    if np.shape(x) != want:
        raise ValidationError(f"iterate shape {np.shape(x)} does not match problem {want}")


def prox_dgd_step(state, inst, W, alpha, lam):
    """One Prox-DGD iteration; returns the new state and ``x^{k+1/2}``.

    ``x^{k+1/2} = W x^k - alpha grad s(x^k)`` followed by soft thresholding
    at ``alpha * lam``.
    """
    x = state.x_curr
    _check_shape(inst, x)
    half = W @ x - alpha * _grad(inst, x)
    new = soft_threshold(half, alpha * lam)
    return SolverState(new, x, half, state.q_acc, state.iter + 1), half


def pg_extra_first_step(x0, inst, W, alpha, lam):
    """PG-EXTRA initial iteration; returns ``(x^{1/2}, x^1)``."""
    _check_shape(inst, x0)
    half = W @ x0 - alpha * _grad(inst, x0)
    return half, soft_threshold(half, alpha * lam)


def pg_extra_step(state, inst, pair, alpha, lam):
    """One PG-EXTRA iteration for ``k >= 1``; returns the new state and ``x^{k+1/2}``.

    ``x^{k+1/2} = W x^k + x^{k-1/2} - W_tilde x^{k-1}
    - alpha A^T A (x^k - x^{k-1})`` then soft thresholding.
    """
    if state.iter < 1 or state.x_prev is None or state.x_half_prev is None:
        raise StateError("PG-EXTRA step needs x^{k-1} and x^{k-1/2}; run the first step")
    W, Wt = _pair_mats(pair)
    x, xp = state.x_curr, state.x_prev
    _check_shape(inst, x)
    half = W @ x + state.x_half_prev - Wt @ xp - alpha * _hess(inst.AtA, x - xp)
    new = soft_threshold(half, alpha * lam)
    return SolverState(new, x, half, state.q_acc, state.iter + 1), half


def _pair_mats(pair):
    if isinstance(pair, (MixingPair, ProblemBatch)):
        return pair.W, pair.W_tilde
    if isinstance(pair, tuple) and len(pair) == 2:
        return pair
    raise ValidationError("PG-EXTRA needs a MixingPair (W, W_tilde)")


def run_solver(inst, pair, algorithm, schedule, K, x0=None, record_q=False,
               record_metrics=True, check_finite=True):
    """Run ``K`` iterations of Prox-DGD or PG-EXTRA.

    Parameters
    ----------
    inst : LassoInstance or ProblemBatch
    pair : MixingPair, or a bare ``W`` for Prox-DGD
    algorithm : {"prox-dgd", "pg-extra"}
    schedule : ParamSchedule
        At least ``K`` entries; a fixed algorithm uses a constant schedule.
    K : int
    x0 : ndarray, optional
        Starting point, zero by default.
    record_q : bool
        Maintain ``q^k`` (needs ``W_tilde``).
    record_metrics : bool
        Compute per-iteration NAMSE and consensus residuals.
    check_finite : bool
        Abort on the first non-finite iterate. Batched training disables this
        and masks divergent samples itself.

    Raises
    ------
    DivergenceError
        When an iterate becomes non-finite.
    """
    algorithm = normalize_algorithm(algorithm)
    if len(schedule) < K:
        raise ParameterError(f"schedule has {len(schedule)} entries, need {K}")
    if isinstance(pair, (MixingPair, ProblemBatch)):
        W = pair.W
    elif algorithm == PROX_DGD and not isinstance(pair, tuple):
        W = np.asarray(pair, dtype=float)
    else:
        W = _pair_mats(pair)[0]
    x0 = np.zeros_like(inst.Aty) if x0 is None else np.array(x0, dtype=float)
    _check_shape(inst, x0)

    R = None
    if record_q:
        W_, Wt = _pair_mats(pair)
        if np.ndim(W_) != 2:
            raise ValidationError("q recording supports single instances only")
        R = psd_sqrt(Wt - W_)

    start = time.perf_counter()
    iterates = [x0]
    halves = []
    qs = [R @ x0] if R is not None else None
    state = SolverState(x0, iter=0)
    for k in range(K):
        a, lam = schedule.alphas[k], schedule.lambdas[k]
        if algorithm == PROX_DGD:
            state, half = prox_dgd_step(state, inst, W, a, lam)
        elif k == 0:
            half, x1 = pg_extra_first_step(x0, inst, W, a, lam)
            state = SolverState(x1, x0, half, None, 1)
        else:
            state, half = pg_extra_step(state, inst, pair, a, lam)
        if check_finite and not np.all(np.isfinite(state.x_curr)):
            raise DivergenceError(k + 1)
        iterates.append(state.x_curr)
        halves.append(half)
        if qs is not None:
            qs.append(qs[-1] + R @ state.x_curr)
    wall = time.perf_counter() - start

    iterates = np.stack(iterates)
    traj = Trajectory(
        algorithm,
        iterates,
        np.stack(halves) if halves else np.empty((0,) + x0.shape),
        q=np.stack(qs) if qs is not None else None,
        schedule=schedule,
        wall_time=wall,
    )
    if record_metrics:
        traj.namse_db = np.array([namse(x, inst.x_star) for x in iterates])
        traj.consensus = consensus_residual(iterates)
    return traj


def consensus_residual(x):
    """``max_i ||x_i - mean(x)||`` over the agent axis (second to last)."""
    x = np.asarray(x)
    dev = x - x.mean(axis=-2, keepdims=True)
    return np.linalg.norm(dev, axis=-1).max(axis=-1)


def write_trajectory_csv(path_or_file, iters, namse_db, consensus, agent_errors=None):
    """Write a per-iteration CSV (iter, namse_db, consensus_residual[, err_i...])."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        fh.write(TRAJECTORY_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        head = ["iter", "namse_db", "consensus_residual"]
        if agent_errors is not None:
            head += [f"err_agent_{i}" for i in range(np.shape(agent_errors)[1])]
        w.writerow(head)
        for r, k in enumerate(iters):
            row = [int(k), _num(namse_db[r]), _num(consensus[r])]
            if agent_errors is not None:
                row += [_num(v) for v in agent_errors[r]]
            w.writerow(row)
    finally:
        if own:
            fh.close()


def _num(v):
    return format(float(v), ".17g")
