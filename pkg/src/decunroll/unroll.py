"""
Learned Prox-DGD / PG-EXTRA by differentiating the unrolled iteration.

The ``K`` iterations of a solver are treated as ``K`` layers, each with its
own step size ``alpha_k`` and regularization weight ``lambda_k``. The
forward pass is `decunroll.solvers.run_solver` itself; the backward pass is
a hand-written reverse sweep through the recorded iterates.

Soft thresholding is differentiated with the convention that the kink
belongs to the dead zone::

    d S_t(v) / dv = 1[|v| > t],     d S_t(v) / dt = -sign(v) 1[|v| > t]
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DivergenceError, ParameterError, ParseError, ValidationError
from .instance import namse
from .solvers import (
    PG_EXTRA,
    PROX_DGD,
    ParamSchedule,
    ProblemBatch,
    _hess,
    normalize_algorithm,
    run_solver,
)

log = logging.getLogger(__name__)

__all__ = [
    "LearnableParams",
    "Tape",
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "forward_unrolled",
    "unrolled_loss",
    "backward",
    "finite_diff_grad",
    "adam_update",
    "init_params",
    "train",
    "evaluate",
    "write_params",
    "read_params",
    "PARAMS_MAGIC",
]

PARAMS_MAGIC = "# decunroll-params v1"


@dataclass(frozen=True)
class LearnableParams:
    """Unconstrained per-layer parameters.

    The effective values are ``alpha_k = |raw_alpha_k|`` and
    ``lambda_k = |raw_lambda_k|``.
    """

    raw_alphas: np.ndarray
    raw_lambdas: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.raw_alphas, dtype=float)).copy()
        lam = np.atleast_1d(np.asarray(self.raw_lambdas, dtype=float)).copy()
        if a.shape != lam.shape or a.ndim != 1:
            raise ParameterError("raw_alphas and raw_lambdas must be 1-D of equal length")
        object.__setattr__(self, "raw_alphas", a)
        object.__setattr__(self, "raw_lambdas", lam)

    @classmethod
    def constant(cls, alpha, lam, K):
        return cls(np.full(K, float(alpha)), np.full(K, float(lam)))

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        K = vec.size // 2
        return cls(vec[:K], vec[K:])

    @property
    def K(self):
        return self.raw_alphas.size

    @property
    def alphas(self):
        return np.abs(self.raw_alphas)

    @property
    def lambdas(self):
        return np.abs(self.raw_lambdas)

    def vector(self):
        return np.concatenate([self.raw_alphas, self.raw_lambdas])

    def schedule(self):
        return ParamSchedule(self.alphas, self.lambdas)

    def chain(self, d_alpha, d_lambda):
        """Map gradients w.r.t. effective values to raw coordinates (as one vector)."""
        return np.concatenate([d_alpha * np.sign(self.raw_alphas),
                               d_lambda * np.sign(self.raw_lambdas)])


@dataclass
class Tape:
    """Everything the reverse sweep needs from one forward pass."""

    algorithm: str
    problem: object
    W: np.ndarray
    W_tilde: np.ndarray | None
    iterates: np.ndarray
    halves: np.ndarray
    alphas: np.ndarray
    lambdas: np.ndarray

    @property
    def K(self):
        return len(self.alphas)

    def replay(self):
        """Re-run the forward pass from the recorded parameters."""
        pair = (self.W, self.W_tilde) if self.W_tilde is not None else self.W
        traj = run_solver(self.problem, pair, self.algorithm,
                          ParamSchedule(self.alphas, self.lambdas), self.K,
                          x0=self.iterates[0], record_metrics=False)
        return traj

    def active_masks(self):
        """Boolean ``|x^{k+1/2}| > alpha_k lambda_k`` per layer."""
        t = self._thresholds()
        return np.abs(self.halves) > t

    def kink_margin(self):
        """Smallest relative distance ``||v| - t| / t`` to a threshold over all layers."""
        t = self._thresholds()
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(np.abs(self.halves) - t) / t
        return float(np.nanmin(rel)) if rel.size else float("inf")

    def _thresholds(self):
        t = self.alphas * self.lambdas
        return t.reshape((-1,) + (1,) * (self.halves.ndim - 1))


def _pair_arrays(pair, algorithm):
    if isinstance(pair, tuple):
        W, Wt = pair
    elif hasattr(pair, "W"):
        W, Wt = pair.W, getattr(pair, "W_tilde", None)
    else:
        W, Wt = np.asarray(pair, dtype=float), None
    if algorithm == PG_EXTRA and Wt is None:
        raise ValidationError("PG-EXTRA needs W_tilde")
    return W, Wt


def forward_unrolled(inst, pair, theta, K=None, algorithm=PG_EXTRA, x0=None,
                     check_finite=True):
    """Run the unrolled solver with per-layer parameters.

    Returns
    -------
    traj : Trajectory
    tape : Tape
    """
    algorithm = normalize_algorithm(algorithm)
    K = theta.K if K is None else K
    if theta.K != K:
        raise ParameterError(f"parameters have {theta.K} layers, expected {K}")
    W, Wt = _pair_arrays(pair, algorithm)
    sched = theta.schedule()
    solver_pair = (W, Wt) if Wt is not None else W
    with np.errstate(all="ignore" if not check_finite else "warn"):
        traj = run_solver(inst, solver_pair, algorithm, sched, K, x0=x0,
                          record_metrics=False, check_finite=check_finite)
    tape = Tape(algorithm, inst, W, Wt, traj.iterates, traj.halves,
                sched.alphas.copy(), sched.lambdas.copy())
    return traj, tape


def _x_star_like(iterates, x_star):
    x_star = np.asarray(x_star, dtype=float)
    # iterates: (K+1, [B,] N, d); x_star: ([B,] d)
    return x_star[..., None, :]


def unrolled_loss(traj, x_star, gamma):
    """Discounted recovery loss ``sum_k gamma^{K-k} ||x^k - x*||_F^2``.

    Batched trajectories are averaged over the batch axis.
    """
    if not 0 < gamma <= 1:
        raise ParameterError("gamma must lie in (0, 1]")
    its = traj.iterates if hasattr(traj, "iterates") else np.asarray(traj)
    K = len(its) - 1
    if K == 0:
        return 0.0
    err = its[1:] - _x_star_like(its, x_star)
    sq = np.sum(err**2, axis=(-2, -1))  # (K,) or (K, B)
    w = gamma ** (K - np.arange(1, K + 1, dtype=float))
    per_sample = np.tensordot(w, sq, axes=(0, 0))
    return float(np.mean(per_sample))


def backward(tape, x_star, gamma):
    """Reverse-mode gradient of `unrolled_loss` w.r.t. the effective schedule.

    Returns
    -------
    d_alpha, d_lambda : ndarray, shape (K,)
    """
    if not 0 < gamma <= 1:
        raise ParameterError("gamma must lie in (0, 1]")
    its, halves = tape.iterates, tape.halves
    K = tape.K
    if len(its) != K + 1 or len(halves) != K:
        raise ValidationError("tape and parameter lengths disagree")
    prob = tape.problem
    W = tape.W
    WT = np.swapaxes(W, -1, -2)
    WtT = np.swapaxes(tape.W_tilde, -1, -2) if tape.W_tilde is not None else None
    n_batch = its.shape[1] if its.ndim == 4 else 1
    xs = _x_star_like(its, x_star)

    # adjoints of every x^k, seeded by the loss
    xbar = np.zeros_like(its)
    for k in range(1, K + 1):
        xbar[k] = 2.0 * gamma ** (K - k) * (its[k] - xs) / n_batch
    vbar_carry = np.zeros_like(its[0])
    d_alpha = np.zeros(K)
    d_lambda = np.zeros(K)
    extra = tape.algorithm == PG_EXTRA

    for k in range(K - 1, -1, -1):
        a, lam = tape.alphas[k], tape.lambdas[k]
        t = a * lam
        v = halves[k]
        active = np.abs(v) > t
        vbar = np.where(active, xbar[k + 1], 0.0) + vbar_carry
        tbar = -np.sum(np.sign(v) * np.where(active, xbar[k + 1], 0.0))
        d_alpha[k] += tbar * lam
        d_lambda[k] += tbar * a

        x = its[k]
        Hv = _hess(prob.AtA, vbar)
        xbar[k] += WT @ vbar - a * Hv
        if extra and k >= 1:
            xp = its[k - 1]
            d_alpha[k] -= np.sum(_hess(prob.AtA, x - xp) * vbar)
            xbar[k - 1] += -(WtT @ vbar) + a * Hv
            vbar_carry = vbar
        else:
            d_alpha[k] -= np.sum((_hess(prob.AtA, x) - prob.Aty) * vbar)
            vbar_carry = np.zeros_like(vbar)
    return d_alpha, d_lambda


@dataclass
class FDResult:
    """Central-difference gradient with per-coordinate kink flags."""

    d_alpha: np.ndarray
    d_lambda: np.ndarray
    kink_alpha: np.ndarray
    kink_lambda: np.ndarray


def finite_diff_grad(inst, pair, theta, gamma, eps=1e-6, algorithm=PG_EXTRA, relative=True,
                     max_step=None):
    """Central-difference gradient of the unrolled loss.

    The step for coordinate ``c`` is ``eps * |theta_c|`` when ``relative``,
    else ``eps``. A coordinate is flagged as a kink when either perturbed
    forward pass changes the soft-threshold active set of any layer; the
    loss is not differentiable along that direction at this resolution.

    With a fixed active set every layer is affine in its own ``alpha_k`` and
    ``lambda_k``, so the loss is exactly quadratic along one coordinate and
    central differences carry no truncation error. Passing ``max_step``
    exploits this: the step starts at ``max_step`` (scaled like ``eps``) and
    is halved until the active set stays put, never going below the
    ``eps`` step. Large steps shrink the roundoff term.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if max_step is not None and max_step < eps:
        raise ParameterError("max_step must be >= eps")
    K = theta.K
    base_a, base_l = theta.alphas, theta.lambdas
    _, tape0 = forward_unrolled(inst, pair, theta, K, algorithm)
    mask0 = tape0.active_masks()

    def probe(alphas, lambdas):
        th = LearnableParams(alphas, lambdas)
        traj, tape = forward_unrolled(inst, pair, th, K, algorithm)
        return unrolled_loss(traj, inst.x_star, gamma), tape.active_masks()

    def central(which, k, h):
        vals, same = [], True
        for sgn in (+1, -1):
            a, lam = base_a.copy(), base_l.copy()
            (a if which == "alpha" else lam)[k] += sgn * h
            f, m = probe(a, lam)
            vals.append(f)
            same = same and np.array_equal(m, mask0)
        return (vals[0] - vals[1]) / (2 * h), same

    out = []
    for which in ("alpha", "lambda"):
        g = np.zeros(K)
        kink = np.zeros(K, dtype=bool)
        for k in range(K):
            base = base_a if which == "alpha" else base_l
            scale = abs(base[k]) if relative and base[k] != 0 else 1.0
            h_min = eps * scale
            h = h_min if max_step is None else max_step * scale
            while True:
                g[k], same = central(which, k, h)
                if same or h <= h_min:
                    break
                h = max(h / 2, h_min)
            kink[k] = not same
        out += [g, kink]
    return FDResult(out[0], out[2], out[1], out[3])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def adam_update(theta, grad, st):
    """One bias-corrected Adam step; returns ``(theta', state')``."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or st.m.shape != theta.shape:
        raise ValidationError("Adam: parameter, gradient and moment shapes differ")
    step = st.step + 1
    m = st.beta1 * st.m + (1 - st.beta1) * grad
    v = st.beta2 * st.v + (1 - st.beta2) * grad * grad
    m_hat = m / (1 - st.beta1**step)
    v_hat = v / (1 - st.beta2**step)
    new = theta - st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
    return new, replace(st, m=m, v=v, step=step)


@dataclass(frozen=True)
class TrainConfig:
    K: int = 10
    gamma: float = 0.9
    epochs: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    algorithm: str = PG_EXTRA
    init_alpha: float | None = None
    init_lambda: float = 0.1

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ParameterError("gamma must lie in (0, 1]")
        if self.K < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("K, epochs and batch_size must be >= 1")
        object.__setattr__(self, "algorithm", normalize_algorithm(self.algorithm))

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainResult:
    params: LearnableParams
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_namse: float = float("inf")


def init_params(instances, pairs, cfg):
    """Start every layer inside the provable-descent step range.

    ``alpha = 2 mean(lambda_min(W_tilde)) / (3 mean(L_s))`` unless the
    config fixes it, ``lambda = cfg.init_lambda``.
    """
    alpha = cfg.init_alpha
    if alpha is None:
        lmin = np.mean([np.linalg.eigvalsh(p.W_tilde)[0] for p in pairs])
        Ls = np.mean([np.linalg.eigvalsh(inst.AtA).max() for inst in instances])
        alpha = 2.0 * lmin / (3.0 * Ls)
    return LearnableParams.constant(alpha, cfg.init_lambda, cfg.K)


def _batch_step(batch, theta, cfg):
    """Loss and raw-parameter gradient on a batch, dropping divergent samples."""
    traj, tape = forward_unrolled(batch, batch, theta, cfg.K, cfg.algorithm, check_finite=False)
    ok = np.all(np.isfinite(traj.iterates), axis=(0, 2, 3))
    n_bad = int((~ok).sum())
    if n_bad:
        if n_bad > 0.1 * len(batch):
            raise DivergenceError(-1, f"{n_bad}/{len(batch)} samples diverged in one batch")
        log.warning("skipping %d divergent sample(s) in batch", n_bad)
        batch = batch.subset(np.flatnonzero(ok))
        traj, tape = forward_unrolled(batch, batch, theta, cfg.K, cfg.algorithm)
    loss = unrolled_loss(traj, batch.x_star, cfg.gamma)
    da, dl = backward(tape, batch.x_star, cfg.gamma)
    return loss, theta.chain(da, dl)


def train(train_set, val_set, cfg, train_pairs=None, val_pairs=None, theta0=None):
    """Fit per-layer parameters with Adam on the discounted recovery loss.

    Batches are formed from a permutation drawn from ``cfg.seed`` each epoch;
    the parameters with the best validation NAMSE (at layer ``K``) are kept.

    Returns
    -------
    TrainResult
        ``log`` rows are dicts with ``epoch``, ``train_loss``,
        ``val_namse_db`` and ``wall_ms``.
    """
    if not train_set:
        raise ValidationError("empty training split")
    train_pairs = train_pairs or [s.mixing_pair() for s in train_set]
    tr = ProblemBatch.from_instances(train_set, train_pairs)
    va = None
    if val_set:
        val_pairs = val_pairs or [s.mixing_pair() for s in val_set]
        va = ProblemBatch.from_instances(val_set, val_pairs)
    theta = theta0 if theta0 is not None else init_params(train_set, train_pairs, cfg)
    if theta.K != cfg.K:
        raise ParameterError("initial parameters do not match K")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    adam = AdamState.zeros(2 * cfg.K, lr=cfg.lr)
    vec = theta.vector()

    result = TrainResult(theta)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            loss, g = _batch_step(tr.subset(idx), LearnableParams.from_vector(vec), cfg)
            vec, adam = adam_update(vec, g, adam)
            losses.append(loss * len(idx))
        theta = LearnableParams.from_vector(vec)
        val = _final_namse(va, theta, cfg) if va is not None else float("nan")
        row = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / len(tr)),
            "val_namse_db": val,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        result.log.append(row)
        score = val if va is not None else row["train_loss"]
        if np.isfinite(score) and score < result.best_val_namse:
            result.best_val_namse = score
            result.best_epoch = epoch
            result.params = theta
    return result


def _final_namse(batch, theta, cfg):
    try:
        traj, _ = forward_unrolled(batch, batch, theta, cfg.K, cfg.algorithm)
    except DivergenceError:
        return float("inf")
    return namse(traj.final, batch.x_star)


def evaluate(instances, theta, K=None, algorithm=PG_EXTRA, pairs=None):
    """Batch NAMSE after every layer of the unrolled solver.

    Returns
    -------
    curve : ndarray, shape (K + 1,)
    final : float
    """
    if not instances:
        raise ValidationError("empty evaluation split")
    K = theta.K if K is None else K
    if theta.K != K:
        raise ValidationError(f"parameters have {theta.K} layers, expected {K}")
    batch = ProblemBatch.from_instances(instances, pairs)
    traj, _ = forward_unrolled(batch, batch, theta, K, algorithm)
    curve = np.array([namse(x, batch.x_star) for x in traj.iterates])
    return curve, float(curve[-1])


def write_params(path, theta, algorithm, gamma, seed, config_hash="none"):
    lines = [
        PARAMS_MAGIC,
        f"algorithm {normalize_algorithm(algorithm)}",
        f"K {theta.K}",
        f"gamma {format(float(gamma), '.17g')}",
        f"seed {seed}",
        f"config_hash {config_hash}",
    ]
    for k, (a, lam) in enumerate(zip(theta.alphas, theta.lambdas), start=1):
        lines.append(f"{k} {format(float(a), '.17g')} {format(float(lam), '.17g')}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_params(path):
    """Parse a parameter file; returns ``(LearnableParams, header dict)``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != PARAMS_MAGIC:
        raise ParseError("not a decunroll parameter file", line=1)
    header = {}
    keys = ("algorithm", "K", "gamma", "seed", "config_hash")
    for n, key in enumerate(keys, start=2):
        if len(lines) < n:
            raise ParseError(f"missing '{key}'", line=n)
        parts = lines[n - 1].split(maxsplit=1)
        if len(parts) != 2 or parts[0] != key:
            raise ParseError(f"expected '{key}'", line=n)
        header[key] = parts[1]
    try:
        K = int(header["K"])
        header["K"] = K
        header["gamma"] = float(header["gamma"])
        header["algorithm"] = normalize_algorithm(header["algorithm"])
    except (ValueError, ParameterError) as exc:
        raise ParseError(str(exc)) from exc
    body = lines[len(keys) + 1:]
    if len(body) != K:
        raise ParseError(f"expected {K} layer lines, found {len(body)}", line=len(lines))
    a = np.empty(K)
    lam = np.empty(K)
    for i, ln in enumerate(body):
        lineno = len(keys) + 2 + i
        parts = ln.split()
        if len(parts) != 3:
            raise ParseError("layer line must be 'k alpha lambda'", line=lineno)
        try:
            k, a[i], lam[i] = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError("bad number in layer line", line=lineno) from None
        if k != i + 1:
            raise ParseError(f"expected layer {i + 1}, found {k}", line=lineno)
    return LearnableParams(a, lam), header
