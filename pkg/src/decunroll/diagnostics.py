"""
Numerical certificates for the PG-EXTRA recovery bound.

Provides a centralized LASSO oracle, the constants of the step-size
condition, the fixed point ``z_hat = (q_hat, x_hat)`` of PG-EXTRA, a
per-step check of the G-norm descent inequality along a trajectory, the
assembled recovery bound, and a Monte-Carlo study of how the LASSO error
scales with the number of measurements.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ParameterError, ValidationError
from .instance import sample_instance, derive_seed
from .solvers import (
    PG_EXTRA,
    SolverState,
    pg_extra_first_step,
    pg_extra_step,
    soft_threshold,
)
from .topology import psd_sqrt

__all__ = [
    "FixedPoint",
    "TheoremQuantities",
    "LyapunovReport",
    "BoundReport",
    "ScalingResult",
    "centralized_lasso_oracle",
    "kkt_residual",
    "lipschitz_Ls",
    "theorem_quantities",
    "g_norm_sq",
    "fixed_point",
    "lyapunov_check",
    "bound_chain_check",
    "recovery_scaling_experiment",
    "write_lyapunov_csv",
]


def kkt_residual(inst, x, lam):
    """Distance from zero to the subdifferential of the consensus LASSO at ``x``.

    The objective is ``sum_i 0.5 ||A_i x - y_i||^2 + N lam ||x||_1``.
    """
    g = inst.AtA.sum(axis=0) @ x - inst.Aty.sum(axis=0)
    t = inst.n_nodes * lam
    r = np.where(x != 0, g + t * np.sign(x), np.maximum(np.abs(g) - t, 0.0))
    return float(np.linalg.norm(r))


def centralized_lasso_oracle(inst, lam, tol=1e-10, max_iter=200_000):
    """Solve the consensus-collapsed LASSO to high accuracy.

    Accelerated proximal gradient with step ``1 / lambda_max(sum A_i^T A_i)``
    and gradient-based adaptive restart. Stops when the KKT residual falls
    below ``tol``; a support-restricted Newton polish is tried whenever the
    sign pattern looks settled.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` iterations do not reach ``tol``.
    """
    if lam < 0:
        raise ParameterError("lam must be non-negative")
    H = inst.AtA.sum(axis=0)
    b = inst.Aty.sum(axis=0)
    L = float(np.linalg.eigvalsh(H)[-1])
    t = inst.n_nodes * lam
    x = np.zeros(inst.d)
    z = x.copy()
    theta = 1.0
    res = np.inf
    for it in range(max_iter):
        x_new = soft_threshold(z - (H @ z - b) / L, t / L)
        if np.dot(z - x_new, x_new - x) > 0:  # restart momentum
            theta = 1.0
            z = x
            x_new = soft_threshold(z - (H @ z - b) / L, t / L)
        theta_new = 0.5 * (1 + np.sqrt(1 + 4 * theta**2))
        z = x_new + ((theta - 1) / theta_new) * (x_new - x)
        x, theta = x_new, theta_new
        if it % 25 == 0:
            res = kkt_residual(inst, x, lam)
            if res <= tol:
                return x
            polished = _polish(H, b, x, t)
            if polished is not None:
                pres = kkt_residual(inst, polished, lam)
                if pres <= tol:
                    return polished
    raise ConvergenceError(f"oracle did not reach tol={tol:g} in {max_iter} iterations", res)


def _polish(H, b, x, t):
    # solve the smooth system on the current support with fixed signs
    S = np.flatnonzero(x)
    if S.size == 0 or S.size > H.shape[0]:
        return None
    HS = H[np.ix_(S, S)]
    try:
        xs = np.linalg.solve(HS, b[S] - t * np.sign(x[S]))
    except np.linalg.LinAlgError:
        return None
    if np.any(np.sign(xs) != np.sign(x[S])):
        return None
    out = np.zeros_like(x)
    out[S] = xs
    return out


def lipschitz_Ls(inst):
    """``max_i lambda_max(A_i^T A_i)``."""
    return float(max(np.linalg.eigvalsh(G)[-1] for G in inst.AtA))


@dataclass(frozen=True)
class TheoremQuantities:
    L_s: float
    lambda_min_W_tilde: float
    alpha: float
    alpha_max: float
    xi: float

    @property
    def admissible(self):
        return 0 < self.alpha < self.alpha_max


def theorem_quantities(inst, pair, alpha):
    """Step bound ``2 lambda_min(W_tilde) / L_s`` and descent factor ``xi``."""
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    Ls = lipschitz_Ls(inst)
    lmin = float(np.linalg.eigvalsh(pair.W_tilde)[0])
    alpha_max = 2.0 * lmin / Ls
    xi = 1.0 - alpha * Ls / (2.0 * lmin)
    return TheoremQuantities(Ls, lmin, float(alpha), alpha_max, xi)


def g_norm_sq(q, x, W_tilde):
    """``||q||_F^2 + trace(x^T W_tilde x)``."""
    q = np.asarray(q, dtype=float)
    x = np.asarray(x, dtype=float)
    return float(np.sum(q * q) + np.sum(x * (W_tilde @ x)))


@dataclass
class FixedPoint:
    x_hat: np.ndarray
    q_hat: np.ndarray
    residual: float
    iterations: int = 0
    R: np.ndarray | None = None
    method: str = "trajectory"

    def x_stacked(self):
        return np.broadcast_to(self.x_hat, self.q_hat.shape).copy()


def fixed_point(inst, pair, alpha, lam, tol=1e-9, max_iter=500_000, oracle_tol=1e-10,
                method="auto"):
    """PG-EXTRA fixed point ``(q_hat, x_hat)``.

    ``x_hat`` comes from the centralized oracle. With ``method="trajectory"``
    ``q_hat`` is the limit of the accumulator
    ``q^k = sum_t (W_tilde - W)^{1/2} x^t`` along a PG-EXTRA run, stopped
    once ``||x^k - x_hat||_F`` and ``||(W_tilde - W)^{1/2} x^k||_F`` are both
    below ``tol``. ``method="linear"`` solves the stationarity relation with a
    pseudo-inverse and the subgradient shared by all agents; it is the only
    option when ``alpha`` is too large for PG-EXTRA to converge. ``"auto"``
    uses the trajectory inside the admissible step range and the linear
    solve outside it.

    ``residual`` is the stationarity defect of ``q_hat`` minimized over
    valid l1 subgradients.
    """
    if method not in ("auto", "trajectory", "linear"):
        raise ParameterError(f"unknown method {method!r}")
    x_hat = centralized_lasso_oracle(inst, lam, tol=oracle_tol)
    R = psd_sqrt(pair.W_tilde - pair.W)
    if method == "auto":
        method = "trajectory" if theorem_quantities(inst, pair, alpha).admissible else "linear"
    if method == "linear":
        q, k = _q_linear(inst, R, x_hat, alpha, lam), 0
    else:
        q, k = _q_trajectory(inst, pair, R, x_hat, alpha, lam, tol, max_iter)
    res = stationarity_residual(inst, R, q, x_hat, alpha, lam)
    return FixedPoint(x_hat, q, res, k, R, method)


def _q_trajectory(inst, pair, R, x_hat, alpha, lam, tol, max_iter):
    N = inst.n_nodes
    X_hat = np.broadcast_to(x_hat, (N, inst.d))
    x0 = np.zeros((N, inst.d))
    q = R @ x0
    half, x1 = pg_extra_first_step(x0, inst, pair.W, alpha, lam)
    state = SolverState(x1, x0, half, iter=1)
    q = q + R @ x1
    k = 1
    with np.errstate(all="ignore"):
        while True:
            inc = np.linalg.norm(R @ state.x_curr)
            if np.linalg.norm(state.x_curr - X_hat) <= tol and inc <= tol:
                return q, k
            if k >= max_iter or not np.all(np.isfinite(state.x_curr)):
                raise ConvergenceError(
                    f"PG-EXTRA did not reach the fixed point within {k} iterations",
                    float(np.linalg.norm(state.x_curr - X_hat)),
                )
            state, _ = pg_extra_step(state, inst, pair, alpha, lam)
            q = q + R @ state.x_curr
            k += 1


def _q_linear(inst, R, x_hat, alpha, lam):
    N = inst.n_nodes
    G = inst.gradient(np.broadcast_to(x_hat, (N, inst.d)))
    if lam > 0:
        # consensus subgradient: sum_i grad_i + N lam g = 0
        g = -G.sum(axis=0) / (N * lam)
        g = np.where(x_hat != 0, np.sign(x_hat), np.clip(g, -1.0, 1.0))
    else:
        g = np.zeros(inst.d)
    rhs = -alpha * (G + lam * g)
    return np.linalg.pinv(R, rcond=1e-10) @ rhs


def stationarity_residual(inst, R, q, x_hat, alpha, lam):
    """``min_g ||R q + alpha (grad s(x_hat) + lam g)||_F`` over l1 subgradients ``g``."""
    N = inst.n_nodes
    X = np.broadcast_to(x_hat, (N, inst.d))
    base = R @ q + alpha * inst.gradient(X)
    if lam == 0:
        return float(np.linalg.norm(base))
    s = np.broadcast_to(np.sign(x_hat), base.shape)
    g = np.where(s != 0, s, np.clip(-base / (alpha * lam), -1.0, 1.0))
    return float(np.linalg.norm(base + alpha * lam * g))


@dataclass
class LyapunovReport:
    lhs: np.ndarray
    rhs: np.ndarray
    margin: np.ndarray
    scale: float
    tol_abs: float
    informational: bool = False

    @property
    def passed(self):
        return self.n_violations == 0

    @property
    def n_violations(self):
        # non-finite margins count as violations
        return int(np.sum(~(self.margin >= -self.tol_abs)))


def _z_dist(traj, fp, W_tilde):
    q_hat, X_hat = fp.q_hat, fp.x_stacked()
    return np.array([g_norm_sq(q - q_hat, x - X_hat, W_tilde)
                     for q, x in zip(traj.q, traj.iterates)])


def lyapunov_check(traj, fp, tq, W_tilde, rel_tol=1e-8, informational=False):
    """Check ``||z^k - z_hat||_G^2 - ||z^{k+1} - z_hat||_G^2 >= xi ||z^k - z^{k+1}||_G^2``.

    ``traj`` must come from `run_solver` with ``record_q=True``. The
    tolerance is ``rel_tol * ||z^0 - z_hat||_G^2``. Runs with a learned
    schedule fall outside the inequality's hypothesis; pass
    ``informational=True`` to tag such reports.
    """
    if traj.q is None:
        raise ValidationError("trajectory has no q record; run with record_q=True")
    dist = _z_dist(traj, fp, W_tilde)
    steps = np.array([g_norm_sq(traj.q[k + 1] - traj.q[k], traj.iterates[k + 1] - traj.iterates[k], W_tilde)
                      for k in range(len(traj.iterates) - 1)])
    lhs = dist[:-1] - dist[1:]
    rhs = tq.xi * steps
    scale = float(dist[0])
    return LyapunovReport(lhs, rhs, lhs - rhs, scale, rel_tol * scale, informational)


@dataclass
class BoundReport:
    """Links of the recovery-bound chain evaluated at every iteration.

    ``links[name]`` has one entry per ``k``; ``slack[name]`` is right minus
    left side of the corresponding inequality.
    """

    error: np.ndarray
    bound: np.ndarray
    slack: dict = field(default_factory=dict)
    scale: float = 1.0
    rel_tol: float = 1e-8

    @property
    def min_relative_slack(self):
        return float(min(np.min(s) for s in self.slack.values()) / self.scale)

    @property
    def passed(self):
        return self.min_relative_slack >= -self.rel_tol


def bound_chain_check(traj, fp, tq, W_tilde, x_star, rel_tol=1e-8):
    """Evaluate every inequality of the recovery-bound chain along ``traj``.

    The statistical term is replaced by the measured ``||x_hat - x*||_F^2``
    (stacked). With ``e_k = ||x^{k+1} - x*||_{W_tilde}^2`` the chain is::

        e_k <= 2||x^{k+1} - x_hat||_Wt^2 + 2||x_hat - x*||_Wt^2           (split)
            <= 2||z^{k+1} - z_hat||_G^2 + 2||Wt||^2 ||x_hat - x*||_F^2     (G-norm)
            <= 2(||z^k - z_hat||_G^2 - xi ||z^{k+1} - z^k||_G^2) + 2T      (descent)
            <= 2(||z^0 - z_hat||_G^2 - xi sum_t ||z^{t+1} - z^t||_G^2) + 2T (telescoped)
    """
    if traj.q is None:
        raise ValidationError("trajectory has no q record; run with record_q=True")
    N = traj.iterates.shape[1]
    Xs = np.broadcast_to(np.asarray(x_star, dtype=float), (N, traj.iterates.shape[2]))
    X_hat = fp.x_stacked()
    Wt = W_tilde
    wt2 = float(np.linalg.norm(Wt, 2) ** 2)

    def wnorm(x):
        return float(np.sum(x * (Wt @ x)))

    T = float(np.sum((X_hat - Xs) ** 2))
    dist = _z_dist(traj, fp, Wt)
    steps = np.array([g_norm_sq(traj.q[k + 1] - traj.q[k], traj.iterates[k + 1] - traj.iterates[k], Wt)
                      for k in range(len(traj.iterates) - 1)])
    K = len(steps)
    err = np.array([wnorm(traj.iterates[k + 1] - Xs) for k in range(K)])
    split = np.array([2 * wnorm(traj.iterates[k + 1] - X_hat) + 2 * wnorm(X_hat - Xs) for k in range(K)])
    gnorm = 2 * dist[1:] + 2 * wt2 * T
    descent = 2 * (dist[:-1] - tq.xi * steps) + 2 * T
    tele = 2 * (dist[0] - tq.xi * np.cumsum(steps)) + 2 * T
    slack = {
        "split": split - err,
        "g_norm": gnorm - split,
        "descent": descent - gnorm,
        "telescoped": tele - descent,
        "bound": tele - err,
    }
    scale = max(float(2 * dist[0] + 2 * T), np.finfo(float).tiny)
    return BoundReport(err, tele, slack, scale, rel_tol)


@dataclass
class ScalingResult:
    m_list: np.ndarray
    mse: np.ndarray
    mse_std: np.ndarray
    slope: float
    degenerate: bool
    trials: int
    warnings: list = field(default_factory=list)


def default_lambda_rule(cfg, sigma):
    """``N lam = sigma sqrt(2 m log d)``, the usual noise-matched LASSO weight."""
    lam = sigma * np.sqrt(2.0 * cfg.m_total * np.log(cfg.d)) / cfg.n_nodes
    return max(float(lam), 1e-6)


def recovery_scaling_experiment(base_cfg, m_list, trials, lam_rule=None, oracle_tol=1e-9):
    """Average oracle error ``||x_hat - x*||_F^2`` (stacked) against ``m``.

    Each ``(m, trial)`` cell draws an independent instance whose seed is split
    from ``base_cfg.seed``. The returned slope is the least-squares fit of
    ``log mse`` on ``log m``; it is NaN and ``degenerate`` is set when all
    errors are numerically zero.
    """
    m_list = np.asarray(sorted(int(m) for m in m_list))
    if m_list.size < 2:
        raise ParameterError("need at least two values of m")
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    lam_rule = lam_rule or default_lambda_rule
    warnings = []
    if trials < 5:
        warnings.append(f"only {trials} trial(s) per m; slope has high variance")
    mse, sd = [], []
    for mi, m in enumerate(m_list):
        errs = []
        for t in range(trials):
            cfg = base_cfg.replace(m_total=int(m), seed=derive_seed(base_cfg.seed, mi, t))
            inst = sample_instance(cfg)
            sigma = float(np.max(np.atleast_1d(inst.sigma)))
            lam = lam_rule(cfg, sigma)
            x_hat = centralized_lasso_oracle(inst, lam, tol=oracle_tol)
            errs.append(cfg.n_nodes * float(np.sum((x_hat - inst.x_star) ** 2)))
        mse.append(np.mean(errs))
        sd.append(np.std(errs))
    mse = np.array(mse)
    ref = base_cfg.n_nodes * base_cfg.p_s
    degenerate = bool(np.all(mse <= 1e-8 * ref))
    slope = float("nan") if degenerate else float(np.polyfit(np.log(m_list), np.log(mse), 1)[0])
    return ScalingResult(m_list, mse, np.array(sd), slope, degenerate, trials, warnings)


def write_lyapunov_csv(path, report):
    with open(path, "w", newline="") as fh:
        fh.write("# schema: decunroll.lyapunov/1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "lhs", "rhs", "margin"])
        for k, (a, b, c) in enumerate(zip(report.lhs, report.rhs, report.margin)):
            w.writerow([k, format(float(a), ".17g"), format(float(b), ".17g"), format(float(c), ".17g")])
