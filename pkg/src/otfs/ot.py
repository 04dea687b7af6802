"""Entropic optimal transport between two weighted point sets.

The solver works on log-potentials (log-sum-exp updates) so that small
regularization does not underflow the scaling vectors.  Costs are min-max
normalized to [0, 1] before scaling by ``1 / epsilon`` which makes epsilon
comparable across metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._numeric import logsumexp
from .errors import ConvergenceError, DegeneratePlanError, InstabilityError, ShapeError

METRICS = ("squared-euclidean", "euclidean", "negative-cosine")

_MARGINAL_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iterations: int = 1000
    tolerance: float = 1e-6
    normalize_cost: bool = True
    # anneal epsilon geometrically from 1.0 (warm-started potentials) when the
    # target is below this value; same fixed point, far fewer iterations
    scaling_below: float = 0.01
    scaling_factor: float = 0.5
    # multiplicative updates when costs are normalized and epsilon >= scaling_below
    kernel_fast_path: bool = True
    # small problems (n + m <= newton_max_size) still unconverged after
    # newton_after iterations of the final stage switch to Newton steps on the
    # dual; plain scaling can contract very slowly there.  0 disables.
    newton_after: int = 50
    newton_max_size: int = 400

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")
        if not 0 < self.scaling_factor < 1:
            raise ValueError(f"scaling_factor must be in (0, 1), got {self.scaling_factor}")
        if self.newton_after < 0 or self.newton_max_size < 0:
            raise ValueError("newton_after and newton_max_size must be >= 0")

    def newton_eligible(self, n: int, m: int) -> bool:
        return self.newton_after > 0 and n + m <= self.newton_max_size

    def schedule(self) -> list[float]:
        """Epsilon values visited by the solver, ending at ``epsilon``."""
        if self.epsilon >= self.scaling_below:
            return [self.epsilon]
        steps = [1.0]
        while steps[-1] * self.scaling_factor > self.epsilon:
            steps.append(steps[-1] * self.scaling_factor)
        steps.append(self.epsilon)
        return steps


@dataclass
class TransportPlan:
    """Converged (or best-effort) Sinkhorn output."""

    values: np.ndarray
    iterations_used: int
    max_marginal_violation: float
    converged: bool = True
    cost_min: float = 0.0
    cost_span: float = 1.0
    log_row_potential: np.ndarray = field(default=None, repr=False)
    log_col_potential: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.values.shape

    def to_dict(self) -> dict:
        return {
            "plan": self.values.tolist(),
            "iterations_used": int(self.iterations_used),
            "max_marginal_violation": float(self.max_marginal_violation),
            "converged": bool(self.converged),
            "cost_normalization": {"min": float(self.cost_min), "span": float(self.cost_span)},
        }


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def pairwise_cost(a, b, metric: str = "squared-euclidean") -> np.ndarray:
    """Cost matrix ``C[i, j] = metric(a[i], b[j])``.

    Differences are formed explicitly rather than through the
    ``|a|^2 - 2ab + |b|^2`` expansion so that exact ties stay exact.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if metric == "squared-euclidean":
        diff = a[:, None, :] - b[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    if metric == "euclidean":
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if metric == "negative-cosine":
        na = np.linalg.norm(a, axis=1, keepdims=True)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        if np.any(na == 0) or np.any(nb == 0):
            raise DegeneratePlanError("negative-cosine cost needs non-zero rows")
        cos = (a / na) @ (b / nb).T
        return -cos + 0.0  # avoid -0.0 in output
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _check_marginal(v, n: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != n:
        raise ShapeError(f"{name} has length {v.shape[0]}, cost needs {n}")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite and nonnegative")
    if abs(v.sum() - 1.0) > _MARGINAL_SUM_TOL:
        raise ValueError(f"{name} must sum to 1 (got {v.sum():.12g})")
    return v


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _violation(plan: np.ndarray, r: np.ndarray, c: np.ndarray) -> float:
    return max(float(abs(plan.sum(axis=1) - r).max()), float(abs(plan.sum(axis=0) - c).max()))


def sinkhorn(cost, r=None, c=None, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Solve ``min <pi, C> - eps * H(pi)`` over plans with marginals ``(r, c)``.

    ``r`` and ``c`` default to uniform.  Raises :class:`ConvergenceError`
    (carrying the best iterate) when the L-infinity marginal violation does
    not drop to ``cfg.tolerance`` within ``cfg.max_iterations``.
    """
    cfg = cfg or SinkhornConfig()
    C = _as_matrix(cost, "cost")
    n, m = C.shape
    if n < 1 or m < 1:
        raise ShapeError("cost matrix must be non-empty")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    r = uniform(n) if r is None else _check_marginal(r, n, "r")
    c = uniform(m) if c is None else _check_marginal(c, m, "c")

    lo = float(C.min())
    span = float(C.max() - lo)
    if cfg.normalize_cost:
        Cn = (C - lo) / span if span > 0 else np.zeros_like(C)
    else:
        Cn, lo, span = C, 0.0, 1.0
    if cfg.kernel_fast_path and cfg.normalize_cost and cfg.epsilon >= cfg.scaling_below:
        # kernel entries are >= exp(-1/scaling_below); no underflow possible
        return _sinkhorn_kernel(Cn, r, c, cfg, lo, span)

    with np.errstate(divide="ignore"):
        log_r = np.log(r)
        log_c = np.log(c)
    live_r = r > 0
    live_c = c > 0
    newton = cfg.newton_eligible(n, m) and live_r.all() and live_c.all()

    # f, g are dual potentials divided by the current epsilon
    f = np.zeros(n)
    g = np.zeros(m)
    best = None
    best_violation = np.inf
    it = 0
    schedule = cfg.schedule()
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for stage, eps in enumerate(schedule):
            final = stage == len(schedule) - 1
            if stage:
                ratio = schedule[stage - 1] / eps
                f, g = f * ratio, g * ratio
            log_k = -Cn / eps
            stage_tol = cfg.tolerance if final else max(cfg.tolerance, 1e-3)
            stage_start = it
            while it < cfg.max_iterations:
                if final and newton and it - stage_start >= cfg.newton_after:
                    plan, f, g, steps, violation = _newton(log_k, f, g, r, c, cfg.tolerance, cfg.max_iterations - it)
                    it += steps
                    if violation < best_violation:
                        best_violation, best = violation, (plan, it, f.copy(), g.copy())
                    if violation <= cfg.tolerance:
                        return TransportPlan(plan, it, violation, True, lo, span, f, g)
                    break
                it += 1
                f = log_r - logsumexp(log_k + g[None, :], axis=1)
                g = log_c - logsumexp(log_k + f[:, None], axis=0)
                if not (np.isfinite(f[live_r]).all() and np.isfinite(g[live_c]).all()):
                    raise InstabilityError(f"non-finite potentials at iteration {it}")
                plan = np.exp(log_k + f[:, None] + g[None, :])
                violation = _violation(plan, r, c)
                if final and violation < best_violation:
                    best_violation = violation
                    best = (plan, it, f.copy(), g.copy())
                if violation <= stage_tol:
                    if final:
                        return TransportPlan(plan, it, violation, True, lo, span, f, g)
                    break

    if best is None:
        best = (plan, it, f.copy(), g.copy())
        best_violation = violation
    plan, it, bf, bg = best
    diag = TransportPlan(plan, it, best_violation, False, lo, span, bf, bg)
    raise ConvergenceError(
        f"sinkhorn did not reach tolerance {cfg.tolerance:g} in {cfg.max_iterations} "
        f"iterations (best violation {best_violation:.3g} at iteration {it})",
        best=diag,
    )


def _sinkhorn_kernel(Cn, r, c, cfg, lo, span) -> TransportPlan:
    """Multiplicative updates ``u = r / Kv``, ``v = c / K'u``; same iterates as
    the log-domain loop with ``f = log u``, ``g = log v``."""
    K = np.exp(-Cn / cfg.epsilon)
    v = np.ones(c.shape[0])
    newton = cfg.newton_eligible(*Cn.shape) and np.all(r > 0) and np.all(c > 0)
    best, best_violation = None, np.inf
    for it in range(1, cfg.max_iterations + 1):
        u = r / (K @ v)
        v = c / (K.T @ u)
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise InstabilityError(f"non-finite scaling vectors at iteration {it}")
        plan = u[:, None] * K * v[None, :]
        violation = _violation(plan, r, c)
        if violation < best_violation:
            best_violation, best = violation, (plan, it, u, v)
        if violation <= cfg.tolerance:
            break
        if it == cfg.newton_after and newton:
            with np.errstate(divide="ignore"):
                f, g = np.log(u), np.log(v)
            plan, f, g, steps, violation = _newton(-Cn / cfg.epsilon, f, g, r, c, cfg.tolerance, cfg.max_iterations - it)
            it += steps
            if violation <= cfg.tolerance or violation < best_violation:
                return _kernel_result(plan, it, violation, cfg, lo, span, f, g)
            break
    plan, it, u, v = best
    with np.errstate(divide="ignore"):
        f, g = np.log(u), np.log(v)
    if best_violation <= cfg.tolerance:
        return TransportPlan(plan, it, best_violation, True, lo, span, f, g)
    diag = TransportPlan(plan, it, best_violation, False, lo, span, f, g)
    raise ConvergenceError(
        f"sinkhorn did not reach tolerance {cfg.tolerance:g} in {cfg.max_iterations} "
        f"iterations (best violation {best_violation:.3g} at iteration {it})",
        best=diag,
    )


def _kernel_result(plan, it, violation, cfg, lo, span, f, g) -> TransportPlan:
    if violation <= cfg.tolerance:
        return TransportPlan(plan, it, violation, True, lo, span, f, g)
    raise ConvergenceError(
        f"sinkhorn did not reach tolerance {cfg.tolerance:g} in {cfg.max_iterations} "
        f"iterations (best violation {violation:.3g} at iteration {it})",
        best=TransportPlan(plan, it, violation, False, lo, span, f, g),
    )


def _newton(log_k, f, g, r, c, tol, max_steps):
    """Damped Newton ascent on the entropic dual from potentials ``(f, g)``.

    The dual ``<f, r> + <g, c> - sum exp(log_k + f + g)`` is concave; its
    negative Hessian is ``[[diag(P1), P], [P', diag(P'1)]]``, singular only
    along the gauge direction ``(1, -1)``, which the minimum-norm solve
    ignores.  Returns ``(plan, f, g, steps, violation)``.
    """
    n = log_k.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        plan = np.exp(log_k + f[:, None] + g[None, :])
        for step in range(max_steps + 1):
            a, b = plan.sum(axis=1), plan.sum(axis=0)
            violation = max(float(abs(a - r).max()), float(abs(b - c).max()))
            if violation <= tol or step == max_steps:
                return plan, f, g, step, violation
            hess = np.block([[np.diag(a), plan], [plan.T, np.diag(b)]])
            grad = np.concatenate([r - a, c - b])
            d = np.linalg.lstsq(hess, grad, rcond=None)[0]
            base = f @ r + g @ c - plan.sum()
            slope = grad @ d
            t = 1.0
            while True:
                f2, g2 = f + t * d[:n], g + t * d[n:]
                trial = np.exp(log_k + f2[:, None] + g2[None, :])
                if np.all(np.isfinite(trial)):
                    v2 = max(float(abs(trial.sum(axis=1) - r).max()), float(abs(trial.sum(axis=0) - c).max()))
                    # Armijo on the dual, or plain progress on the residual once
                    # dual differences drop below rounding
                    if f2 @ r + g2 @ c - trial.sum() >= base + 1e-4 * t * slope or v2 < violation:
                        break
                t *= 0.5
                if t < 1e-12:
                    return plan, f, g, step, violation
            f, g, plan = f2, g2, trial


def transport_cost(plan, cost) -> float:
    """Frobenius product ``sum_ij plan_ij * cost_ij``."""
    P = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    C = np.asarray(cost, dtype=np.float64)
    if P.shape != C.shape:
        raise ShapeError(f"plan shape {P.shape} != cost shape {C.shape}")
    return float(np.sum(P * C))


def row_normalize(plan) -> np.ndarray:
    P = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    sums = P.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        bad = np.flatnonzero(sums.ravel() <= 0)
        raise DegeneratePlanError(f"rows with zero mass: {bad.tolist()}")
    return P / sums
