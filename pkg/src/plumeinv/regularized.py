"""Regularized least-squares inversion: BFGS and particle swarm solvers.

The objective is ``||M S - c||^2 + lambda R(S)`` with either the negated
entropy ``R = sum p ln p``, ``p = S / s_max``, or zeroth-order Tikhonov
``R = ||S||^2``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, SolverError, ValidationError
from .source_receptor import EmissionVector, ObservationVector, TransitionMatrix

MAX_ENTROPY = "max-entropy"
TIKHONOV0 = "tikhonov0"
REGULARIZERS = (MAX_ENTROPY, TIKHONOV0)
EPSILON = 1e-9


@dataclass(frozen=True)
class InverseObjective:
    M: np.ndarray
    c_obs: np.ndarray
    lam: float = 0.0
    regularizer: str = MAX_ENTROPY
    s_max: float = 30.0

    def __post_init__(self):
        M = self.M.entries if isinstance(self.M, TransitionMatrix) else self.M
        c = self.c_obs.concentrations if isinstance(self.c_obs, ObservationVector) else self.c_obs
        M = np.atleast_2d(np.asarray(M, dtype=float))
        c = np.asarray(c, dtype=float).reshape(-1)
        if M.shape[0] != c.size:
            raise ValidationError(f"{M.shape} matrix does not match {c.size} observations")
        if not self.lam >= 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if not self.s_max > 0:
            raise ValidationError(f"s_max must be > 0, got {self.s_max}")
        if self.regularizer not in REGULARIZERS:
            raise ValidationError(f"unknown regularizer {self.regularizer!r}; choose from {REGULARIZERS}")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "c_obs", c)

    @property
    def n(self) -> int:
        return self.M.shape[1]

    def with_lambda(self, lam: float) -> "InverseObjective":
        return dataclasses.replace(self, lam=float(lam))

    def misfit(self, S) -> float:
        r = self.M @ np.asarray(S, dtype=float) - self.c_obs
        return float(r @ r)

    def regularization(self, S) -> float:
        S = np.asarray(S, dtype=float)
        if self.regularizer == TIKHONOV0:
            return float(S @ S)
        if np.any(S <= 0):
            raise DomainError("entropy regularization needs strictly positive emission rates")
        p = S / self.s_max
        return float(np.sum(p * np.log(p)))

    def values(self, S_batch) -> np.ndarray:
        """Objective for each row of ``S_batch`` (no gradient)."""
        S = np.atleast_2d(np.asarray(S_batch, dtype=float))
        r = S @ self.M.T - self.c_obs
        value = np.einsum("ij,ij->i", r, r)
        if self.lam:
            if self.regularizer == TIKHONOV0:
                value = value + self.lam * np.einsum("ij,ij->i", S, S)
            else:
                if np.any(S <= 0):
                    raise DomainError("entropy regularization needs strictly positive emission rates")
                p = S / self.s_max
                value = value + self.lam * np.sum(p * np.log(p), axis=1)
        return value


def objective_eval(obj: InverseObjective, S) -> tuple[float, np.ndarray]:
    """Objective value and analytic gradient at ``S``."""
    S = np.asarray(S.rates if isinstance(S, EmissionVector) else S, dtype=float)
    r = obj.M @ S - obj.c_obs
    value = float(r @ r)
    grad = 2.0 * (obj.M.T @ r)
    if obj.regularizer == TIKHONOV0:
        value += obj.lam * float(S @ S)
        grad = grad + 2.0 * obj.lam * S
    else:
        if np.any(S <= 0):
            raise DomainError("entropy regularization needs strictly positive emission rates")
        p = S / obj.s_max
        logp = np.log(p)
        value += obj.lam * float(np.sum(p * logp))
        grad = grad + obj.lam * (logp + 1.0) / obj.s_max
    return value, grad


@dataclass
class SolverDiagnostics:
    iterations: int
    value: float
    misfit: float
    regularizer: float
    converged: bool
    message: str
    grad_norm: float = math.nan
    evaluations: int = 0
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def _record(obj, it, S):
    return (it, obj.misfit(S) + obj.lam * obj.regularization(S), obj.misfit(S), obj.regularization(S))


@dataclass(frozen=True)
class QnConfig:
    max_iterations: int = 500
    gtol: float = 1e-8
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60
    initial_guess: float = 15.0
    max_log_step: float = 1.0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValidationError("max_iterations must be >= 0")
        if not (self.gtol > 0 and 0 < self.c1 < 1 and 0 < self.shrink < 1 and self.max_log_step > 0):
            raise ValidationError("gtol > 0, 0 < c1 < 1, 0 < shrink < 1 and max_log_step > 0 are required")


def quasi_newton_solve(obj: InverseObjective, config: QnConfig = QnConfig(), x0=None
                       ) -> tuple[EmissionVector, SolverDiagnostics]:
    """BFGS with Armijo backtracking on ``y = ln S``.

    Stops when the gradient with respect to ``y`` has norm below
    ``config.gtol``, when no step along the search direction lowers the
    objective (the precision floor), or after ``max_iterations``. Trial steps
    are capped at ``max_log_step`` per component so that one long step cannot
    push a rate towards zero, where the gradient in ``y`` vanishes spuriously.
    """
    S = np.full(obj.n, config.initial_guess) if x0 is None else np.asarray(x0, dtype=float).copy()
    if np.any(S <= 0):
        raise DomainError("the log-transformed search needs a strictly positive start")
    y = np.log(S)

    def fg(y):
        S = np.exp(y)
        with np.errstate(over="ignore", invalid="ignore"):
            f, gS = objective_eval(obj, S)
        return f, gS * S

    f, g = fg(y)
    evals = 1
    if not math.isfinite(f):
        raise SolverError("objective is not finite at the initial guess", last_iterate=np.exp(y))
    H = np.eye(obj.n)
    history = [_record(obj, 0, np.exp(y))]
    message = "maximum iterations reached"
    converged = False
    it = 0
    while True:
        if float(np.linalg.norm(g)) < config.gtol:
            converged, message = True, "gradient tolerance reached"
            break
        if it >= config.max_iterations:
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            H = np.eye(obj.n)
            p = -g
            slope = -float(g @ g)
        # no component may change by more than a factor exp(max_log_step)
        step = min(1.0, config.max_log_step / float(np.max(np.abs(p))))
        accepted = False
        any_finite = False
        for _ in range(config.max_backtracks):
            y_new = y + step * p
            f_new, g_new = fg(y_new)
            evals += 1
            if math.isfinite(f_new) and np.all(np.isfinite(g_new)):
                any_finite = True
                if f_new <= f + config.c1 * step * slope:
                    accepted = True
                    break
            step *= config.shrink
        if not accepted:
            if not any_finite:
                raise SolverError("objective became non-finite along the search direction",
                                  last_iterate=np.exp(y))
            message = "line search found no decrease (precision floor)"
            break
        it += 1
        s, dg = y_new - y, g_new - g
        sy = float(s @ dg)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(dg)):
            if it == 1:
                H = (sy / float(dg @ dg)) * np.eye(obj.n)
            rho = 1.0 / sy
            Hy = H @ dg
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(dg @ Hy) + rho) * np.outer(s, s)
        y, f, g = y_new, f_new, g_new
        history.append(_record(obj, it, np.exp(y)))
    S = np.exp(y)
    diag = SolverDiagnostics(
        iterations=it, value=f, misfit=obj.misfit(S), regularizer=obj.regularization(S),
        converged=converged, message=message, grad_norm=float(np.linalg.norm(g)),
        evaluations=evals, history=history,
    )
    return EmissionVector(S), diag


@dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 40
    w: float = 0.729
    c1: float = 1.494
    c2: float = 1.494
    max_iterations: int = 1000
    bounds: tuple = (0.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        if self.swarm_size < 2:
            raise ValidationError("swarm_size must be >= 2")
        if self.max_iterations < 0:
            raise ValidationError("max_iterations must be >= 0")
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        if np.any(lo >= hi):
            raise ValidationError(f"bounds need min < max, got {self.bounds}")


def pso_minimize(func: Callable[[np.ndarray], np.ndarray], lower, upper, config: PsoConfig = PsoConfig(),
                 n_dim: int | None = None) -> tuple[np.ndarray, float, SolverDiagnostics]:
    """Global-best particle swarm over a box.

    ``func`` maps a ``(swarm, n_dim)`` array to one value per row. Positions
    are clamped to the box and velocities to its width. All random draws come
    from one generator seeded by ``config.seed``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if n_dim is not None:
        lower = np.broadcast_to(lower, (n_dim,))
        upper = np.broadcast_to(upper, (n_dim,))
    if np.any(lower >= upper):
        raise ValidationError("bounds need min < max")
    dim = lower.size
    rng = np.random.default_rng(config.seed)
    span = upper - lower
    x = lower + span * rng.random((config.swarm_size, dim))
    v = np.zeros_like(x)
    fx = np.asarray(func(x), dtype=float)
    pbest, fpbest = x.copy(), fx.copy()
    g = int(np.argmin(fpbest))
    gbest, fgbest = pbest[g].copy(), float(fpbest[g])
    history = [(0, fgbest)]
    evals = config.swarm_size
    for it in range(1, config.max_iterations + 1):
        r1 = rng.random(x.shape)
        r2 = rng.random(x.shape)
        v = config.w * v + config.c1 * r1 * (pbest - x) + config.c2 * r2 * (gbest - x)
        np.clip(v, -span, span, out=v)
        x = np.clip(x + v, lower, upper)
        fx = np.asarray(func(x), dtype=float)
        evals += config.swarm_size
        better = fx < fpbest
        pbest[better] = x[better]
        fpbest[better] = fx[better]
        g = int(np.argmin(fpbest))
        if fpbest[g] < fgbest:
            gbest, fgbest = pbest[g].copy(), float(fpbest[g])
        history.append((it, fgbest))
    diag = SolverDiagnostics(
        iterations=config.max_iterations, value=fgbest, misfit=math.nan, regularizer=math.nan,
        converged=False, message="iteration budget exhausted", evaluations=evals,
        history=[(i, f, math.nan, math.nan) for i, f in history],
    )
    return gbest, fgbest, diag


def pso_solve(obj: InverseObjective, config: PsoConfig = PsoConfig()) -> tuple[EmissionVector, SolverDiagnostics]:
    """Minimize the inverse objective with PSO inside ``config.bounds``.

    The lower bound is raised to a tiny positive floor so every estimate is
    strictly positive and the entropy term stays defined.
    """
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (obj.n,)) for b in config.bounds)
    lo = np.maximum(lo, EPSILON)
    best, _, diag = pso_minimize(obj.values, lo, hi, config)
    diag.misfit = obj.misfit(best)
    diag.regularizer = obj.regularization(best)
    diag.history = [(i, f, math.nan, math.nan) for i, f, _, _ in diag.history]
    diag.history[-1] = (diag.history[-1][0], diag.value, diag.misfit, diag.regularizer)
    return EmissionVector(best), diag


def default_lambda_grid() -> np.ndarray:
    return np.logspace(-6, 12, 73)


def select_lambda(obj: InverseObjective, sigma: float, c_obs=None, grid: Sequence[float] | None = None,
                  config: QnConfig = QnConfig()) -> float:
    """Discrepancy principle over a logarithmic grid.

    Returns the grid value whose quasi-Newton solution has misfit closest
    (in log ratio) to ``(sigma ||c_obs||)^2``; ``1e-6`` for noiseless data.
    """
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return 1e-6
    if c_obs is not None:
        obj = dataclasses.replace(obj, c_obs=c_obs.concentrations if isinstance(c_obs, ObservationVector) else c_obs)
    grid = default_lambda_grid() if grid is None else np.asarray(list(grid), dtype=float)
    if grid.size == 1:
        return float(grid[0])
    target = (sigma * float(np.linalg.norm(obj.c_obs))) ** 2
    best, best_gap = float(grid[0]), math.inf
    for lam in grid:
        S, _ = quasi_newton_solve(obj.with_lambda(lam), config)
        misfit = max(obj.misfit(S.rates), 1e-300)
        gap = abs(math.log(misfit / target)) if target > 0 else misfit
        if gap < best_gap:
            best, best_gap = float(lam), gap
    return best


def write_diagnostics(diag: SolverDiagnostics, fh, header: Sequence[str] = ()) -> None:
    for line in header:
        fh.write(f"# {line}\n")
    fh.write(f"# converged: {diag.converged}\n# message: {diag.message}\n")
    fh.write("iteration,objective,misfit,regularizer\n")
    for it, value, misfit, reg in diag.history:
        fh.write(f"{it},{value!r},{misfit!r},{reg!r}\n")
