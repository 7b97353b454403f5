"""SGD engine with per-step recursion instrumentation, the step-size
schedule family, and projected gradient descent for the constrained
counterexample."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergenceError, NumericError, ProblemError, ScheduleError
from .oracles import GradientOracle, sample_gradient
from .problems import (CounterexampleSpec, counterexample_eval,
                       counterexample_grad_fast)

DIVERGENCE_GAP = 1e12
RECURSION_TOL = 1e-9


@dataclass(frozen=True)
class StepSchedule:
    """One of the four step-size laws.

    theta:     1/L for t < tau, then (2t+1) / (mu (t+1)^2), tau = floor(2L/mu);
               stays <= 1/L for all t.
    slow:      2c / (t+2) with c < 1/L enforced at construction.
    stability: c / (t+1).
    constant:  eta.
    """

    kind: str
    L: Optional[float] = None
    mu: Optional[float] = None
    c: Optional[float] = None
    eta: Optional[float] = None

    def __post_init__(self):
        if self.kind == "theta":
            if not (self.L and self.mu) or self.L <= 0 or self.mu <= 0:
                raise ScheduleError("theta schedule needs positive L and mu")
            if self.mu > self.L * (1 + 1e-12):
                raise ScheduleError("theta schedule needs mu <= L")
        elif self.kind == "slow":
            if self.c is None or self.c <= 0:
                raise ScheduleError("slow schedule needs c > 0")
            if self.L is None or self.L <= 0:
                raise ScheduleError("slow schedule needs L to enforce c < 1/L")
            if self.c >= 1.0 / self.L:
                raise ScheduleError(f"slow schedule needs c < 1/L = {1.0 / self.L:.6g}")
        elif self.kind == "stability":
            if self.c is None or self.c <= 0:
                raise ScheduleError("stability schedule needs c > 0")
        elif self.kind == "constant":
            if self.eta is None or self.eta < 0:
                raise ScheduleError("constant schedule needs eta >= 0")
        else:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")

    @property
    def tau(self) -> int:
        if self.kind != "theta":
            return 0
        return int(2 * self.L / self.mu)

    @classmethod
    def theta_kind(cls, L, mu):
        return cls("theta", L=float(L), mu=float(mu))

    @classmethod
    def slow_kind(cls, c, L):
        return cls("slow", c=float(c), L=float(L))

    @classmethod
    def stability_kind(cls, c):
        return cls("stability", c=float(c))

    @classmethod
    def constant_kind(cls, eta):
        return cls("constant", eta=float(eta))


def schedule_eval(s: StepSchedule, t: int) -> float:
    """Step size at step t >= 0."""
    if t < 0:
        raise ScheduleError("t must be nonnegative")
    if s.kind == "theta":
        if t < s.tau:
            return 1.0 / s.L
        return (2 * t + 1) / (s.mu * (t + 1) ** 2)
    if s.kind == "slow":
        return 2.0 * s.c / (t + 2)
    if s.kind == "stability":
        return s.c / (t + 1)
    return s.eta


def schedule_max_step(s: StepSchedule) -> float:
    return schedule_eval(s, 0)


def step(x: np.ndarray, eta: float, g: np.ndarray) -> np.ndarray:
    """One gradient step x - eta * g."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if eta < 0:
        raise NumericError("eta must be nonnegative")
    if x.shape != g.shape:
        raise NumericError(f"shape mismatch: {x.shape} vs {g.shape}")
    out = x - eta * g
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite iterate")
    return out


@dataclass
class Trajectory:
    """Per-run record.

    gap, grad_norm_sq and radius have length T+1 (values at the iterates);
    eta, inner and err_norm_sq have length T (values of the step applied at
    t). `inner` is <grad f(x_t), e_t> and `err_norm_sq` is ||e_t||^2, which
    is exactly what the per-step recursion needs.
    """

    trial_id: int
    gap: np.ndarray
    grad_norm_sq: np.ndarray
    radius: np.ndarray
    eta: np.ndarray
    inner: np.ndarray
    err_norm_sq: np.ndarray
    x_final: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.eta)

    def csv_rows(self):
        """Rows for the trajectory CSV schema; step fields are blank on the
        final row, which records only the terminal iterate."""
        for t in range(self.T + 1):
            last = t == self.T
            yield (self.trial_id, t, self.gap[t], self.grad_norm_sq[t],
                   None if last else self.eta[t], self.radius[t],
                   None if last else self.inner[t],
                   None if last else self.err_norm_sq[t])


def run_sgd(problem, oracle: GradientOracle, schedule: StepSchedule, T: int,
            trial_id: int = 0, seed: Optional[int] = None, *,
            x0: Optional[np.ndarray] = None,
            enforce_step_bound: bool = True) -> Trajectory:
    """Run one SGD trajectory with full recursion instrumentation.

    Deterministic given (trial_id, seed): repeated executions produce
    identical trajectories, and trial i reproduces row i of a vectorized
    ensemble run on the same seed.
    """
    if T < 1:
        raise ProblemError("need T >= 1")
    if seed is not None:
        oracle = oracle.reseed(seed)
    oracle = oracle.with_trial(trial_id)
    if enforce_step_bound and schedule_max_step(schedule) > 1.0 / problem.L + 1e-12:
        raise ScheduleError(
            "schedule exceeds 1/L; recursion checks need eta_t <= 1/L "
            "(pass enforce_step_bound=False to run anyway)")

    x = np.array(problem.x0 if x0 is None else x0, dtype=float)
    gap = np.empty(T + 1)
    gns = np.empty(T + 1)
    rad = np.empty(T + 1)
    etas = np.empty(T)
    inner = np.empty(T)
    errsq = np.empty(T)
    x_start = x.copy()

    for t in range(T):
        g_full = problem.grad_one(x)
        gap[t] = max(problem.eval_one(x) - problem.f_star, 0.0)
        gns[t] = float(g_full @ g_full)
        rad[t] = float(np.linalg.norm(x - x_start))
        if gap[t] > DIVERGENCE_GAP:
            raise DivergenceError(t, gap[t], (trial_id,))
        eta = schedule_eval(schedule, t)
        g, e = sample_gradient(oracle, problem, x, t)
        etas[t] = eta
        inner[t] = float(g_full @ e)
        errsq[t] = float(e @ e)
        x = step(x, eta, g)

    gap[T] = max(problem.eval_one(x) - problem.f_star, 0.0)
    g_full = problem.grad_one(x)
    gns[T] = float(g_full @ g_full)
    rad[T] = float(np.linalg.norm(x - x_start))
    if gap[T] > DIVERGENCE_GAP:
        raise DivergenceError(T, gap[T], (trial_id,))
    return Trajectory(trial_id, gap, gns, rad, etas, inner, errsq, x,
                      meta={"seed": seed, "schedule": schedule.kind})


def recursion_check(traj: Trajectory, problem, schedule: StepSchedule) -> list:
    """Steps where the smoothness/dominance descent recursion

        X_{t+1} <= (1 - mu eta) X_t + eta (1 - L eta) <grad, e> + (L eta^2 / 2) ||e||^2

    fails beyond tolerance. Expected empty on every valid run; a nonempty
    list indicates an implementation bug, not bad luck.
    """
    if traj.eta.size == 0:
        raise ProblemError("trajectory carries no step instrumentation")
    L, mu = problem.L, problem.mu
    if np.any(traj.eta > 1.0 / L + 1e-12):
        raise ScheduleError("recursion check requires eta_t <= 1/L throughout")
    del schedule  # signature kept symmetric with run_sgd; eta comes from traj
    X = traj.gap
    eta = traj.eta
    rhs = ((1.0 - mu * eta) * X[:-1]
           + eta * (1.0 - L * eta) * traj.inner
           + 0.5 * L * eta**2 * traj.err_norm_sq
           + RECURSION_TOL * (1.0 + X[:-1]))
    return [int(t) for t in np.nonzero(X[1:] > rhs)[0]]


# ---------------------------------------------------------------------------
# projected gradient descent on the mollified counterexample


@dataclass
class ProjectedRun:
    points: np.ndarray       # sampled iterates, shape (k, 2)
    ts: np.ndarray           # steps at which points were sampled
    values: np.ndarray       # certified objective at the sampled iterates
    final_point: np.ndarray
    final_value: float
    projections: int         # steps on which the constraint was active


def project_ball(x: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Exact radial projection onto the closed ball; center maps to itself."""
    d = x - center
    nrm = float(np.linalg.norm(d))
    if nrm <= radius or nrm == 0.0:
        return x
    return center + d * (radius / nrm)


def run_projected_gd(spec: CounterexampleSpec, eta: float, T: int, *,
                     constrained: bool = True, sample_every: int = 100,
                     start: Optional[np.ndarray] = None) -> ProjectedRun:
    """Projected gradient descent on the mollified objective.

    The feasible set is the ball of spec.radius around (d0, 0) (pass
    constrained=False for the free run); iterates start there unless
    `start` overrides. Step loops use the base quadrature order; sampled
    and final values are accuracy-certified.
    """
    if T < 1:
        raise ProblemError("need T >= 1")
    if eta > 1.0 / (2.0 * spec.a) + 1e-12:
        raise ScheduleError("eta must satisfy eta <= 1/(2a) for the nominal curvature")
    center = spec.start
    x = center.copy() if start is None else np.array(start, dtype=float)
    pts, ts, vals = [], [], []
    projections = 0
    for t in range(T):
        if t % sample_every == 0:
            pts.append(x.copy())
            ts.append(t)
            vals.append(counterexample_eval(spec, x)[0])
        g = counterexample_grad_fast(spec, x[0], x[1])
        x = x - eta * g
        if constrained:
            moved = project_ball(x, center, spec.radius)
            if moved is not x:
                projections += 1
            x = moved
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite iterate at t={t}")
    fv = counterexample_eval(spec, x)[0]
    pts.append(x.copy())
    ts.append(T)
    vals.append(fv)
    return ProjectedRun(np.asarray(pts), np.asarray(ts), np.asarray(vals),
                        x, float(fv), projections)
