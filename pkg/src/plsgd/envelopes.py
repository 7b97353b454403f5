"""Closed-form bound objects: the stochastic-recursion envelope sequence,
expected-value bounds, and the stability / generalization / true-risk
formulas.

Everything here is a pure deterministic calculator, safe for concurrent
use. The envelope K_t certifies that the optimality gap X_t has
sub-exponential parameter K_t, hence P(X_t >= K_t log(e/delta)) <= delta
for delta in (0, 1/e).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ProblemError
from .optimizer import StepSchedule, schedule_eval

DELTA_MAX = 1.0 / math.e
DEFAULT_DELTAS = (0.1, 0.05, 0.01)


def envelope_next(K_t, alpha, beta_sq, gamma):
    """Minimal K_{t+1} >= 0 with K^2 >= (alpha K_t + 2 gamma) K + beta_sq K_t.

    Works elementwise on arrays. The returned value satisfies the
    constraint with equality.
    """
    K_t = np.asarray(K_t, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta_sq = np.asarray(beta_sq, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    for name, v in (("K_t", K_t), ("alpha", alpha), ("beta_sq", beta_sq), ("gamma", gamma)):
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ProblemError(f"{name} must be finite and nonnegative")
    lin = alpha * K_t + 2.0 * gamma
    out = 0.5 * (lin + np.sqrt(lin * lin + 4.0 * beta_sq * K_t))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RecursionParams:
    """Streams (alpha_t, beta_t^2, gamma_t) for t = 0..T-1 plus K_0."""

    alpha: np.ndarray
    beta_sq: np.ndarray
    gamma: np.ndarray
    K0: float

    def __post_init__(self):
        for name in ("alpha", "beta_sq", "gamma"):
            v = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, v)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ProblemError(f"{name} stream must be finite and nonnegative")
        if self.K0 < 0 or not np.isfinite(self.K0):
            raise ProblemError("K0 must be finite and nonnegative")

    @property
    def T(self) -> int:
        return len(self.alpha)


def k_sequence(params: RecursionParams) -> np.ndarray:
    """Minimal envelope K_0..K_T by iterating envelope_next."""
    K = np.empty(params.T + 1)
    K[0] = params.K0
    k = params.K0
    for t in range(params.T):
        k = envelope_next(k, params.alpha[t], params.beta_sq[t], params.gamma[t])
        K[t + 1] = k
    return K


def expected_bound(params: RecursionParams, X0: float, T: int) -> float:
    """Mean bound (prod alpha) X0 + sum_t (prod_{i>t} alpha_i) gamma_t.

    Computed by the equivalent forward recursion E <- alpha E + gamma,
    which is numerically stable for long horizons; empty products are 1
    and empty sums 0.
    """
    if T < 0:
        raise ProblemError("T must be nonnegative")
    if T > params.T:
        raise ProblemError(f"streams cover {params.T} steps, requested T={T}")
    e = float(X0)
    for t in range(T):
        e = params.alpha[t] * e + params.gamma[t]
    if not np.isfinite(e):
        raise ProblemError("expected bound overflowed")
    return e


@dataclass(frozen=True)
class SGDEnvelopeConfig:
    """Instance data the envelope streams are built from.

    C1 and C2 stand in for the universal constants of the tail
    conditions; both default to 2, which covers Gaussian oracle noise
    for d >= 10 with room to spare.
    """

    L: float
    mu: float
    sigma: float
    b: int
    d: int
    schedule: StepSchedule
    X0: float
    C1: float = 2.0
    C2: float = 2.0

    def __post_init__(self):
        if self.C1 <= 0 or self.C2 <= 0:
            raise ProblemError("C1 and C2 must be positive")
        if self.b < 1 or self.d < 1:
            raise ProblemError("b and d must be positive integers")
        if self.mu <= 0 or self.L < self.mu:
            raise ProblemError("need 0 < mu <= L")
        if self.sigma < 0 or self.X0 < 0:
            raise ProblemError("sigma and X0 must be nonnegative")


def recursion_params(cfg: SGDEnvelopeConfig, T: int) -> RecursionParams:
    """Streams for SGD under smoothness + gradient dominance:

        alpha_t  = 1 - mu eta_t
        beta_t^2 = 2 C1 L sigma^2 eta_t^2 (1 - L eta_t)^2 / (b d)
        gamma_t  = C2 L sigma^2 eta_t^2 / (2 b)
    """
    eta = np.array([schedule_eval(cfg.schedule, t) for t in range(T)])
    if np.any(eta > 1.0 / cfg.L + 1e-12):
        raise ProblemError("envelope streams need eta_t <= 1/L")
    alpha = 1.0 - cfg.mu * eta
    alpha = np.maximum(alpha, 0.0)
    s2 = cfg.sigma**2
    beta_sq = 2.0 * cfg.C1 * cfg.L * s2 * eta**2 * (1.0 - cfg.L * eta) ** 2 / (cfg.b * cfg.d)
    gamma = cfg.C2 * cfg.L * s2 * eta**2 / (2.0 * cfg.b)
    return RecursionParams(alpha, beta_sq, gamma, cfg.X0)


def theta_closed_form(cfg: SGDEnvelopeConfig, t) -> np.ndarray:
    """Non-minimal closed-form envelope for the theta schedule:

        t <= tau:  (1 - mu/L)^t X0 + C2 sigma^2 / (mu b)
        t >  tau:  K_tau tau^2 / t^2
                   + (18 C1 + 4 C2 d) L sigma^2 (t - tau) / (b d mu^2 t^2)

    Dominates the minimal envelope pointwise.
    """
    if cfg.schedule.kind != "theta":
        raise ProblemError("closed form applies to the theta schedule only")
    t = np.asarray(t, dtype=float)
    tau = cfg.schedule.tau
    decay = 1.0 - cfg.mu / cfg.L
    floor = cfg.C2 * cfg.sigma**2 / (cfg.mu * cfg.b)
    early = decay ** np.minimum(t, tau) * cfg.X0 + floor
    k_tau = decay**tau * cfg.X0 + floor
    late_t = np.maximum(t, tau + 1)
    late = (k_tau * tau**2 / late_t**2
            + (18.0 * cfg.C1 + 4.0 * cfg.C2 * cfg.d) * cfg.L * cfg.sigma**2
            * (late_t - tau) / (cfg.b * cfg.d * cfg.mu**2 * late_t**2))
    out = np.where(t <= tau, early, late)
    return out if out.ndim else float(out)


def theta_closed_form_expected(cfg: SGDEnvelopeConfig, t) -> np.ndarray:
    """Closed-form mean bound for the theta schedule (the tighter
    companion of theta_closed_form, with 2 C2 in place of 18C1 + 4C2 d)."""
    if cfg.schedule.kind != "theta":
        raise ProblemError("closed form applies to the theta schedule only")
    t = np.asarray(t, dtype=float)
    tau = cfg.schedule.tau
    decay = 1.0 - cfg.mu / cfg.L
    floor = cfg.C2 * cfg.sigma**2 / (cfg.mu * cfg.b)
    early = decay ** np.minimum(t, tau) * cfg.X0 + floor
    k_tau = decay**tau * cfg.X0 + floor
    late_t = np.maximum(t, tau + 1)
    late = (k_tau * tau**2 / late_t**2
            + 2.0 * cfg.C2 * cfg.L * cfg.sigma**2 * (late_t - tau)
            / (cfg.mu**2 * cfg.b * late_t**2))
    out = np.where(t <= tau, early, late)
    return out if out.ndim else float(out)


def slow_tail_bound(cfg: SGDEnvelopeConfig) -> float:
    """Asymptotic coefficient for the slow schedule: K_t (t+1)^{mu c} stays
    below X0 + (16 C1 + 4 C2 d) L sigma^2 c^2 / (b d (1 - mu c))."""
    if cfg.schedule.kind != "slow":
        raise ProblemError("tail bound applies to the slow schedule only")
    c = cfg.schedule.c
    mc = cfg.mu * c
    if mc >= 1.0:
        raise ProblemError("tail bound needs mu c < 1")
    return ((16.0 * cfg.C1 + 4.0 * cfg.C2 * cfg.d) * cfg.L * cfg.sigma**2 * c**2
            / (cfg.b * cfg.d * (1.0 - mc)))


def delta_tag(delta: float) -> str:
    """Column tag for a confidence level, e.g. 0.05 -> 'd05'."""
    pct = 100.0 * delta
    if abs(pct - round(pct)) < 1e-9:
        return f"d{int(round(pct)):02d}"
    return "d" + f"{pct:g}".replace(".", "p")


@dataclass
class BoundReport:
    """Per-step envelope tables for one instance."""

    t: np.ndarray                      # 0..T
    K: np.ndarray                      # minimal envelope
    deltas: tuple
    envelopes: dict                    # delta -> K * log(e/delta)
    expected: np.ndarray               # mean bound per step
    closed_form: Optional[np.ndarray]  # theta schedule only
    params: RecursionParams = field(repr=False, default=None)

    def csv_rows(self):
        for i, t in enumerate(self.t):
            row = [int(t), self.K[i]]
            row += [self.envelopes[d][i] for d in self.deltas]
            row.append(self.expected[i])
            row.append(None if self.closed_form is None else self.closed_form[i])
            yield tuple(row)

    def csv_header(self):
        cols = ["t", "K_t"]
        cols += [f"env_{delta_tag(d)}" for d in self.deltas]
        cols += ["expected_bound", "closedform_K_t"]
        return cols


def sgd_envelope(cfg: SGDEnvelopeConfig, T: int, deltas=DEFAULT_DELTAS) -> BoundReport:
    """Minimal envelope, per-delta high-probability curves, mean bound, and
    (for the theta schedule) the closed-form companion."""
    deltas = tuple(float(d) for d in deltas)
    for d in deltas:
        if not (0.0 < d < DELTA_MAX):
            raise ProblemError(f"delta={d} outside (0, 1/e)")
    params = recursion_params(cfg, T)
    K = k_sequence(params)
    expected = np.empty(T + 1)
    e = cfg.X0
    expected[0] = e
    for t in range(T):
        e = params.alpha[t] * e + params.gamma[t]
        expected[t + 1] = e
    envelopes = {d: K * math.log(math.e / d) for d in deltas}
    closed = None
    if cfg.schedule.kind == "theta":
        closed = theta_closed_form(cfg, np.arange(T + 1))
    return BoundReport(np.arange(T + 1), K, deltas, envelopes, expected, closed, params)


# ---------------------------------------------------------------------------
# stability, generalization, and the balanced horizon


def stability_bound(rho, T, L, c, b, n) -> float:
    """Expected uniform stability of T steps at eta_t <= c/(t+1):

        alpha <= 2 rho^2 T^{L c} (c + 1/L) b / n
    """
    if n <= 0:
        raise ProblemError("n must be positive")
    if min(rho, T, L, c, b) <= 0:
        raise ProblemError("rho, T, L, c, b must be positive")
    return 2.0 * rho**2 * float(T) ** (L * c) * (c + 1.0 / L) * b / n


def elisseeff_bound(M, n, alpha, delta) -> float:
    """Deviation bound sqrt((6 M n alpha + M^2) / (2 n delta)) for an
    alpha-uniformly-stable randomized algorithm with losses in [0, M]."""
    if not (0.0 < delta < 1.0):
        raise ProblemError("delta must lie in (0, 1)")
    if M < 0 or alpha < 0 or n <= 0:
        raise ProblemError("need M, alpha >= 0 and n > 0")
    return math.sqrt((6.0 * M * n * alpha + M * M) / (2.0 * n * delta))


def generalization_bound(M, rho, T, L, c, b, n, delta) -> float:
    """Gap bound sqrt((12 M rho^2 T^{Lc} (c + 1/L) b + M^2) / (2 n delta)).

    Identical to elisseeff_bound fed with stability_bound; both routes are
    kept and cross-checked in the tests.
    """
    if not (0.0 < delta < 1.0):
        raise ProblemError("delta must lie in (0, 1)")
    if n <= 0:
        raise ProblemError("n must be positive")
    num = 12.0 * M * rho**2 * float(T) ** (L * c) * (c + 1.0 / L) * b + M * M
    return math.sqrt(num / (2.0 * n * delta))


def hprisk_horizon(L, d, sigma, M, rho, mu, b, n, *, theta_const=1.0):
    """Balanced horizon and its step constant:

        c = 1/(mu + L),
        T = ceil(theta_const * L^2 d^2 sigma^4 / (M rho^2 (mu+L)^4 b^2) * n / b)

    with a floor of one step. The order constant is configurable; sweeps
    scale theta_const around 1.
    """
    for name, v in (("L", L), ("d", d), ("sigma", sigma), ("M", M),
                    ("rho", rho), ("mu", mu), ("b", b), ("n", n)):
        if v <= 0:
            raise ProblemError(f"{name} must be positive")
    c = 1.0 / (mu + L)
    raw = (theta_const * L**2 * d**2 * sigma**4
           / (M * rho**2 * (mu + L) ** 4 * b**2) * (n / b))
    return max(1, math.ceil(raw)), c


def risk_product_bound(L, mu, sigma, M, rho, b, n, delta) -> float:
    """Product form of the balanced true-risk bound (order constant 1):

        (L sigma^2 / ((mu+L)^2 b sqrt(delta)))^{L/(mu+L)}
        * (rho sqrt(M b / (n delta)))^{mu/(mu+L)}
    """
    if not (0.0 < delta < 1.0):
        raise ProblemError("delta must lie in (0, 1)")
    conv = L * sigma**2 / ((mu + L) ** 2 * b * math.sqrt(delta))
    gen = rho * math.sqrt(M * b / (n * delta))
    k = L / (mu + L)
    return conv**k * gen ** (1.0 - k)
