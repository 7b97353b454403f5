"""Objective zoo: quadratics, synthetic logistic ERM, and the mollified
constrained counterexample, plus landscape property checkers.

Problems are immutable after construction and safe to share across
workers. Construction of a logistic problem calibrates its reference
minimum and gradient-dominance constant once, single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import minimize_scalar
from scipy.special import expit

from .errors import ProblemError, QuadratureError
from .streams import DATA, PILOT, Stream

_ZERO_EIGENVALUE = 1e-12  # spectrum entries below this count as exactly zero


class Problem:
    """A smooth objective with gradient dominance.

    Attributes:
        kind: "quadratic" or "logistic".
        d: dimension.
        f_star: minimum value (exact for quadratics, calibrated for logistic).
        L: smoothness constant of every component (and hence of f).
        mu: gradient-dominance constant; mu <= L always.
        x0: default start point for runs.
        n: number of finite-sum components, or None.
        rho: certified Lipschitz constant of each component over the
            iterate ball (finite-sum problems only).
        M: certified range bound of each component over the iterate ball.
        ball_radius: radius of the certified iterate ball around x0.
    """

    kind = "abstract"
    n: Optional[int] = None
    rho: Optional[float] = None
    M: Optional[float] = None
    ball_radius: Optional[float] = None

    # --- scalar/vector interface -------------------------------------
    def eval_one(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad_one(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eval_many(self, X: np.ndarray) -> np.ndarray:
        """Objective at each row of X."""
        raise NotImplementedError

    def grad_many(self, X: np.ndarray) -> np.ndarray:
        """Gradient at each row of X, stacked row-wise."""
        raise NotImplementedError

    def gap_many(self, X: np.ndarray) -> np.ndarray:
        return np.maximum(self.eval_many(X) - self.f_star, 0.0)

    # --- finite-sum interface (overridden where applicable) ----------
    def batch_grad(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise ProblemError(f"{self.kind} problem has no finite-sum structure")

    def component_losses(self, x: np.ndarray) -> np.ndarray:
        raise ProblemError(f"{self.kind} problem has no finite-sum structure")

    def minimizer_projection(self, X: np.ndarray) -> Optional[np.ndarray]:
        """Projection of each row onto the minimizer set, when analytic."""
        return None


class QuadraticProblem(Problem):
    """f(x) = 0.5 (x-x*)^T diag(spectrum) (x-x*); dominance constant is the
    smallest nonzero eigenvalue, so a singular spectrum stays in scope."""

    kind = "quadratic"

    def __init__(self, spectrum: np.ndarray, x_star: np.ndarray, x0_offset: float = 1.0):
        spectrum = np.asarray(spectrum, dtype=float)
        x_star = np.asarray(x_star, dtype=float)
        if spectrum.ndim != 1 or spectrum.size == 0:
            raise ProblemError("spectrum must be a nonempty 1-D array")
        if np.any(spectrum < 0) or not np.all(np.isfinite(spectrum)):
            raise ProblemError("spectrum entries must be finite and nonnegative")
        live = spectrum > _ZERO_EIGENVALUE
        if not live.any():
            raise ProblemError("all-zero spectrum: objective has no curvature")
        if x_star.shape != spectrum.shape:
            raise ProblemError("x_star must match the spectrum dimension")
        self.spectrum = spectrum
        self.x_star = x_star
        self._live = live
        self.d = spectrum.size
        self.L = float(spectrum.max())
        self.mu = float(spectrum[live].min())
        self.f_star = 0.0
        # default start: unit-norm offset spread over all coordinates
        self.x0 = x_star + x0_offset * np.ones(self.d) / math.sqrt(self.d)

    # scalar paths delegate to the vectorized ones so a standalone run and
    # an ensemble row see bit-identical arithmetic
    def eval_one(self, x):
        return float(self.eval_many(np.asarray(x, dtype=float)[None, :])[0])

    def grad_one(self, x):
        return self.grad_many(np.asarray(x, dtype=float)[None, :])[0]

    def eval_many(self, X):
        U = np.asarray(X, dtype=float) - self.x_star
        return 0.5 * (U * U) @ self.spectrum

    def grad_many(self, X):
        return (np.asarray(X, dtype=float) - self.x_star) * self.spectrum

    def minimizer_projection(self, X):
        P = np.array(X, dtype=float, copy=True)
        P[:, self._live] = self.x_star[self._live]
        return P


class LogisticProblem(Problem):
    """Finite-sum logistic ERM with unit-sphere features.

    Components are f_i(x) = log(1 + exp(-y_i <a_i, x>)) + lam/2 ||x||^2,
    so the objective is their mean and every component is L-smooth with
    L = max_i ||a_i||^2 / 4 + lam.
    """

    kind = "logistic"

    def __init__(self, features, labels, lam, *, pilot_seed=0,
                 pilot_points=50_000, f_star=None, pilot_stream=None):
        A = np.asarray(features, dtype=float)
        y = np.asarray(labels, dtype=float)
        if A.ndim != 2 or A.shape[0] < 2:
            raise ProblemError("need at least 2 samples")
        if y.shape != (A.shape[0],) or not np.all(np.abs(y) == 1.0):
            raise ProblemError("labels must be +/-1 per sample")
        if lam < 0:
            raise ProblemError("regularizer must be nonnegative")
        self.features = A
        self.labels = y
        self.lam = float(lam)
        self.n, self.d = A.shape
        self.L = float(0.25 * (np.linalg.norm(A, axis=1) ** 2).max() + lam)
        self.x0 = np.zeros(self.d)

        # with lam = 0 the minimum is not attained (separable data), so the
        # short descent only anchors the iterate ball
        x_ref, converged = self._calibrate(max_iter=100_000 if lam > 0 else 2_000)
        if f_star is not None:
            self.f_star = float(f_star)
        elif converged:
            self.f_star = self.eval_one(x_ref)
        elif lam == 0.0:
            self.f_star = 0.0
        else:
            raise ProblemError("reference-minimum calibration did not converge")
        self.x_ref = x_ref

        self.ball_radius = 2.0 * (float(np.linalg.norm(x_ref - self.x0)) + 1.0)
        bx = float(np.linalg.norm(self.x0)) + self.ball_radius  # max ||x|| on the ball
        amax = float(np.linalg.norm(A, axis=1).max())
        self.rho = amax + self.lam * bx
        self.M = float(np.logaddexp(0.0, amax * bx) + 0.5 * self.lam * bx * bx)

        if pilot_stream is None:
            pilot_stream = Stream(pilot_seed).substream(PILOT)
        self.mu = self._estimate_mu(pilot_stream, pilot_points)

    def _calibrate(self, tol=1e-12, max_iter=100_000):
        """Plain gradient descent at step 1/L down to tiny gradient norm."""
        x = self.x0.copy()
        for _ in range(max_iter):
            g = self.grad_one(x)
            if np.linalg.norm(g) <= tol:
                return x, True
            x -= g / self.L
        return x, bool(np.linalg.norm(self.grad_one(x)) <= tol)

    def _estimate_mu(self, pilot_stream, pilot_points):
        """0.9 x the smallest dominance ratio seen on a dense pilot sample
        inside the certified iterate ball."""
        P = sample_ball(self.x0, self.ball_radius, pilot_points, self.d,
                        pilot_stream)
        gaps = self.eval_many(P) - self.f_star
        G = self.grad_many(P)
        keep = gaps > 1e-12
        if not keep.any():
            return self.L
        ratios = np.einsum("ij,ij->i", G, G)[keep] / (2.0 * gaps[keep])
        return float(min(0.9 * ratios.min(), self.L))

    def _margins(self, X):
        return (np.asarray(X, dtype=float) @ self.features.T) * self.labels

    def eval_one(self, x):
        return float(self.eval_many(np.asarray(x, dtype=float)[None, :])[0])

    def grad_one(self, x):
        return self.grad_many(np.asarray(x, dtype=float)[None, :])[0]

    def eval_many(self, X):
        X = np.asarray(X, dtype=float)
        Z = self._margins(X)
        reg = 0.5 * self.lam * np.einsum("ij,ij->i", X, X)
        return np.logaddexp(0.0, -Z).mean(axis=1) + reg

    def grad_many(self, X):
        X = np.asarray(X, dtype=float)
        S = expit(-self._margins(X))
        return -(S * self.labels) @ self.features / self.n + self.lam * X

    def batch_grad(self, x, idx):
        x = np.asarray(x, dtype=float)
        A = self.features[idx]
        yb = self.labels[idx]
        s = expit(-yb * (A @ x))
        return -(A.T @ (s * yb)) / len(idx) + self.lam * x

    def component_losses(self, x):
        x = np.asarray(x, dtype=float)
        z = self.labels * (self.features @ x)
        return np.logaddexp(0.0, -z) + 0.5 * self.lam * (x @ x)

    def losses_on(self, x, features, labels):
        """Per-sample losses of x on external data (held-out evaluation)."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(labels, dtype=float) * (np.asarray(features, dtype=float) @ x)
        return np.logaddexp(0.0, -z) + 0.5 * self.lam * (x @ x)


def sample_ball(center, radius, count, d, stream: Stream) -> np.ndarray:
    """Uniform sample inside the ball of `radius` around `center`."""
    rng = stream.generator()
    P = rng.standard_normal((count, d))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    P *= radius * rng.random((count, 1)) ** (1.0 / d)
    return center + P


def make_quadratic(d, spectrum, x_star=None, x0_offset=1.0) -> QuadraticProblem:
    """Diagonal quadratic with the given spectrum; minimum value zero."""
    spectrum = np.asarray(spectrum, dtype=float)
    if spectrum.shape != (d,):
        raise ProblemError(f"spectrum must have length d={d}")
    if x_star is None:
        x_star = np.zeros(d)
    return QuadraticProblem(spectrum, x_star, x0_offset)


def planted_dataset(n, d, data_seed, label_noise=0.0):
    """Unit-sphere features with labels from a planted linear model."""
    rng = Stream(data_seed).substream(DATA).generator()
    A = rng.standard_normal((n, d))
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    w = rng.standard_normal(d)
    w *= 2.0 / np.linalg.norm(w)
    y = np.sign(A @ w)
    y[y == 0] = 1.0
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        y[flip] = -y[flip]
    return A, y


def make_logistic(n, d, data_seed, lambda_r=0.0, *, label_noise=0.0,
                  pilot_points=50_000) -> LogisticProblem:
    """Synthetic logistic ERM; see LogisticProblem for the component form.

    With lambda_r = 0 the planted data must stay separable (no label
    noise), in which case the infimum 0 is recorded as the minimum.
    """
    if n < 2:
        raise ProblemError("need n >= 2 samples")
    if d < 1:
        raise ProblemError("need d >= 1")
    if lambda_r < 0:
        raise ProblemError("lambda_r must be nonnegative")
    if lambda_r == 0.0 and label_noise > 0.0:
        raise ProblemError("label noise without regularization: minimum may not be attained")
    A, y = planted_dataset(n, d, data_seed, label_noise)
    return LogisticProblem(A, y, lambda_r, pilot_seed=data_seed,
                           pilot_points=pilot_points)


# ---------------------------------------------------------------------------
# landscape checks


@dataclass
class LandscapeReport:
    n_points: int
    pl_ratio_min: float
    pl_ratio_max: float
    smooth_ratio_max: float
    qg_ratio_max: Optional[float]  # ||x-P(x)||^2 / ((2/mu) gap); None if no projection
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_landscape(p: Problem, n_points: int, radius: float, seed: int) -> LandscapeReport:
    """Sample the landscape and report dominance/smoothness/growth ratios.

    Report-only: violations beyond 1e-9 relative tolerance are listed,
    never raised.
    """
    if n_points < 1:
        raise ProblemError("need n_points >= 1")
    center = getattr(p, "x_ref", None)
    if center is None:
        center = getattr(p, "x_star", p.x0)
    X = sample_ball(center, radius, n_points, p.d, Stream(seed).substream(PILOT, 1))
    fv = p.eval_many(X)
    gaps = fv - p.f_star
    G = p.grad_many(X)
    gn2 = np.einsum("ij,ij->i", G, G)
    tol = 1e-9

    violations = []
    lower = 2.0 * p.mu * gaps * (1.0 - tol) - tol * (1.0 + np.abs(fv))
    upper = 2.0 * p.L * gaps * (1.0 + tol) + tol * (1.0 + np.abs(fv))
    bad_lo = np.nonzero(gn2 < lower)[0]
    bad_hi = np.nonzero(gn2 > upper)[0]
    for i in bad_lo[:20]:
        violations.append(("pl-lower", int(i), float(gn2[i]), float(2 * p.mu * gaps[i])))
    for i in bad_hi[:20]:
        violations.append(("smooth-upper", int(i), float(gn2[i]), float(2 * p.L * gaps[i])))

    keep = gaps > 1e-12
    if keep.any():
        ratios = gn2[keep] / (2.0 * gaps[keep])
        pl_min, pl_max = float(ratios.min()), float(ratios.max())
    else:
        pl_min = pl_max = float(p.mu)

    # pairwise gradient Lipschitz ratio on consecutive sample pairs
    if n_points >= 2:
        DX = X[1:] - X[:-1]
        DG = G[1:] - G[:-1]
        dn = np.linalg.norm(DX, axis=1)
        ok = dn > 1e-12
        sm = np.linalg.norm(DG[ok], axis=1) / dn[ok]
        smooth_max = float(sm.max()) if ok.any() else 0.0
        for i in np.nonzero(sm > p.L * (1.0 + tol) + tol)[0][:20]:
            violations.append(("lipschitz", int(i), float(sm[i]), p.L))
    else:
        smooth_max = 0.0

    qg_max = None
    proj = p.minimizer_projection(X)
    if proj is not None:
        dist2 = np.einsum("ij,ij->i", X - proj, X - proj)
        bound = (2.0 / p.mu) * gaps
        ok = bound > 1e-12
        if ok.any():
            qg = dist2[ok] / bound[ok]
            qg_max = float(qg.max())
            for i in np.nonzero(qg > 1.0 + tol)[0][:20]:
                violations.append(("quadratic-growth", int(i), float(qg[i]), 1.0))
        else:
            qg_max = 0.0

    return LandscapeReport(n_points, pl_min, pl_max, smooth_max, qg_max, violations)


# ---------------------------------------------------------------------------
# mollified counterexample


@dataclass(frozen=True)
class CounterexampleSpec:
    """Parameters of the piecewise objective (a x_+^2 - b (|y|-c)_+)_+,
    its mollification radius, quadrature order, and constraint ball."""

    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d0: float = 2.0
    epsilon: float = 0.25
    q: int = 32
    radius: Optional[float] = None  # defaults to dist((d0,0), flat set) - 1e-6

    def __post_init__(self):
        for name in ("a", "b", "d0", "epsilon"):
            if getattr(self, name) <= 0:
                raise ProblemError(f"{name} must be positive")
        if self.c < 0:
            raise ProblemError("c must be nonnegative")
        if not self.epsilon < self.c:
            raise ProblemError("mollification radius must satisfy epsilon < c")
        if self.q < 8:
            raise ProblemError("quadrature order must be at least 8")
        if self.radius is None:
            object.__setattr__(self, "radius", flat_set_distance(self) - 1e-6)
        if self.radius <= 0:
            raise ProblemError("constraint radius must be positive")

    @property
    def start(self) -> np.ndarray:
        return np.array([self.d0, 0.0])


def raw_value(spec: CounterexampleSpec, x, y):
    """The unmollified objective, vectorized over x, y arrays."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inner = spec.a * np.maximum(x, 0.0) ** 2 - spec.b * np.maximum(np.abs(y) - spec.c, 0.0)
    return np.maximum(inner, 0.0)


def flat_set_distance(spec: CounterexampleSpec) -> float:
    """Distance from the start point (d0, 0) to the zero set
    {x <= 0 or |y| >= (a/b) x^2 + c}."""
    d0, a_b, c = spec.d0, spec.a / spec.b, spec.c

    def sq_dist_to_curve(x):
        return (x - d0) ** 2 + (a_b * x * x + c) ** 2

    res = minimize_scalar(sq_dist_to_curve, bounds=(0.0, d0), method="bounded",
                          options={"xatol": 1e-12})
    return float(min(d0, math.sqrt(res.fun)))


class _MollifierGrid:
    """Tensor Gauss-Legendre nodes on [-1,1]^2 with bump weights baked in.

    The quadrature is self-normalized: the bump mass is estimated with the
    same nodes, so constants mollify to themselves exactly.
    """

    def __init__(self, q: int):
        x, w = leggauss(q)
        u1, u2 = np.meshgrid(x, x, indexing="ij")
        self.u1 = u1.ravel()
        self.u2 = u2.ravel()
        ww = np.outer(w, w).ravel()
        r2 = self.u1**2 + self.u2**2
        inside = r2 < 1.0
        bump = np.zeros_like(r2)
        bump[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
        coef = np.zeros_like(r2)
        coef[inside] = -2.0 * bump[inside] / (1.0 - r2[inside]) ** 2
        self.wb = ww * bump
        self.wg1 = ww * coef * self.u1
        self.wg2 = ww * coef * self.u2
        self.mass = float(self.wb.sum())

    def value(self, spec, px, py):
        fv = raw_value(spec, px - spec.epsilon * self.u1, py - spec.epsilon * self.u2)
        return float(self.wb @ fv / self.mass)

    def grad(self, spec, px, py):
        fv = raw_value(spec, px - spec.epsilon * self.u1, py - spec.epsilon * self.u2)
        # centering by f(p) removes the O(quadrature error) constant mode,
        # since the bump gradient integrates to zero exactly
        fv = fv - raw_value(spec, px, py)
        s = spec.epsilon * self.mass
        return np.array([self.wg1 @ fv / s, self.wg2 @ fv / s])


_GRID_CACHE: dict = {}


def _grid(q: int) -> _MollifierGrid:
    g = _GRID_CACHE.get(q)
    if g is None:
        g = _GRID_CACHE[q] = _MollifierGrid(q)
    return g


def counterexample_eval(spec: CounterexampleSpec, point, *, tol=1e-6,
                        max_order=1024):
    """Mollified value and gradient at `point`, with order escalation.

    Doubles the quadrature order until two consecutive orders agree to
    `tol` in value; raises QuadratureError if max_order is reached first.

    Returns:
        (value, gradient) with gradient a length-2 array.
    """
    px, py = float(point[0]), float(point[1])
    q = spec.q
    v = _grid(q).value(spec, px, py)
    while True:
        q2 = 2 * q
        v2 = _grid(q2).value(spec, px, py)
        if abs(v2 - v) <= tol:
            return v2, _grid(q2).grad(spec, px, py)
        if q2 >= max_order:
            raise QuadratureError(
                f"quadrature not converged at ({px}, {py}): "
                f"|delta|={abs(v2 - v):.2e} at orders {q}/{q2}")
        q, v = q2, v2


def counterexample_grad_fast(spec: CounterexampleSpec, px, py) -> np.ndarray:
    """Gradient at the spec's base order, no accuracy certificate.

    Step loops use this; certified evaluations go through
    counterexample_eval.
    """
    return _grid(spec.q).grad(spec, px, py)


def counterexample_pl_report(spec: CounterexampleSpec, n_points=200, seed=0,
                             box=((-1.0, 2.5), (-1.5, 1.5))):
    """Sampled dominance ratios of the mollified objective (reported, never
    asserted: the nominal constant 2a is not certified)."""
    rng = Stream(seed).substream(PILOT, 7).generator()
    lo = np.array([box[0][0], box[1][0]])
    hi = np.array([box[0][1], box[1][1]])
    pts = lo + (hi - lo) * rng.random((n_points, 2))
    ratios = []
    for px, py in pts:
        g = _grid(spec.q)
        v = g.value(spec, px, py)
        if v <= 1e-9:
            continue
        gx, gy = g.grad(spec, px, py)
        ratios.append((gx * gx + gy * gy) / (2.0 * v))
    ratios = np.asarray(ratios)
    return {
        "nominal": 2.0 * spec.a,
        "ratio_min": float(ratios.min()) if ratios.size else float("nan"),
        "ratio_max": float(ratios.max()) if ratios.size else float("nan"),
        "n_used": int(ratios.size),
    }
