"""Stochastic gradient sources, minibatch index sampling with coupling
support, and empirical tail-norm estimators.

Oracles are immutable descriptors; every draw is a pure function of
(stream, trial, step), so workers can sample concurrently and an ensemble
row is bit-identical to the corresponding standalone run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import BatchError, ProblemError
from .streams import BATCH, NOISE, Stream, standard_normals, uniform01

MODES = ("additive_gaussian", "additive_bounded", "finite_sum_subsample")


@dataclass(frozen=True)
class GradientOracle:
    """Gradient estimator descriptor.

    `sigma` declares the tail parameter of the single-draw error
    grad f(x) - g(x, 1); additive modes realize it with per-coordinate
    scale sigma / sqrt(d * batch), which makes the batch-b error norm
    satisfy E ||e||^2 = sigma^2 / batch.
    """

    mode: str
    sigma: float
    batch: int
    stream: Stream
    trial: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ProblemError(f"unknown oracle mode {self.mode!r}")
        if self.sigma < 0:
            raise ProblemError("sigma must be nonnegative")
        if self.batch < 1:
            raise BatchError("batch must be a positive integer")

    def with_trial(self, trial: int) -> "GradientOracle":
        return replace(self, trial=int(trial))

    def reseed(self, seed: int) -> "GradientOracle":
        return replace(self, stream=Stream(int(seed)))


def make_oracle(mode, sigma, batch, seed=0) -> GradientOracle:
    return GradientOracle(mode, float(sigma), int(batch), Stream(int(seed)))


def _additive_scale(oracle: GradientOracle, d: int) -> float:
    return oracle.sigma / np.sqrt(d * oracle.batch)


def additive_noise_block(oracle: GradientOracle, d: int, t: int, n_trials: int) -> np.ndarray:
    """Noise rows for trials 0..n_trials-1 at step t (additive modes).

    Row i equals the noise a standalone run with trial id i would draw.
    """
    raws = oracle.stream.substream(NOISE, t).raw_block(n_trials, d)
    return _raws_to_noise(oracle, d, raws)


def _additive_noise_row(oracle: GradientOracle, d: int, t: int) -> np.ndarray:
    raws = oracle.stream.substream(NOISE, t).raw_row(oracle.trial, d)
    return _raws_to_noise(oracle, d, raws)


def _raws_to_noise(oracle, d, raws):
    scale = _additive_scale(oracle, d)
    if oracle.mode == "additive_gaussian":
        return scale * standard_normals(raws)
    # symmetric uniform with matching per-coordinate variance
    half_width = scale * np.sqrt(3.0)
    return half_width * (2.0 * uniform01(raws) - 1.0)


def subset_from_keys(keys: np.ndarray, b: int) -> np.ndarray:
    """The b indices holding the smallest keys: a uniform b-subset when the
    keys are iid (the without-replacement semantics the coupling needs)."""
    n = keys.shape[-1]
    if b >= n:
        full = np.arange(n)
        if keys.ndim == 1:
            return full
        return np.broadcast_to(full, keys.shape[:-1] + (n,)).copy()
    idx = np.argpartition(keys, b - 1)[..., :b]
    return np.sort(idx, axis=-1)


def batch_indices(stream: Stream, t: int, n: int, b: int) -> np.ndarray:
    """Minibatch index set for step t of the given index stream."""
    return subset_from_keys(stream.raw_row(t, n), b)


def batch_indices_block(stream: Stream, t0: int, steps: int, n: int, b: int) -> np.ndarray:
    """(steps, b) index sets for steps t0..t0+steps-1, bit-identical to
    per-step batch_indices calls."""
    keys = stream.raw_block(t0 + steps, n)[t0:]
    return subset_from_keys(keys, b)


def coupled_indices(n, b, i_star, t, stream: Stream):
    """Shared index set for a coupled pair plus whether the differing
    sample was hit. Both runs of a coupled pair call this with the same
    stream, so their index sequences agree as sets at every step."""
    if not (1 <= b <= n):
        raise BatchError(f"need 1 <= b <= n, got b={b}, n={n}")
    if not (0 <= i_star < n):
        raise BatchError(f"i_star must lie in [0, {n})")
    idx = batch_indices(stream, t, n, b)
    return idx, bool(np.isin(i_star, idx))


def sample_gradient(oracle: GradientOracle, problem, x, t: int):
    """One stochastic gradient draw and its realized error.

    Returns:
        (g, e) with e = grad f(x) - g, recorded for the per-step recursion
        checks. Pure function of (oracle.stream, oracle.trial, t).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.d,):
        raise ProblemError(f"point has dimension {x.shape}, problem wants ({problem.d},)")
    full = problem.grad_one(x)
    if oracle.mode == "finite_sum_subsample":
        n = problem.n
        if n is None:
            raise ProblemError("finite_sum_subsample oracle needs a finite-sum problem")
        if oracle.batch > n:
            raise BatchError(f"batch {oracle.batch} exceeds dataset size {n}")
        if oracle.batch == n:
            return full.copy(), np.zeros_like(full)
        idx = batch_indices(oracle.stream.substream(BATCH, oracle.trial), t, n, oracle.batch)
        g = problem.batch_grad(x, idx)
        return g, full - g
    if oracle.sigma == 0.0:
        return full.copy(), np.zeros_like(full)
    e = _additive_noise_row(oracle, problem.d, t)
    return full - e, e


# ---------------------------------------------------------------------------
# empirical tail norms


def _norm_estimate(transform, samples, min_samples=100):
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < min_samples:
        raise ProblemError(f"need at least {min_samples} samples")
    if not np.all(np.isfinite(samples)):
        raise ProblemError("samples must be finite")
    scale = float(np.abs(samples).max())
    if scale == 0.0:
        return 0.0
    y = np.abs(samples) / scale
    lo, hi = 1e-12, 10.0

    def excess(s):
        return float(np.mean(np.exp(np.minimum(transform(y, s), 700.0)))) - np.e

    # excess is decreasing in s; hi is always on the satisfying side
    if excess(hi) > 0:  # pragma: no cover - unreachable with y <= 1
        raise ProblemError("bisection bracket failed")
    while (hi - lo) > 1e-7 * hi:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi * scale


def subgaussian_norm_estimate(samples) -> float:
    """Smallest s with mean exp(X^2/s^2) <= e, by bisection.

    Exactly homogeneous under sample scaling (the bisection runs on
    max-normalized samples). All-zero input returns 0.
    """
    return _norm_estimate(lambda y, s: (y * y) / (s * s), samples)


def subexponential_norm_estimate(samples) -> float:
    """Smallest s with mean exp(|X|/s) <= e, by bisection."""
    return _norm_estimate(lambda y, s: y / s, samples)
