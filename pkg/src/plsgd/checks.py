"""Fast one-shot property suite behind `plsgd check`.

Each property has a stable name so failures are machine-identifiable.
The whole suite targets well under a minute on a laptop.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import envelopes
from .errors import CheckFailure
from .optimizer import StepSchedule, recursion_check, run_sgd, schedule_eval
from .oracles import (batch_indices_block, make_oracle,
                      subexponential_norm_estimate, subgaussian_norm_estimate)
from .problems import (CounterexampleSpec, check_landscape, flat_set_distance,
                       make_logistic, make_quadratic)
from .streams import BATCH, Stream


def _fail(name, msg):
    raise CheckFailure(f"{name}: {msg}")


def check_schedule_values():
    s = StepSchedule.theta_kind(1.0, 0.5)
    if s.tau != 4 or schedule_eval(s, 0) != 1.0:
        _fail("schedule-values", "theta head is not 1/L")
    if abs(schedule_eval(s, 4) - 0.72) > 1e-15:
        _fail("schedule-values", f"theta tail wrong: {schedule_eval(s, 4)}")
    slow = StepSchedule.slow_kind(0.25, 1.0)
    if schedule_eval(slow, 0) != 0.25 or schedule_eval(slow, 2) != 0.125:
        _fail("schedule-values", "slow schedule values wrong")


def check_harvey_constraint():
    rng = np.random.default_rng(1)
    K = rng.uniform(0, 10, 20_000)
    al = rng.uniform(0, 1.2, 20_000)
    b2 = rng.uniform(0, 4, 20_000)
    ga = rng.uniform(0, 2, 20_000)
    nxt = envelopes.envelope_next(K, al, b2, ga)
    resid = nxt * nxt - (al * K + 2 * ga) * nxt - b2 * K
    scale = np.maximum(nxt * nxt, 1e-300)
    worst = float(np.abs(resid / scale).max())
    if worst > 1e-12:
        _fail("harvey-constraint", f"constraint residual {worst:.2e} > 1e-12 relative")


def check_harvey_expected():
    rng = np.random.default_rng(2)
    for _ in range(50):
        T = int(rng.integers(1, 40))
        params = envelopes.RecursionParams(rng.uniform(0, 1.1, T),
                                           rng.uniform(0, 1, T),
                                           rng.uniform(0, 1, T),
                                           K0=1.0)
        X0 = float(rng.uniform(0, 5))
        got = envelopes.expected_bound(params, X0, T)
        direct = float(np.prod(params.alpha)) * X0
        for t in range(T):
            direct += float(np.prod(params.alpha[t + 1:])) * params.gamma[t]
        if abs(got - direct) > 1e-9 * (1.0 + abs(direct)):
            _fail("harvey-expected", f"recursion {got} vs direct {direct}")


def check_landscape_quadratic():
    p = make_quadratic(2, [0.5, 2.0])
    rep = check_landscape(p, 2000, radius=3.0, seed=5)
    if not rep.ok:
        _fail("landscape-quadratic", f"violations: {rep.violations[:3]}")
    if rep.smooth_ratio_max > p.L * (1 + 1e-9):
        _fail("landscape-quadratic", "gradient Lipschitz ratio above L")


def check_landscape_logistic():
    p = make_logistic(40, 3, data_seed=11, lambda_r=0.1, pilot_points=5_000)
    rep = check_landscape(p, 2000, radius=p.ball_radius, seed=6)
    if not rep.ok:
        _fail("landscape-logistic", f"violations: {rep.violations[:3]}")


def check_coupling_hit_rate():
    n, b, i_star, draws = 10, 3, 4, 100_000
    idx = batch_indices_block(Stream(123).substream(BATCH, 0), 0, draws, n, b)
    rate = float((idx == i_star).any(axis=1).mean())
    p = b / n
    slack = 5.0 * math.sqrt(p * (1 - p) / draws)
    if abs(rate - p) > slack:
        _fail("coupling-hit-rate", f"hit rate {rate:.4f} vs {p} (slack {slack:.4f})")


def check_recursion_short_run():
    p = make_quadratic(4, [0.5, 1.0, 1.5, 2.0])
    oracle = make_oracle("additive_gaussian", 0.5, 1, seed=3)
    sched = StepSchedule.theta_kind(p.L, p.mu)
    traj = run_sgd(p, oracle, sched, T=500, trial_id=0)
    bad = recursion_check(traj, p, sched)
    if bad:
        _fail("recursion-short-run", f"violations at steps {bad[:5]}")


def check_norm_estimators():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(20_000)
    g = subgaussian_norm_estimate(x)
    if abs(subgaussian_norm_estimate(3.0 * x) - 3.0 * g) > 1e-6 * g:
        _fail("norm-homogeneity", "estimate is not homogeneous under scaling")
    e = subexponential_norm_estimate(x * x)
    if abs(g * g - e) > 0.05 * e:
        _fail("norm-homogeneity", f"cross-identity violated: {g * g:.4f} vs {e:.4f}")


def check_envelope_dominance():
    for mu, L, sigma in ((0.5, 1.0, 1.0), (1.0, 1.0, 0.5), (0.2, 2.0, 2.0)):
        sched = StepSchedule.theta_kind(L, mu)
        cfg = envelopes.SGDEnvelopeConfig(L=L, mu=mu, sigma=sigma, b=1, d=10,
                                          schedule=sched, X0=1.0)
        rep = envelopes.sgd_envelope(cfg, 300, deltas=(0.1,))
        closed = rep.closed_form
        if np.any(rep.K > closed * (1 + 1e-9) + 1e-12):
            _fail("envelope-dominance", f"minimal K above closed form at mu={mu}, L={L}")


def check_projection_geometry():
    spec = CounterexampleSpec()
    from scipy.optimize import brentq
    root = brentq(lambda x: 2 * x**3 + 3 * x - 2, 0.0, 1.0, xtol=1e-14)
    dist = math.sqrt((root - 2.0) ** 2 + (root**2 + 1.0) ** 2)
    if abs(flat_set_distance(spec) - dist) > 1e-9:
        _fail("projection-geometry", "distance solver disagrees with the cubic root")


ALL_CHECKS = (
    ("schedule-values", check_schedule_values),
    ("harvey-constraint", check_harvey_constraint),
    ("harvey-expected", check_harvey_expected),
    ("landscape-quadratic", check_landscape_quadratic),
    ("landscape-logistic", check_landscape_logistic),
    ("coupling-hit-rate", check_coupling_hit_rate),
    ("recursion-short-run", check_recursion_short_run),
    ("norm-homogeneity", check_norm_estimators),
    ("envelope-dominance", check_envelope_dominance),
    ("projection-geometry", check_projection_geometry),
)


def run_all(emit=print):
    """Run every named property; returns the list of (name, error) failures."""
    failures = []
    for name, fn in ALL_CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
        except CheckFailure as e:
            failures.append((name, str(e)))
            emit(f"FAIL {name}: {e} [{time.perf_counter() - t0:.2f}s]")
        except Exception as e:  # property crashed outright
            failures.append((name, f"{type(e).__name__}: {e}"))
            emit(f"ERROR {name}: {type(e).__name__}: {e} [{time.perf_counter() - t0:.2f}s]")
        else:
            emit(f"ok   {name} [{time.perf_counter() - t0:.2f}s]")
    return failures
