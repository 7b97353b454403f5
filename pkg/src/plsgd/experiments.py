"""Monte Carlo orchestration: envelope validation ensembles, coupled
stability runs, generalization-gap measurement with true-risk balancing,
and the constrained-stall demonstration.

Trials are independent; ensembles are evaluated as one vectorized block
whose rows are bit-identical to standalone runs, and replicate-based
experiments merge results in replicate order so the outcome never depends
on scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import beta as beta_dist

from . import envelopes as env
from .errors import DivergenceError, ProblemError
from .optimizer import (DIVERGENCE_GAP, RECURSION_TOL, ProjectedRun,
                        StepSchedule, run_projected_gd, run_sgd, schedule_eval)
from .oracles import (GradientOracle, additive_noise_block,
                      batch_indices_block)
from .problems import (CounterexampleSpec, LogisticProblem, Problem,
                       counterexample_pl_report, sample_ball)
from .streams import BATCH, COUPLING, DATA, HELDOUT, PILOT, Stream

QUANTILE_LEVELS = (0.5, 0.9, 0.95, 0.99)
DEFAULT_CHECKPOINTS = (10, 100, 1_000, 10_000)


def binom_upper99(k: int, n: int) -> float:
    """One-sided 99% Clopper-Pearson upper bound on a binomial fraction."""
    if k >= n:
        return 1.0
    return float(beta_dist.ppf(0.99, k + 1, n - k))


@dataclass
class CheckpointStats:
    t: int
    mean: float
    std: float
    quantiles: dict
    K: float
    expected: float
    envelope: dict        # delta -> K_t log(e/delta)
    exceed_counts: dict   # delta -> count
    exceed_upper99: dict  # delta -> CP upper bound on the fraction
    mgf_stat: float


@dataclass
class EnsembleStats:
    """Per-time-step empirical statistics across independent trials."""

    N: int
    T: int
    deltas: tuple
    tau: int
    mean_gap: np.ndarray           # length T+1
    checkpoints: list
    violations: int                # recursion-check failures, all trials/steps
    bound_report: env.BoundReport = field(repr=False)
    checkpoint_gaps: dict = field(repr=False, default_factory=dict)  # t -> (N,) raw gaps

    def csv_header(self):
        cols = ["t", "mean", "q50", "q90", "q95", "q99"]
        cols += [f"env_{env.delta_tag(d)}" for d in self.deltas]
        cols += [f"exceed_{env.delta_tag(d)}" for d in self.deltas]
        cols += ["mgf_stat", "expected_bound"]
        return cols

    def csv_rows(self):
        for cp in self.checkpoints:
            row = [cp.t, cp.mean]
            row += [cp.quantiles[q] for q in QUANTILE_LEVELS]
            row += [cp.envelope[d] for d in self.deltas]
            row += [cp.exceed_counts[d] for d in self.deltas]
            row += [cp.mgf_stat, cp.expected]
            yield tuple(row)


def _default_checkpoints(T):
    return [t for t in DEFAULT_CHECKPOINTS if 1 <= t <= T]


def _mgf_stat(gaps, K):
    """Empirical certificate statistic mean exp(X_t / K_t); a degenerate
    envelope (K = 0) certifies only the all-zero distribution."""
    if K > 0:
        return float(np.mean(np.exp(np.minimum(gaps / K, 700.0))))
    return 1.0 if np.all(gaps == 0.0) else float("inf")


def run_ensemble(problem: Problem, oracle: GradientOracle, schedule: StepSchedule,
                 T: int, N: int, deltas, seed: int, *, C1: float = 2.0,
                 C2: float = 2.0, checkpoints=None,
                 x0: Optional[np.ndarray] = None) -> EnsembleStats:
    """N independent SGD trials with per-checkpoint envelope validation.

    Records, at each checkpoint: exact-order-statistic quantiles, the
    exceedance count of each high-probability envelope with a one-sided
    99% binomial upper bound, and the empirical certificate statistic
    mean exp(X_t / K_t). The per-step descent recursion is checked inline
    on every trial at every step.

    Raises DivergenceError if any trial crosses the divergence threshold.
    """
    if N < 100:
        raise ProblemError("need N >= 100 trials")
    if T < 1:
        raise ProblemError("need T >= 1")
    oracle = oracle.reseed(seed)
    x_start = np.array(problem.x0 if x0 is None else x0, dtype=float)
    gap0 = max(problem.eval_one(x_start) - problem.f_star, 0.0)
    cfg = env.SGDEnvelopeConfig(L=problem.L, mu=problem.mu, sigma=oracle.sigma,
                                b=oracle.batch, d=problem.d, schedule=schedule,
                                X0=gap0, C1=C1, C2=C2)
    report = env.sgd_envelope(cfg, T, deltas)
    checkpoints = sorted(set(_default_checkpoints(T) if checkpoints is None else checkpoints))
    if any(t < 1 or t > T for t in checkpoints):
        raise ProblemError("checkpoints must lie in [1, T]")

    if oracle.mode == "finite_sum_subsample":
        gaps_by_t, violations = _trial_loop_gaps(problem, oracle, schedule, T, N,
                                                 x_start, checkpoints)
    else:
        gaps_by_t, violations = _vectorized_gaps(problem, oracle, schedule, T, N,
                                                 x_start, checkpoints)
    mean_gap, checkpoint_gaps = gaps_by_t

    deltas = tuple(report.deltas)
    cps = []
    for t in checkpoints:
        g = checkpoint_gaps[t]
        K_t = report.K[t]
        envs = {d: report.envelopes[d][t] for d in deltas}
        counts = {d: int((g > envs[d]).sum()) for d in deltas}
        cps.append(CheckpointStats(
            t=t,
            mean=float(g.mean()),
            std=float(g.std(ddof=1)),
            quantiles={q: float(np.quantile(g, q)) for q in QUANTILE_LEVELS},
            K=float(K_t),
            expected=float(report.expected[t]),
            envelope=envs,
            exceed_counts=counts,
            exceed_upper99={d: binom_upper99(counts[d], N) for d in deltas},
            mgf_stat=_mgf_stat(g, K_t),
        ))
    return EnsembleStats(N=N, T=T, deltas=deltas, tau=schedule.tau,
                         mean_gap=mean_gap, checkpoints=cps,
                         violations=violations, bound_report=report,
                         checkpoint_gaps=checkpoint_gaps)


def _vectorized_gaps(problem, oracle, schedule, T, N, x_start, checkpoints):
    """All-trials-at-once evolution for additive-noise oracles."""
    d = problem.d
    L, mu = problem.L, problem.mu
    X = np.broadcast_to(x_start, (N, d)).copy()
    gap_prev = problem.gap_many(X)
    mean_gap = np.empty(T + 1)
    mean_gap[0] = gap_prev.mean()
    want = set(checkpoints)
    kept = {}
    violations = 0
    noiseless = oracle.sigma == 0.0
    for t in range(T):
        eta = schedule_eval(schedule, t)
        grads = problem.grad_many(X)
        if noiseless:
            X = X - eta * grads
            inner = errsq = 0.0
        else:
            E = additive_noise_block(oracle, d, t, N)
            X = X - eta * (grads - E)
            inner = np.einsum("ij,ij->i", grads, E)
            errsq = np.einsum("ij,ij->i", E, E)
        gap_next = problem.gap_many(X)
        worst = gap_next.max()
        if worst > DIVERGENCE_GAP:
            bad = np.nonzero(gap_next > DIVERGENCE_GAP)[0]
            raise DivergenceError(t + 1, worst, bad.tolist())
        rhs = ((1.0 - mu * eta) * gap_prev
               + eta * (1.0 - L * eta) * inner
               + 0.5 * L * eta * eta * errsq
               + RECURSION_TOL * (1.0 + gap_prev))
        violations += int((gap_next > rhs).sum())
        gap_prev = gap_next
        mean_gap[t + 1] = gap_next.mean()
        if t + 1 in want:
            kept[t + 1] = gap_next.copy()
    return (mean_gap, kept), violations


def _trial_loop_gaps(problem, oracle, schedule, T, N, x_start, checkpoints):
    """Per-trial fallback for finite-sum oracles (slower, same statistics)."""
    from .optimizer import recursion_check
    mean_acc = np.zeros(T + 1)
    kept = {t: np.empty(N) for t in checkpoints}
    violations = 0
    for i in range(N):
        traj = run_sgd(problem, oracle.with_trial(i), schedule, T, trial_id=i,
                       x0=x_start)
        violations += len(recursion_check(traj, problem, schedule))
        mean_acc += traj.gap
        for t in checkpoints:
            kept[t][i] = traj.gap[t]
    return (mean_acc / N, kept), violations


def rate_fit(stats: EnsembleStats, t_lo: int, t_hi: int) -> float:
    """Least-squares slope of log(mean gap) against log(t) on [t_lo, t_hi]."""
    burn_in = max(stats.tau, 1)
    if not (t_hi >= 2 * t_lo and t_lo >= burn_in):
        raise ProblemError(f"need t_hi >= 2 t_lo >= {2 * burn_in} (past the burn-in)")
    if t_hi > stats.T:
        raise ProblemError(f"t_hi={t_hi} beyond the run horizon {stats.T}")
    y = stats.mean_gap[t_lo:t_hi + 1]
    if np.any(y <= 0):
        raise ProblemError("mean gap must be positive on the fit window")
    lx = np.log(np.arange(t_lo, t_hi + 1, dtype=float))
    ly = np.log(y)
    lx = lx - lx.mean()
    return float((lx @ (ly - ly.mean())) / (lx @ lx))


# ---------------------------------------------------------------------------
# coupled stability runs


@dataclass(frozen=True)
class NeighborPair:
    """Two logistic problems on datasets differing in exactly one sample,
    plus the evaluation set used for the sup-loss surrogate."""

    base: LogisticProblem
    prime: LogisticProblem
    i_star: int
    eval_features: np.ndarray
    eval_labels: np.ndarray

    def validate(self):
        A, B = self.base.features, self.prime.features
        if A.shape != B.shape or self.base.n != self.prime.n:
            raise ProblemError("neighboring datasets must have identical shape")
        mask = np.ones(self.base.n, dtype=bool)
        mask[self.i_star] = False
        if not (np.array_equal(A[mask], B[mask])
                and np.array_equal(self.base.labels[mask], self.prime.labels[mask])):
            raise ProblemError("datasets differ outside the designated sample")
        if self.base.lam != self.prime.lam:
            raise ProblemError("regularizers differ")


def make_neighbor_pair(n, d, data_seed, lambda_r=0.1, *, label_noise=0.0,
                       i_star="random", fresh=1_000, identical=False,
                       pilot_points=20_000) -> NeighborPair:
    """Planted dataset S plus a copy with one sample redrawn from the same
    distribution. identical=True keeps the replacement equal to the
    original (the zero-deviation control)."""
    from .problems import planted_dataset
    A, y = planted_dataset(n + fresh + 1, d, data_seed, label_noise)
    feats, labels = A[:n], y[:n]
    replacement = (A[n], y[n])
    fresh_feats, fresh_labels = A[n + 1:], y[n + 1:]
    rng = Stream(data_seed).substream(COUPLING, 0).generator()
    idx = int(rng.integers(0, n)) if i_star == "random" else int(i_star)
    if not 0 <= idx < n:
        raise ProblemError("i_star out of range")
    feats2 = feats.copy()
    labels2 = labels.copy()
    if not identical:
        feats2[idx] = replacement[0]
        labels2[idx] = replacement[1]
    pstream = Stream(data_seed).substream(PILOT, 2)
    base = LogisticProblem(feats, labels, lambda_r, pilot_stream=pstream,
                           pilot_points=pilot_points)
    prime = LogisticProblem(feats2, labels2, lambda_r, pilot_stream=pstream,
                            pilot_points=pilot_points)
    ef = np.vstack([feats, feats2[idx:idx + 1], fresh_feats])
    el = np.concatenate([labels, labels2[idx:idx + 1], fresh_labels])
    pair = NeighborPair(base, prime, idx, ef, el)
    pair.validate()
    return pair


@dataclass
class CoupledStats:
    replicates: int
    T: int
    b: int
    n: int
    delta_mean: np.ndarray       # mean ||x_t - x_t'|| per step
    delta_max: np.ndarray
    violations_per_step: np.ndarray
    hit_rate: float
    sup_devs: np.ndarray         # terminal sup-loss deviation per replicate
    alpha_bound: float

    @property
    def violations(self) -> int:
        return int(self.violations_per_step.sum())

    @property
    def sup_dev_mean(self) -> float:
        return float(self.sup_devs.mean())

    def csv_header(self):
        return ["t", "delta_mean", "delta_max", "violations"]

    def csv_rows(self):
        for t in range(self.T + 1):
            v = 0 if t == 0 else int(self.violations_per_step[t - 1])
            yield (t, self.delta_mean[t], self.delta_max[t], v)


def run_coupled(pair: NeighborPair, oracle: GradientOracle, schedule: StepSchedule,
                T: int, replicates: int, seed: int, *,
                threads: Optional[int] = None) -> CoupledStats:
    """Coupled SGD on neighboring datasets sharing one index stream.

    Checks the per-step growth bound at every step of every replicate:
    (1 + eta L) delta_t when the differing sample is missed, and
    delta_t + 2 eta rho when it is hit. Aggregates the terminal sup-loss
    deviation surrogate for comparison against the closed-form stability
    bound.
    """
    pair.validate()
    if oracle.mode != "finite_sum_subsample":
        raise ProblemError("coupled runs need the finite_sum_subsample oracle")
    if schedule.kind != "stability":
        raise ProblemError("coupled runs use the stability schedule eta_t = c/(t+1)")
    p, p2 = pair.base, pair.prime
    n, b = p.n, oracle.batch
    if b > n:
        raise ProblemError(f"batch {b} exceeds n={n}")
    # the growth bound needs the Lipschitz constant uniform over both datasets
    L, rho, c = p.L, max(p.rho, p2.rho), schedule.c
    etas = np.array([schedule_eval(schedule, t) for t in range(T)])
    x0 = p.x0

    def one(rep: int):
        idx_stream = Stream(seed).substream(COUPLING, rep)
        idx = batch_indices_block(idx_stream, 0, T, n, b)
        hits = (idx == pair.i_star).any(axis=1)
        x = x0.copy()
        x2 = x0.copy()
        deltas = np.empty(T + 1)
        deltas[0] = 0.0
        viol = np.zeros(T, dtype=np.int64)
        for t in range(T):
            eta = etas[t]
            row = idx[t]
            x = x - eta * p.batch_grad(x, row)
            x2 = x2 - eta * p2.batch_grad(x2, row)
            dlt = float(np.linalg.norm(x - x2))
            prev = deltas[t]
            bound = prev + 2.0 * eta * rho if hits[t] else (1.0 + eta * L) * prev
            if dlt > bound + 1e-12 * (1.0 + prev):
                viol[t] = 1
            deltas[t + 1] = dlt
        dev = float(np.abs(p.losses_on(x, pair.eval_features, pair.eval_labels)
                           - p.losses_on(x2, pair.eval_features, pair.eval_labels)).max())
        return deltas, viol, hits.mean(), dev

    results = _map_replicates(one, replicates, threads)
    all_d = np.stack([r[0] for r in results])
    viols = np.sum([r[1] for r in results], axis=0)
    hit_rate = float(np.mean([r[2] for r in results]))
    sup_devs = np.array([r[3] for r in results])
    alpha = env.stability_bound(rho, T, L, c, b, n)
    return CoupledStats(replicates=replicates, T=T, b=b, n=n,
                        delta_mean=all_d.mean(axis=0), delta_max=all_d.max(axis=0),
                        violations_per_step=viols, hit_rate=hit_rate,
                        sup_devs=sup_devs, alpha_bound=alpha)


def _map_replicates(fn, count, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, range(count)))
    return [fn(r) for r in range(count)]


# ---------------------------------------------------------------------------
# true-risk balancing


@dataclass(frozen=True)
class RiskDistribution:
    """Data distribution for the risk-balance experiment.

    kind "logistic": unit-sphere features, labels from a fixed planted
    direction with optional flip noise; the plant is drawn once from
    w_seed so every dataset and the held-out set share one distribution.
    kind "constant": every loss is identically `value` (the zero-gap
    control).
    """

    kind: str = "logistic"
    d: int = 5
    lambda_r: float = 0.1
    label_noise: float = 0.1
    w_seed: int = 0
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("logistic", "constant"):
            raise ProblemError(f"unknown distribution kind {self.kind!r}")

    def plant(self) -> np.ndarray:
        rng = Stream(self.w_seed).substream(DATA, 0).generator()
        w = rng.standard_normal(self.d)
        return w * (2.0 / np.linalg.norm(w))

    def sample(self, m: int, stream: Stream):
        rng = stream.generator()
        A = rng.standard_normal((m, self.d))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        y = np.sign(A @ self.plant())
        y[y == 0] = 1.0
        if self.label_noise > 0:
            flip = rng.random(m) < self.label_noise
            y[flip] = -y[flip]
        return A, y


@dataclass
class RiskReport:
    """Aggregates for one grid point of the risk-balance sweep."""

    multiplier: float
    n: int
    b: int
    delta: float
    T_mean: float
    c_mean: float
    F_mean: float
    f_mean: float
    fstar_mean: float
    gap_mean: float
    conv_bound_mean: float
    gen_bound_mean: float
    combined_bound_mean: float
    exceed_frac: float
    replicates: int
    gaps: np.ndarray = field(repr=False, default=None)
    gen_bounds: np.ndarray = field(repr=False, default=None)

    @staticmethod
    def csv_header():
        return ["multiplier", "T", "c", "F_est", "f_est", "gap",
                "conv_bound", "gen_bound", "combined_bound", "exceed_frac"]

    def csv_row(self):
        return (self.multiplier, self.T_mean, self.c_mean, self.F_mean,
                self.f_mean, self.gap_mean, self.conv_bound_mean,
                self.gen_bound_mean, self.combined_bound_mean, self.exceed_frac)


def _noise_scale_pilot(problem: LogisticProblem, stream: Stream, points=16) -> float:
    """Bounded surrogate for the single-draw gradient noise parameter: the
    largest per-sample gradient deviation seen at pilot points in the
    certified ball. Bounded noise is sub-gaussian at its sup-norm."""
    P = sample_ball(problem.x0, problem.ball_radius, points, problem.d, stream)
    worst = 0.0
    for x in P:
        full = problem.grad_one(x)
        z = problem.labels * (problem.features @ x)
        per = (-expit(-z) * problem.labels)[:, None] * problem.features \
            + problem.lam * x
        worst = max(worst, float(np.linalg.norm(per - full, axis=1).max()))
    return worst if worst > 0 else 1e-12


def run_risk_balance(dist: RiskDistribution, n: int, b: int, multipliers,
                     replicates: int, delta: float, seed: int, *,
                     heldout_size: int = 100_000,
                     threads: Optional[int] = None) -> list:
    """Train to the balanced horizon for each order-constant multiplier and
    measure the true-risk gap on a held-out sample.

    Returns one RiskReport per multiplier. Each replicate draws a fresh
    dataset, calibrates the problem, picks c = 1/(mu + L), T from the
    balanced-horizon formula scaled by the multiplier, runs SGD with the
    stability schedule, and compares F(x_T) - f(x_T) against the
    closed-form gap bound at level delta.
    """
    if heldout_size < 10_000:
        raise ProblemError("held-out set too small (< 1e4)")
    if not (0.0 < delta < 1.0):
        raise ProblemError("delta must lie in (0, 1)")
    if dist.kind == "constant":
        return [_constant_risk_report(dist, n, b, m, replicates, delta)
                for m in multipliers]

    held_A, held_y = dist.sample(heldout_size, Stream(seed).substream(HELDOUT))
    reports = []
    for mi, mult in enumerate(multipliers):
        def one(rep, _mult=float(mult), _mi=mi):
            A, y = dist.sample(n, Stream(seed).substream(DATA, 1 + rep))
            prob = LogisticProblem(
                A, y, dist.lambda_r,
                pilot_stream=Stream(seed).substream(PILOT, rep),
                pilot_points=4_000)
            sig = _noise_scale_pilot(prob, Stream(seed).substream(PILOT, rep, 1))
            T, c = env.hprisk_horizon(prob.L, prob.d, sig, prob.M, prob.rho,
                                      prob.mu, b, n, theta_const=max(_mult, 0.0))
            sched = StepSchedule.stability_kind(c)
            idx = batch_indices_block(Stream(seed).substream(BATCH, _mi, rep),
                                      0, T, n, b)
            x = prob.x0.copy()
            for t in range(T):
                x = x - schedule_eval(sched, t) * prob.batch_grad(x, idx[t])
            F_est = float(prob.losses_on(x, held_A, held_y).mean())
            f_T = prob.eval_one(x)
            gap = F_est - f_T
            gen = env.generalization_bound(prob.M, prob.rho, T, prob.L, c, b, n, delta)
            conv_delta = min(delta, 0.99 / math.e)
            mc = prob.mu * c
            conv = (prob.L * c**2 * sig**2 * math.log(math.e / conv_delta)
                    / (b * (1.0 - mc) * max(T, 1) ** mc))
            comb = env.risk_product_bound(prob.L, prob.mu, sig, prob.M, prob.rho,
                                          b, n, delta)
            return T, c, F_est, f_T, gap, conv, gen, comb, prob.f_star

        rows = _map_replicates(one, replicates, threads)
        arr = np.array(rows, dtype=float)
        gaps = arr[:, 4]
        gens = arr[:, 6]
        reports.append(RiskReport(
            multiplier=float(mult), n=n, b=b, delta=delta,
            T_mean=float(arr[:, 0].mean()), c_mean=float(arr[:, 1].mean()),
            F_mean=float(arr[:, 2].mean()), f_mean=float(arr[:, 3].mean()),
            fstar_mean=float(arr[:, 8].mean()),
            gap_mean=float(gaps.mean()), conv_bound_mean=float(arr[:, 5].mean()),
            gen_bound_mean=float(gens.mean()), combined_bound_mean=float(arr[:, 7].mean()),
            exceed_frac=float((gaps > gens).mean()), replicates=replicates,
            gaps=gaps, gen_bounds=gens))
    return reports


def _constant_risk_report(dist, n, b, mult, replicates, delta):
    """Constant losses generalize exactly: the gap is identically zero."""
    M = dist.value
    gen = env.elisseeff_bound(M, n, 0.0, delta)
    return RiskReport(multiplier=float(mult), n=n, b=b, delta=delta,
                      T_mean=1.0, c_mean=1.0, F_mean=M, f_mean=M, fstar_mean=M,
                      gap_mean=0.0, conv_bound_mean=0.0, gen_bound_mean=gen,
                      combined_bound_mean=0.0, exceed_frac=0.0,
                      replicates=replicates, gaps=np.zeros(replicates),
                      gen_bounds=np.full(replicates, gen))


# ---------------------------------------------------------------------------
# constrained-stall demonstration


@dataclass
class CounterexampleReport:
    spec: CounterexampleSpec
    unconstrained: ProjectedRun
    projected: ProjectedRun
    stall_target: np.ndarray
    stall_distance: float
    pl_sample: dict

    @property
    def free_run_minimized(self) -> bool:
        return self.unconstrained.final_value <= 1e-6

    @property
    def projected_run_stuck(self) -> bool:
        return self.projected.final_value >= 1e-3

    @property
    def stall_located(self) -> bool:
        return self.stall_distance <= 1e-3

    @property
    def ok(self) -> bool:
        return self.free_run_minimized and self.projected_run_stuck and self.stall_located


def run_counterexample_demo(spec: CounterexampleSpec, eta: float = 0.4,
                            T: int = 100_000) -> CounterexampleReport:
    """Gradient descent on the mollified objective, free and constrained.

    The free run reaches the flat set; the constrained run, whose feasible
    ball has the same minimum value available on its boundary's far side
    removed, sticks at the boundary point nearest the origin.
    """
    free = run_projected_gd(spec, eta, T, constrained=False)
    proj = run_projected_gd(spec, eta, T, constrained=True)
    target = np.array([spec.d0 - spec.radius, 0.0])
    dist = float(np.linalg.norm(proj.final_point - target))
    pl = counterexample_pl_report(spec)
    return CounterexampleReport(spec, free, proj, target, dist, pl)
