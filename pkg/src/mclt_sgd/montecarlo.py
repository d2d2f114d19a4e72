"""Replication harness: Gaussian reference expectations, empirical discrepancies
|E h(standardized quantity) - E h(reference)| with their applicable bounds, and
covariance checks for the averaged linear iteration."""
from __future__ import annotations

from dataclasses import dataclass, field
import math
import time

import numpy as np

from . import bounds as bnd
from . import linalg
from .errors import (DimTooLargeForQuadrature, InsufficientReplications, InvalidParams,
                     ReferenceUnavailable)
from .martingale import MartingaleModel, cor1_bound, cor2_bound, model_p1_deviation, thm1_bound
from .quadrature import GH_NODES, standard_normal_grid
from .rng import map_blocks, seed_stream
from .sgd_engine import SgdProblem, StepSchedule, run_batch
from .test_functions import TestFunction, catalog_function

ENGINES = ("martingale", "linear", "sgd")
BOUND_NAMES = ("thm1", "cor1", "cor2", "thm3", "cor4", "thm4")
QUADRATURE_MAX_DIM = 3
REFERENCE_STREAM = 2**31  # stream index reserved for reference Monte Carlo
BOUND_STREAM = 2**31 + 1  # stream index reserved for bound Monte Carlo


def _psd_root(cov) -> np.ndarray:
    cov = linalg.symmetrize(np.atleast_2d(np.asarray(cov, dtype=float)))
    w, q = np.linalg.eigh(cov)
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def reference_expectation(h: TestFunction, mean=None, cov=None, method: str = "quadrature",
                          reps: int = 10**6, seed: int = 0) -> tuple[float, float]:
    """E h(cov^{1/2} Z + mean) and an error estimate.

    Quadrature reports the change between 64- and 48-node tensor rules; Monte
    Carlo reports the standard error. ``cov`` may be singular.
    """
    d = h.dim
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float).reshape(d)
    root = np.eye(d) if cov is None else _psd_root(cov)
    if method == "quadrature":
        if d > QUADRATURE_MAX_DIM:
            raise DimTooLargeForQuadrature(f"tensor quadrature supports d <= {QUADRATURE_MAX_DIM}")
        vals = []
        for n in (GH_NODES, 48):
            z, w = standard_normal_grid(d, n)
            vals.append(float(h.value(z @ root.T + mean) @ w))
        return vals[0], abs(vals[0] - vals[1])
    if method == "monte_carlo":
        z = seed_stream(seed, REFERENCE_STREAM).standard_normal((reps, d))
        v = h.value(z @ root.T + mean)
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(reps))
    raise InvalidParams("method must be 'quadrature' or 'monte_carlo'")


def _reference(h, mean=None, cov=None, seed=0):
    method = "quadrature" if h.dim <= QUADRATURE_MAX_DIM else "monte_carlo"
    return reference_expectation(h, mean, cov, method=method, seed=seed)


def empirical_covariance(samples, scaling: float = 1.0) -> np.ndarray:
    """Sample covariance (ddof = 1) of ``scaling * samples``; rows are replications."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise InsufficientReplications("need at least two replications")
    return np.atleast_2d(np.cov(scaling * x, rowvar=False))


def linear_gaussian_law(A, noise_cov, schedule: StepSchedule, t: int, delta0=None):
    """Exact mean and covariance of sqrt(t) * averaged residual for the linear
    iteration driven by Gaussian noise with covariance ``noise_cov``."""
    A = linalg.as_spd(np.atleast_2d(A))
    d = A.shape[0]
    led = bnd.w_ledger(A, schedule, t)
    v = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    cov = np.einsum("jab,bc,jdc->ad", led.B[1:], v, led.B[1:]) / t
    delta0 = np.zeros(d) if delta0 is None else np.asarray(delta0, dtype=float)
    mean = led.B[0] @ delta0 / (schedule.eta0 * math.sqrt(t))
    return mean, linalg.symmetrize(cov) if d > 1 else cov


@dataclass
class ExperimentSpec:
    """One cell of a discrepancy experiment.

    ``martingale`` standardizes Sigma^{-1/2} S_n; ``linear`` compares sqrt(t) times
    the averaged residual with A^{-1} V^{1/2} Z; ``sgd`` standardizes the averaged
    residual by its martingale-part covariance and compares with Z.
    """

    id: str
    engine: str
    function: str
    horizon: int
    model: MartingaleModel | None = None
    problem: SgdProblem | None = None
    schedule: StepSchedule | None = None
    theta0: np.ndarray | None = None
    bounds: tuple = ()
    bound_reps: int = 0
    constants: bnd.BoundConstants | None = None
    calibration: tuple = (100, 1000)
    cor4_horizons: tuple = (100, 1000, 10000)

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise InvalidParams(f"engine must be one of {ENGINES}")
        if self.engine == "martingale" and self.model is None:
            raise InvalidParams("martingale experiments need a model")
        if self.engine != "martingale" and (self.problem is None or self.schedule is None):
            raise InvalidParams(f"{self.engine} experiments need a problem and a schedule")
        if self.engine == "linear" and self.problem.kind != "quadratic":
            raise ReferenceUnavailable("the linear engine needs a quadratic problem")
        unknown = set(self.bounds) - set(BOUND_NAMES)
        if unknown:
            raise InvalidParams(f"unknown bounds {sorted(unknown)}")

    @property
    def dim(self) -> int:
        return self.model.dim if self.engine == "martingale" else self.problem.dim

    def test_function(self) -> TestFunction:
        return catalog_function(self.function, self.dim)


@dataclass
class DiscrepancyReport:
    experiment: str
    engine: str
    function: str
    dim: int
    horizon: int
    reps: int
    seed: int
    empirical_mean: float
    reference_mean: float
    gap: float
    gap_stderr: float
    bound_values: dict
    coupled_gap: float = math.nan
    runtime: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def min_bound(self) -> float:
        vals = [v for v in self.bound_values.values() if math.isfinite(v)]
        return min(vals) if vals else math.inf

    @property
    def certified(self) -> bool:
        return self.gap <= self.min_bound + 3.0 * self.gap_stderr


def _summary(vals: np.ndarray) -> tuple[float, float]:
    sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return float(vals.mean()), sd / math.sqrt(vals.size)


def _martingale_sums(model: MartingaleModel, reps: int, seed: int, threads=None) -> np.ndarray:
    def block(rng, size, _):
        s = np.zeros((size, model.dim))
        for k in range(1, model.horizon + 1):
            s = s + model.draw(rng, k, s)
        return s

    return np.concatenate(map_blocks(block, reps, seed, threads))


def _martingale_report(spec, h, reps, seed, threads):
    from .martingale import covariance_ledger

    model = spec.model
    ledger = covariance_ledger(model)
    u = _martingale_sums(model, reps, seed, threads) @ linalg.inv_sqrtm(ledger.sigma)
    emp, emp_se = _summary(h.value(u))
    ref, ref_err = _reference(h, seed=seed)
    bounds, extra = {}, {"p1_deviation": model_p1_deviation(model)}
    d, n = model.dim, model.horizon
    if "thm1" in spec.bounds:
        r = thm1_bound(model, h, spec.bound_reps or reps, seed + 1, threads)
        bounds["thm1"] = r.value
        extra["thm1_stderr"] = r.stderr
    if "cor1" in spec.bounds and model.alpha > 0:
        bounds["cor1"] = cor1_bound(model.alpha, model.beta, model.gamma, d, n, h.m2)
    if "cor2" in spec.bounds and math.isfinite(h.m1):
        bounds["cor2"] = cor2_bound(h.m1, h.m2, ledger.sigma, model.cor2_beta, model.delta, d, n)
    return emp, emp_se, ref, ref_err, bounds, math.nan, extra


def _sgd_like_report(spec, h, reps, seed, threads):
    prob, sched, t = spec.problem, spec.schedule, spec.horizon
    d = prob.dim
    theta0 = prob.theta_star if spec.theta0 is None else np.asarray(spec.theta0, dtype=float)
    delta0 = theta0 - prob.theta_star
    moments = (float(np.linalg.norm(delta0)), float(delta0 @ delta0))
    H = prob.hessian_at_min
    hinv = linalg.matrix_power(H, -1.0)
    v = prob.noise.cov
    sandwich = linalg.symmetrize(hinv @ v @ hinv) if d > 1 else hinv @ v @ hinv
    batch = run_batch(prob, sched, theta0, t, reps, seed, threads=threads)
    # coupled reference: the linearized martingale part built from the same noise
    lin = -batch.extra["noise_sum"] @ hinv.T / math.sqrt(t)
    consts = spec.constants
    if consts is None and (set(spec.bounds) & {"thm3", "cor4", "thm4"}):
        consts = bnd.spectral_constants(H, sched, spec.calibration)
    bounds, extra = {}, {}
    finite = math.isfinite(h.m1) and math.isfinite(h.m2)
    if spec.engine == "linear":
        x = math.sqrt(t) * batch.delta_bar
        ref, ref_err = _reference(h, cov=sandwich, seed=seed)
        coupled = h.value(x) - h.value(lin)
        if finite and "thm3" in spec.bounds:
            b = bnd.thm3_bound(H, prob.noise, sched, t, h, moments, consts)
            bounds["thm3"] = b.total
            extra.update({f"thm3_{k}": val for k, val in b.terms.items()})
        if finite and "cor4" in spec.bounds and not prob.noise.is_zero:
            alpha, beta, gamma = bnd.cor4_moments(H, prob.noise)
            k4, k5, _ = bnd.fit_cor4_constants(H, prob.noise, sched, spec.cor4_horizons, h,
                                               moments, consts)
            bounds["cor4"] = bnd.cor4_bound(alpha, beta, gamma, d, t, h, k4, k5).total
        if prob.noise.kind == "gaussian":
            mean, cov = linear_gaussian_law(H, v, sched, t, delta0)
            extra["exact_mean"] = _reference(h, mean, cov, seed=seed)[0]
    else:
        if prob.noise.is_zero:
            raise ReferenceUnavailable("sgd standardization needs nonsingular noise covariance")
        sigma_t, pk = bnd.additive_noise_ledger(prob.noise, t)
        std = bnd.standardizer(prob, sigma_t, t, "delta_bar")
        isq = linalg.inv_sqrtm(std)
        x = batch.delta_bar @ isq.T
        ref, ref_err = _reference(h, seed=seed)
        coupled = h.value(x) - h.value(lin @ linalg.inv_sqrtm(sandwich).T)
        if finite and "thm4" in spec.bounds:
            b = bnd.thm4_bound(prob, sched, t, h, sigma_t, pk, consts, moments,
                               reps=spec.bound_reps, seed=seed + 1)
            bounds["thm4"] = b.total
            extra.update({f"thm4_{k}": val for k, val in b.terms.items()})
            # the literal standardization by Sigma_t, reported but never certified
            bp = bnd.thm4_bound(prob, sched, t, h, sigma_t, pk, consts, moments,
                                normalization="sigma_t")
            xp = batch.delta_bar @ linalg.inv_sqrtm(sigma_t).T
            extra["thm4_sigma_t"] = bp.total
            extra["gap_sigma_t"] = abs(float(h.value(xp).mean()) - ref)
    emp, emp_se = _summary(h.value(x))
    return emp, emp_se, ref, ref_err, bounds, float(np.mean(np.abs(coupled))), extra


def empirical_discrepancy(spec: ExperimentSpec, reps: int, seed: int,
                          threads: int | None = None) -> DiscrepancyReport:
    if reps < 1:
        raise InsufficientReplications("need at least one replication")
    h = spec.test_function()
    start = time.perf_counter()
    if spec.engine == "martingale":
        out = _martingale_report(spec, h, reps, seed, threads)
    else:
        out = _sgd_like_report(spec, h, reps, seed, threads)
    emp, emp_se, ref, ref_err, bounds, coupled_gap, extra = out
    return DiscrepancyReport(
        experiment=spec.id, engine=spec.engine, function=spec.function, dim=spec.dim,
        horizon=spec.horizon, reps=reps, seed=seed, empirical_mean=emp, reference_mean=ref,
        gap=abs(emp - ref), gap_stderr=math.hypot(emp_se, ref_err), bound_values=bounds,
        coupled_gap=coupled_gap, runtime=time.perf_counter() - start, extra=extra)


def discrepancy_trend(problem: SgdProblem, schedule: StepSchedule, h: TestFunction, horizons,
                      reps: int, seed: int, theta0=None, threads: int | None = None):
    """Gaps of the linear standardization at several horizons of one batch of
    paths, so consecutive horizons share their noise. Returns (gaps, stderrs)."""
    horizons = sorted(int(t) for t in horizons)
    theta0 = problem.theta_star if theta0 is None else np.asarray(theta0, dtype=float)
    H = problem.hessian_at_min
    hinv = linalg.matrix_power(H, -1.0)
    ref, ref_err = _reference(h, cov=hinv @ problem.noise.cov @ hinv, seed=seed)
    batch = run_batch(problem, schedule, theta0, horizons[-1], reps, seed, horizons, threads)
    gaps, errs = [], []
    for i, t in enumerate(batch.checkpoints):
        emp, se = _summary(h.value(math.sqrt(t) * batch.delta_bar_at[:, i]))
        gaps.append(abs(emp - ref))
        errs.append(math.hypot(se, ref_err))
    return np.array(gaps), np.array(errs)


@dataclass
class EnvelopeReport:
    checkpoints: np.ndarray
    msd: np.ndarray  # E ||Delta_j||^2 per checkpoint
    msd_stderr: np.ndarray
    etas: np.ndarray
    C_fit: float
    C_trace: float
    mu: float

    def envelope(self, C: float) -> np.ndarray:
        return 2.0 * C / self.mu * self.etas

    def holds(self, C: float) -> bool:
        return bool(np.all(self.msd <= self.envelope(C) + 3.0 * self.msd_stderr))


ENVELOPE_FIT_FRACTION = 0.1
ENVELOPE_INFLATION = 1.1


def envelope_check(problem: SgdProblem, schedule: StepSchedule, theta0, horizon: int, reps: int,
                   seed: int, checkpoints=None, threads: int | None = None) -> EnvelopeReport:
    """E||Delta_j||^2 against (2C/mu) eta_j.

    C is fitted on checkpoints j <= horizon / 10 (inflated by 10%) and then
    checked on every checkpoint, so the late horizon is held out. C = Tr(V) is
    reported alongside as the noise-level reference.
    """
    if checkpoints is None:
        checkpoints = np.unique(np.round(np.logspace(1, math.log10(horizon), 13)).astype(int))
    batch = run_batch(problem, schedule, theta0, horizon, reps, seed, checkpoints, threads)
    sq = np.sum(batch.delta_at**2, axis=2)
    msd = sq.mean(axis=0)
    se = sq.std(axis=0, ddof=1) / math.sqrt(reps)
    etas = np.asarray(schedule.eta(batch.checkpoints), dtype=float)
    early = batch.checkpoints <= ENVELOPE_FIT_FRACTION * horizon
    c_fit = ENVELOPE_INFLATION * float(np.max(problem.mu * msd[early] / (2.0 * etas[early])))
    return EnvelopeReport(checkpoints=batch.checkpoints, msd=msd, msd_stderr=se, etas=etas,
                          C_fit=c_fit, C_trace=problem.noise.trace, mu=problem.mu)


def enumerated_discrepancy(spec: ExperimentSpec) -> DiscrepancyReport:
    """Exact counterpart of ``empirical_discrepancy`` for finite-support martingales."""
    from .martingale import covariance_ledger, enumerate_oracle

    if spec.engine != "martingale":
        raise InvalidParams("enumeration needs a martingale experiment")
    model, h = spec.model, spec.test_function()
    start = time.perf_counter()
    res = enumerate_oracle(model, h, check=False)
    d, n = model.dim, model.horizon
    bounds = {}
    if "thm1" in spec.bounds:
        bounds["thm1"] = res.bound
    if "cor1" in spec.bounds and model.alpha > 0:
        bounds["cor1"] = cor1_bound(model.alpha, model.beta, model.gamma, d, n, h.m2)
    if "cor2" in spec.bounds and math.isfinite(h.m1):
        sigma = covariance_ledger(model).sigma
        bounds["cor2"] = cor2_bound(h.m1, h.m2, sigma, model.cor2_beta, model.delta, d, n)
    return DiscrepancyReport(
        experiment=spec.id, engine="martingale", function=spec.function, dim=d, horizon=n,
        reps=res.paths, seed=0, empirical_mean=res.empirical_mean,
        reference_mean=res.reference_mean, gap=res.discrepancy, gap_stderr=0.0,
        bound_values=bounds, runtime=time.perf_counter() - start,
        extra={"p1_deviation": model_p1_deviation(model), "enumerated": True})


def loglog_slope(x, y) -> tuple[float, float]:
    """Least-squares slope of log y on log x and its standard error (nan for two points)."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    if lx.size < 2:
        raise InvalidParams("a slope needs at least two points")
    xc = lx - lx.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (ly - ly.mean())) / sxx
    if lx.size == 2:
        return slope, math.nan
    resid = ly - ly.mean() - slope * xc
    return slope, math.sqrt(float(resid @ resid) / (lx.size - 2) / sxx)
