"""Linear stochastic iteration and additive-noise SGD with Polyak-Ruppert
averaging. State is kept as residuals Delta_t = theta_t - theta*."""
from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math
import warnings

import numpy as np

from . import linalg
from .errors import DivergenceDetected, IndexOrder, InvalidParams
from .quadrature import standard_normal_grid
from .rng import map_blocks, seed_stream

DIVERGENCE_NORM = 1e8
NOISE_KINDS = ("gaussian", "scaled_rademacher")
LOGCOSH_LH = 4.0 / (3.0 * math.sqrt(3.0))  # sup |d/dr sech^2 r|


@dataclass(frozen=True)
class StepSchedule:
    """eta_t = eta0 * t^(-c3) for t >= 1; eta_0 is taken to be eta0."""

    eta0: float
    c3: float

    def __post_init__(self):
        if not self.eta0 > 0:
            raise InvalidParams(f"eta0 must be positive, got {self.eta0}")
        if not 0.0 <= self.c3 < 1.0:
            raise InvalidParams(f"c3 must lie in (0, 1), got {self.c3}")

    def eta(self, t):
        t = np.asarray(t, dtype=float)
        return self.eta0 * np.where(t >= 1, np.maximum(t, 1.0), 1.0) ** (-self.c3)

    def etas(self, horizon: int) -> np.ndarray:
        """Array whose index k holds eta_k for k = 0..horizon."""
        return self.eta(np.arange(horizon + 1))


def schedule_partial_sums(schedule: StepSchedule, j: int, i: int) -> float:
    """m_j^i = eta_j + ... + eta_i."""
    if j < 1 or i < j:
        raise IndexOrder(f"need 1 <= j <= i, got j={j}, i={i}")
    return float(np.sum(schedule.eta(np.arange(j, i + 1))))


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    cov: np.ndarray

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidParams(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if np.all(cov == 0):
            root = np.zeros_like(cov)
        else:
            cov = linalg.as_spd(cov)
            root = linalg.sqrtm(cov)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_root", root)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.cov)

    @property
    def trace(self) -> float:
        """K_d: E||zeta||^2 = Tr(V) for both shipped laws."""
        return float(np.trace(self.cov))

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        d = self.dim
        if self.kind == "gaussian":
            xi = rng.standard_normal((size, d))
        else:
            xi = 2.0 * rng.integers(0, 2, size=(size, d)) - 1.0
        return xi @ self._root

    def third_moment(self, m=None) -> float:
        """E||M zeta||^3 (M = identity when omitted)."""
        d = self.dim
        m = np.eye(d) if m is None else np.atleast_2d(m)
        lin = self._root @ m.T  # rows: xi -> M zeta = xi @ lin
        if self.kind == "scaled_rademacher":
            pats = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
            return float(np.mean(np.linalg.norm(pats @ lin, axis=1) ** 3))
        g = lin @ lin.T
        c = np.trace(g) / d
        if np.allclose(g, c * np.eye(d), rtol=1e-12, atol=1e-14):
            chi3 = 2.0**1.5 * math.exp(math.lgamma((d + 3) / 2) - math.lgamma(d / 2))
            return float(c**1.5 * chi3)
        if d <= 3:
            z, w = standard_normal_grid(d)
            return float(np.linalg.norm(z @ lin, axis=1) ** 3 @ w)
        raise InvalidParams("Gaussian third moment for d > 3 needs an isotropic transform")


def gaussian_noise(cov) -> NoiseModel:
    return NoiseModel("gaussian", cov)


def rademacher_noise(cov) -> NoiseModel:
    return NoiseModel("scaled_rademacher", cov)


@dataclass
class SgdProblem:
    """Strongly convex objective with additive gradient noise.

    ``residual_grad(delta)`` returns grad f(theta* + delta) for a batch (B, d).
    """

    kind: str
    dim: int
    mu: float
    L: float
    L_H: float
    theta_star: np.ndarray
    hessian_at_min: np.ndarray
    noise: NoiseModel
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    design: np.ndarray | None = None
    targets: np.ndarray | None = None
    ridge: float = 0.0
    name: str = ""

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.kind == "quadratic":
            return theta @ self.A.T - self.b
        r = theta @ self.design.T - self.targets
        return np.tanh(r) @ self.design / len(self.targets) + self.ridge * theta

    def residual_grad(self, delta) -> np.ndarray:
        if self.kind == "quadratic":
            return delta @ self.A.T
        return self.grad(self.theta_star + delta)

    def value(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * np.einsum("...i,ij,...j->...", theta, self.A, theta) - theta @ self.b
        r = theta @ self.design.T - self.targets
        # log cosh r = |r| + log1p(exp(-2|r|)) - log 2
        lc = np.abs(r) + np.log1p(np.exp(-2 * np.abs(r))) - math.log(2.0)
        return lc.mean(axis=-1) + 0.5 * self.ridge * np.sum(theta * theta, axis=-1)

    def hessian(self, theta) -> np.ndarray:
        if self.kind == "quadratic":
            return self.A.copy()
        r = self.design @ np.asarray(theta, dtype=float) - self.targets
        w = 1.0 / np.cosh(r) ** 2
        return (self.design.T * w) @ self.design / len(self.targets) + self.ridge * np.eye(self.dim)


def quadratic_problem(A, b, noise: NoiseModel, name: str = "") -> SgdProblem:
    A = linalg.as_spd(A)
    b = np.asarray(b, dtype=float).reshape(A.shape[0])
    spec = linalg.spectral_decompose(A)
    theta_star = np.linalg.solve(A, b)
    return SgdProblem(kind="quadratic", dim=A.shape[0], mu=float(spec.eigenvalues[0]),
                      L=float(spec.eigenvalues[-1]), L_H=0.0, theta_star=theta_star,
                      hessian_at_min=A, noise=noise, A=A, b=b, name=name or "quadratic")


def _solve_minimizer(p: SgdProblem, tol: float = 1e-12) -> np.ndarray:
    # deterministic damped Newton from the origin; f is strongly convex
    theta = np.zeros(p.dim)
    for _ in range(200):
        g = p.grad(theta)
        if np.linalg.norm(g) <= tol:
            return theta
        step = np.linalg.solve(p.hessian(theta), g)
        s = 1.0
        f0 = p.value(theta)
        while p.value(theta - s * step) > f0 - 1e-4 * s * (g @ step) and s > 1e-8:
            s *= 0.5
        theta = theta - s * step
    if np.linalg.norm(p.grad(theta)) > tol:
        raise InvalidParams("minimizer solve did not reach the gradient tolerance")
    return theta


def logcosh_ridge_problem(design, targets, ridge: float, noise: NoiseModel,
                          theta_star=None, name: str = "") -> SgdProblem:
    """f(theta) = mean_i log cosh(a_i . theta - y_i) + ridge/2 |theta|^2."""
    a = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(a.shape[0])
    if not ridge > 0:
        raise InvalidParams("ridge must be positive for strong convexity")
    d = a.shape[1]
    gram = a.T @ a / len(y)
    p = SgdProblem(kind="logcosh_ridge", dim=d, mu=float(ridge),
                   L=float(ridge + np.linalg.eigvalsh(gram)[-1]),
                   L_H=float(LOGCOSH_LH * np.mean(np.linalg.norm(a, axis=1) ** 3)),
                   theta_star=np.zeros(d), hessian_at_min=np.eye(d), noise=noise,
                   design=a, targets=y, ridge=float(ridge), name=name or "logcosh_ridge")
    p.theta_star = _solve_minimizer(p) if theta_star is None else np.asarray(theta_star, dtype=float)
    if np.linalg.norm(p.grad(p.theta_star)) > 1e-12:
        raise InvalidParams("supplied theta_star is not a minimizer to 1e-12")
    p.hessian_at_min = linalg.as_spd(p.hessian(p.theta_star))
    return p


@dataclass
class Trajectory:
    horizon: int
    deltas: np.ndarray  # (t+1, d): Delta_0 .. Delta_t
    delta_bar: np.ndarray  # (1/t) sum_{i=0}^{t-1} Delta_i, from the running accumulator
    noise: np.ndarray  # (t, d): zeta_1 .. zeta_t
    seed: int
    theta_star: np.ndarray

    @property
    def thetas(self) -> np.ndarray:
        return self.theta_star + self.deltas

    @property
    def theta_bar(self) -> np.ndarray:
        return self.theta_star + self.delta_bar


@dataclass
class BatchResult:
    """Summary of many replications run to a common horizon."""

    horizon: int
    delta_bar: np.ndarray  # (R, d)
    checkpoints: np.ndarray  # (c,) step indices
    delta_at: np.ndarray  # (R, c, d): Delta_j at each checkpoint j
    delta_bar_at: np.ndarray  # (R, c, d): average over Delta_0..Delta_{j-1}
    seed: int
    divergences: int = 0
    extra: dict = field(default_factory=dict)


def _check_step(A_or_L: float, schedule: StepSchedule):
    if schedule.eta(1) * A_or_L > 1.0 + 1e-12:
        warnings.warn(f"eta_1 * lambda_max = {float(schedule.eta(1)) * A_or_L:.3g} > 1; "
                      "iteration may oscillate or diverge", RuntimeWarning, stacklevel=3)


def _iterate(residual_grad, noise: NoiseModel, schedule: StepSchedule, delta0, horizon: int,
             rng, size: int, checkpoints=(), keep_path: bool = False):
    d = noise.dim
    delta = np.broadcast_to(np.asarray(delta0, dtype=float), (size, d)).copy()
    acc = np.zeros((size, d))
    zsum = np.zeros((size, d))
    etas = schedule.etas(horizon)
    cps = sorted(set(int(c) for c in checkpoints))
    at = np.empty((size, len(cps), d))
    bar_at = np.empty((size, len(cps), d))
    path = np.empty((horizon + 1, d)) if keep_path else None
    zetas = np.empty((horizon, d)) if keep_path else None
    if keep_path:
        path[0] = delta[0]
    ci = 0
    for t in range(1, horizon + 1):
        acc += delta  # adds Delta_{t-1}
        zeta = noise.draw(rng, size)
        zsum += zeta
        delta = delta - etas[t] * (residual_grad(delta) + zeta)
        if keep_path:
            path[t] = delta[0]
            zetas[t - 1] = zeta[0]
        if not np.all(np.abs(delta) <= DIVERGENCE_NORM):
            bad = np.linalg.norm(delta, axis=1)
            raise DivergenceDetected(t, float(np.nanmax(np.where(np.isfinite(bad), bad, np.inf))))
        while ci < len(cps) and cps[ci] == t:
            at[:, ci] = delta
            bar_at[:, ci] = acc / t
            ci += 1
    return delta, acc / horizon, at, bar_at, path, zetas, zsum


def _single(residual_grad, noise, schedule, delta0, horizon, seed, theta_star):
    if horizon < 1:
        raise InvalidParams("horizon must be at least 1")
    rng = seed_stream(seed, 0)
    _, bar, _, _, path, zetas, _ = _iterate(residual_grad, noise, schedule, delta0, horizon, rng, 1,
                                         keep_path=True)
    return Trajectory(horizon=horizon, deltas=path, delta_bar=bar[0], noise=zetas, seed=seed,
                      theta_star=np.asarray(theta_star, dtype=float))


def run_linear(A, b, schedule: StepSchedule, theta0, horizon: int, noise: NoiseModel,
               seed: int) -> Trajectory:
    """theta_t = theta_{t-1} - eta_t (A theta_{t-1} - b + zeta_t), tracked as residuals."""
    prob = quadratic_problem(A, b, noise)
    _check_step(prob.L, schedule)
    delta0 = np.asarray(theta0, dtype=float) - prob.theta_star
    return _single(prob.residual_grad, noise, schedule, delta0, horizon, seed, prob.theta_star)


def run_sgd(problem: SgdProblem, schedule: StepSchedule, theta0, horizon: int, seed: int) -> Trajectory:
    """theta_t = theta_{t-1} - eta_t (grad f(theta_{t-1}) + zeta_t)."""
    _check_step(problem.L, schedule)
    delta0 = np.asarray(theta0, dtype=float) - problem.theta_star
    return _single(problem.residual_grad, problem.noise, schedule, delta0, horizon, seed,
                   problem.theta_star)


def run_batch(problem: SgdProblem, schedule: StepSchedule, theta0, horizon: int, reps: int,
              seed: int, checkpoints=(), threads: int | None = None) -> BatchResult:
    """``reps`` independent replications; replication r matches the r-th path of
    its block stream, so results do not depend on ``threads``."""
    _check_step(problem.L, schedule)
    delta0 = np.asarray(theta0, dtype=float) - problem.theta_star
    cps = sorted(set(int(c) for c in checkpoints if 1 <= int(c) <= horizon))

    def block(rng, size, _):
        _, bar, at, bar_at, _, _, zsum = _iterate(problem.residual_grad, problem.noise, schedule,
                                                  delta0, horizon, rng, size, cps)
        return bar, at, bar_at, zsum

    parts = map_blocks(block, reps, seed, threads)
    return BatchResult(horizon=horizon,
                       delta_bar=np.concatenate([p[0] for p in parts]),
                       checkpoints=np.array(cps, dtype=int),
                       delta_at=np.concatenate([p[1] for p in parts]),
                       delta_bar_at=np.concatenate([p[2] for p in parts]),
                       seed=seed,
                       extra={"noise_sum": np.concatenate([p[3] for p in parts])})


def martingale_part(problem: SgdProblem, trajectory: Trajectory) -> np.ndarray:
    """X_k = E[grad f(theta_{k-1}) | F_{k-1}] - grad f(theta_{k-1}) - zeta_k = -zeta_k.

    The conditional expectation cancels the gradient term exactly under the
    additive-noise model, which is what makes X_k a martingale difference.
    """
    return -np.asarray(trajectory.noise, dtype=float)


def _circle_design(rows: int = 8) -> tuple[np.ndarray, np.ndarray]:
    ang = 2.0 * np.pi * np.arange(rows) / rows
    design = np.column_stack([np.cos(ang), np.sin(ang)])
    targets = np.sin(3.0 * ang) + 0.5  # fixed, non-symmetric so theta* != 0
    return design, targets


def catalog_problem(name: str) -> SgdProblem:
    """Shipped problems; every one uses identity-covariance noise."""
    if name == "linear_1d":
        return quadratic_problem(np.eye(1), np.zeros(1), gaussian_noise(np.eye(1)), name)
    if name == "linear_2d":
        return quadratic_problem(np.diag([1.0, 2.0]), np.zeros(2), gaussian_noise(np.eye(2)), name)
    if name == "linear_2d_rademacher":
        return quadratic_problem(np.diag([1.0, 2.0]), np.zeros(2), rademacher_noise(np.eye(2)), name)
    if name == "logcosh_ridge_2d":
        design, targets = _circle_design()
        return logcosh_ridge_problem(design, targets, 0.5, gaussian_noise(np.eye(2)), name=name)
    raise InvalidParams(f"unknown problem {name!r}; expected one of {PROBLEMS}")


PROBLEMS = ("linear_1d", "linear_2d", "linear_2d_rademacher", "logcosh_ridge_2d")
