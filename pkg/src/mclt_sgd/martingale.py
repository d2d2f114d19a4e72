"""Martingale difference generators, covariance ledgers, and the normal
approximation bounds for standardized martingale sums."""
from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math

import numpy as np

from . import linalg
from .errors import InvalidMoment, InvalidParams, SingularTail, SupportTooLarge
from .quadrature import standard_normal_grid
from .rng import map_blocks, seed_stream
from .test_functions import TestFunction

KINDS = ("iid_rademacher", "iid_gaussian", "deterministic_varying", "sign_history")
THREE_PI_8 = 3.0 * math.pi / 8.0
ENUM_MAX_PATHS = 10**7
ENUM_N_MAX = 14

# sign_history: per coordinate, values {-2, 1/2} w.p. {1/5, 4/5} when the running
# sum is >= 0 and the mirrored law otherwise; mean 0, variance 1 either way.
_SH_BIG, _SH_SMALL, _SH_P_BIG = 2.0, 0.5, 0.2


def _sign_patterns(d: int) -> np.ndarray:
    return np.array(list(itertools.product((-1.0, 1.0), repeat=d)))


@dataclass
class MartingaleModel:
    kind: str
    dim: int
    horizon: int
    vk: np.ndarray | None = None  # (n, d, d) for deterministic_varying
    alpha: float = field(init=False)
    beta: float = field(init=False)
    gamma: float = field(init=False)
    delta: float = field(init=False)
    cor2_beta: float = field(init=False, default=0.0)
    provenance: str = field(init=False, default="analytic")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParams(f"unknown martingale kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 1 or self.horizon < 1:
            raise InvalidParams("dim and horizon must be positive")
        d, n = self.dim, self.horizon
        if self.kind == "deterministic_varying":
            if self.vk is None:
                raise InvalidParams("deterministic_varying needs an explicit V_k sequence")
            vk = np.asarray(self.vk, dtype=float)
            if vk.shape != (n, d, d):
                raise InvalidParams(f"V_k must have shape {(n, d, d)}, got {vk.shape}")
            self.vk = np.array([linalg.as_spd(v) for v in vk])
            self._roots = np.array([linalg.sqrtm(v) for v in self.vk])
        elif self.vk is not None:
            raise InvalidParams(f"{self.kind} has fixed V_k = I; do not pass vk")
        self._moment_constants()

    # -- per-step covariances -------------------------------------------------
    def covariance(self, k: int) -> np.ndarray:
        """V_k for 1 <= k <= n."""
        if self.kind == "deterministic_varying":
            return self.vk[k - 1]
        return np.eye(self.dim)

    def _third_moment(self, k: int) -> float:
        """E ||X_k||^3, exact for every shipped kind (and history-independent)."""
        d = self.dim
        if self.kind == "iid_rademacher":
            return d**1.5
        if self.kind == "iid_gaussian":
            return 2.0**1.5 * math.exp(math.lgamma((d + 3) / 2) - math.lgamma(d / 2))
        if self.kind == "deterministic_varying":
            x = _sign_patterns(d) @ self._roots[k - 1]
            return float(np.mean(np.linalg.norm(x, axis=1) ** 3))
        # sign_history: magnitudes are iid two-point regardless of the past
        total = 0.0
        for bits in itertools.product((0, 1), repeat=d):
            b = np.array(bits)
            p = np.prod(np.where(b == 1, _SH_P_BIG, 1 - _SH_P_BIG))
            sq = np.sum(np.where(b == 1, _SH_BIG**2, _SH_SMALL**2))
            total += p * sq**1.5
        return float(total)

    def _moment_constants(self):
        d, n = self.dim, self.horizon
        if self.kind == "deterministic_varying":
            eig = np.array([np.linalg.eigvalsh(v) for v in self.vk])
            self.alpha, self.beta = float(eig.min()), float(eig.max())
            m3 = np.array([self._third_moment(k) for k in range(1, n + 1)])
            tr = np.trace(self.vk, axis1=1, axis2=2)
        else:
            self.alpha = self.beta = 1.0
            m3 = np.full(n, self._third_moment(1))
            tr = np.full(n, float(d))
        self.gamma = float(m3.max() / d**1.5)
        self.delta = float(np.max(m3 / tr))

    # -- sampling ---------------------------------------------------------------
    def draw(self, rng: np.random.Generator, k: int, s_prev: np.ndarray) -> np.ndarray:
        """X_k for a block of paths given their running sums S_{k-1} (shape (B, d))."""
        b, d = s_prev.shape
        if self.kind == "iid_gaussian":
            return rng.standard_normal((b, d))
        if self.kind == "sign_history":
            big = rng.random((b, d)) < _SH_P_BIG
            x = np.where(big, -_SH_BIG, _SH_SMALL)
            return np.where(s_prev >= 0, x, -x)
        xi = 2.0 * rng.integers(0, 2, size=(b, d)) - 1.0
        if self.kind == "iid_rademacher":
            return xi
        return xi @ self._roots[k - 1]

    def support(self, k: int, s_prev: np.ndarray):
        """Exact conditional law of X_k: values (B, s, d) and probabilities (B, s)."""
        b, d = s_prev.shape
        if self.kind == "iid_gaussian":
            raise SupportTooLarge("gaussian increments have no finite support")
        pats = _sign_patterns(d)
        s = len(pats)
        if self.kind == "iid_rademacher":
            return np.broadcast_to(pats, (b, s, d)), np.full((b, s), 1.0 / s)
        if self.kind == "deterministic_varying":
            vals = pats @ self._roots[k - 1]
            return np.broadcast_to(vals, (b, s, d)), np.full((b, s), 1.0 / s)
        # pattern entry +1 -> small value, -1 -> big value (before mirroring)
        base = np.where(pats > 0, _SH_SMALL, -_SH_BIG)
        probs = np.prod(np.where(pats > 0, 1 - _SH_P_BIG, _SH_P_BIG), axis=1)
        flip = np.where(s_prev >= 0, 1.0, -1.0)  # (B, d)
        vals = base[None, :, :] * flip[:, None, :]
        return vals, np.broadcast_to(probs, (b, s))

    def support_size(self) -> int:
        if self.kind == "iid_gaussian":
            return 0
        return 2**self.dim


def make_model(kind: str, dim: int, horizon: int, vk=None, profile: str | None = None) -> MartingaleModel:
    """Build a model; ``profile`` names a V_k sequence for deterministic_varying:
    ``ramp`` (V_k = (k/n) I) or ``diag_k`` (V_k = diag(1, k, ..., k))."""
    if kind == "deterministic_varying" and vk is None:
        n, d = horizon, dim
        ks = np.arange(1, n + 1, dtype=float)
        if profile in (None, "ramp"):
            vk = (ks / n)[:, None, None] * np.eye(d)
        elif profile == "diag_k":
            diag = np.ones((n, d))
            diag[:, 1:] = ks[:, None]
            vk = np.array([np.diag(r) for r in diag])
        else:
            raise InvalidParams(f"unknown V_k profile {profile!r}")
    return MartingaleModel(kind=kind, dim=dim, horizon=horizon, vk=vk)


def sample_path(model: MartingaleModel, seed: int) -> np.ndarray:
    """One path X_1..X_n as an (n, d) array; replication 0 of ``seed``."""
    rng = seed_stream(seed, 0)
    s = np.zeros((1, model.dim))
    out = np.empty((model.horizon, model.dim))
    for k in range(1, model.horizon + 1):
        x = model.draw(rng, k, s)
        out[k - 1] = x[0]
        s = s + x
    return out


@dataclass(frozen=True)
class CovarianceLedger:
    vk: np.ndarray  # (n, d, d)
    vbar: np.ndarray  # cumulative sums, vbar[k-1] = V_1 + ... + V_k
    tails: np.ndarray  # tails[k-1] = P_k = V_k + ... + V_n
    sigma: np.ndarray

    def partial(self, k: int) -> np.ndarray:
        return self.tails[k - 1]


def covariance_ledger(model: MartingaleModel) -> CovarianceLedger:
    vk = np.array([model.covariance(k) for k in range(1, model.horizon + 1)])
    vbar = np.cumsum(vk, axis=0)
    tails = np.cumsum(vk[::-1], axis=0)[::-1]
    sigma = vbar[-1]
    for k, p in enumerate(tails, start=1):
        try:
            linalg.spectral_decompose(p)
        except Exception as exc:
            raise SingularTail(f"P_{k} is not positive definite") from exc
    return CovarianceLedger(vk=vk, vbar=vbar, tails=tails, sigma=sigma)


def tail_factors(ledger: CovarianceLedger) -> tuple[np.ndarray, np.ndarray]:
    """Per-k ||Sigma^{1/2} P_k^{-1} Sigma^{1/2}||^{1/2} and ||P_k^{-1/2} Sigma^{1/2}||.

    The two agree for any SPD pair since ||M||^2 = ||M^T M||; both are kept
    so the identity stays checked.
    """
    return sandwich_factors(ledger.sigma, ledger.tails)


def sandwich_factors(sigma, tails) -> tuple[np.ndarray, np.ndarray]:
    root = linalg.sqrtm(sigma)
    w, q = np.linalg.eigh(tails)  # batched over k
    pinv = np.einsum("kij,kj,klj->kil", q, 1.0 / w, q)
    pisq = np.einsum("kij,kj,klj->kil", q, w**-0.5, q)
    stmt = np.sqrt(np.linalg.norm(root @ pinv @ root, ord=2, axis=(1, 2)))
    proof = np.linalg.norm(pisq @ root, ord=2, axis=(1, 2))
    return stmt, proof


@dataclass(frozen=True)
class Thm1Result:
    value: float
    stderr: float
    proof_form_value: float
    factors: np.ndarray


def thm1_bound(model: MartingaleModel, h: TestFunction, reps: int, seed: int,
               threads: int | None = None) -> Thm1Result:
    """(3 pi / 8) sqrt(d) M2(h) sum_k E[ ||Sigma^{1/2} P_k^{-1} Sigma^{1/2}||^{1/2} ||Sigma^{-1/2} X_k||^3 ].

    The norm factors are exact; the third moments are averaged over ``reps`` paths.
    """
    if not math.isfinite(h.m2):
        raise InvalidParams("the martingale bound needs finite M2(h)")
    ledger = covariance_ledger(model)
    factors, proof = tail_factors(ledger)
    isq = linalg.inv_sqrtm(ledger.sigma)

    def block(rng, size, _):
        s = np.zeros((size, model.dim))
        acc = np.zeros(size)
        for k in range(1, model.horizon + 1):
            x = model.draw(rng, k, s)
            acc += factors[k - 1] * np.linalg.norm(x @ isq, axis=1) ** 3
            s += x
        return acc

    per_path = np.concatenate(map_blocks(block, reps, seed, threads))
    scale = THREE_PI_8 * math.sqrt(model.dim) * h.m2
    mean = float(per_path.mean())
    sd = float(per_path.std(ddof=1)) if reps > 1 else 0.0
    ratio = float(np.max(proof / factors)) if factors.size else 1.0
    return Thm1Result(value=scale * mean, stderr=scale * sd / math.sqrt(reps),
                      proof_form_value=scale * mean * ratio, factors=factors)


def cor1_bound(alpha: float, beta: float, gamma: float, d: int, n: int, m2: float) -> float:
    if alpha <= 0:
        raise InvalidMoment(f"alpha must be positive, got {alpha}")
    if beta < 0 or gamma < 0:
        raise InvalidMoment("beta and gamma must be nonnegative")
    return 0.75 * math.pi * gamma * math.sqrt(beta) / alpha**2 * m2 * d**2 / math.sqrt(n)


def cor2_bound(m1: float, m2: float, sigma, beta: float, delta: float, d: int, n: int) -> float:
    """Both terms of the bound that trades the lower eigenvalue condition for a
    conditional third-moment condition. ``m1`` or ``m2`` may be zero."""
    sigma = linalg.as_spd(np.atleast_2d(sigma))
    tr = float(np.trace(sigma)) / n
    first = 0.0 if m1 == 0 else 2.0 * m1 / math.sqrt(n) * math.sqrt(tr)
    if delta == 0 or m2 == 0:
        second = 0.0
    else:
        isq = linalg.op_norm(linalg.inv_sqrtm(sigma))
        second = 0.75 * math.pi * delta * math.sqrt(d) * n * m2 * isq**3 * (tr + beta ** (2.0 / 3.0))
    return first + second


def p1_deviation(p1_samples, sigma) -> float:
    """Monte Carlo estimate of E[ ||I - Sigma^{-1} P_1||_* ]^{1/2}."""
    sigma = linalg.as_spd(np.atleast_2d(sigma))
    samples = np.asarray(p1_samples, dtype=float)
    d = sigma.shape[0]
    samples = samples.reshape(-1, d, d)
    sinv = linalg.matrix_power(sigma, -1.0)
    eye = np.eye(d)
    nuc = [linalg.norms(eye - sinv @ p)[2] for p in samples]
    return math.sqrt(float(np.mean(nuc)))


def model_p1_deviation(model: MartingaleModel) -> float:
    """Every shipped kind has deterministic V_k, so P_1 equals Sigma on every path."""
    ledger = covariance_ledger(model)
    return p1_deviation(ledger.tails[0][None], ledger.sigma)


@dataclass(frozen=True)
class EnumerationResult:
    empirical_mean: float
    reference_mean: float
    discrepancy: float
    bound: float
    paths: int

    @property
    def certified(self) -> bool:
        return self.discrepancy <= self.bound


def enumerate_oracle(model: MartingaleModel, h: TestFunction, n_max: int = ENUM_N_MAX,
                     check: bool = True) -> EnumerationResult:
    """Exact |E h(Sigma^{-1/2} S_n) - E h(Z)| and the exact martingale bound
    by enumerating every path of a finite-support model."""
    n, d = model.horizon, model.dim
    s = model.support_size()
    if s == 0:
        raise SupportTooLarge(f"{model.kind} has no finite support")
    if n > n_max or s**n > ENUM_MAX_PATHS:
        raise SupportTooLarge(f"{s}^{n} paths exceeds the enumeration cap (n_max={n_max})")
    ledger = covariance_ledger(model)
    factors, _ = tail_factors(ledger)
    isq = linalg.inv_sqrtm(ledger.sigma)
    sums = np.zeros((1, d))
    prob = np.ones(1)
    acc = np.zeros(1)
    for k in range(1, n + 1):
        vals, probs = model.support(k, sums)
        third = np.linalg.norm(vals @ isq, axis=2) ** 3  # (B, s)
        acc = (acc[:, None] + factors[k - 1] * third).reshape(-1)
        prob = (prob[:, None] * probs).reshape(-1)
        sums = (sums[:, None, :] + vals).reshape(-1, d)
    emp = float(prob @ h.value(sums @ isq))
    z, w = standard_normal_grid(d)
    ref = float(h.value(z) @ w)
    bound = THREE_PI_8 * math.sqrt(d) * h.m2 * float(prob @ acc)
    res = EnumerationResult(emp, ref, abs(emp - ref), bound, len(prob))
    if check and not res.certified:
        from .errors import BoundViolated
        raise BoundViolated(f"exact discrepancy {res.discrepancy:.6g} exceeds bound {res.bound:.6g}")
    return res
