"""Dense symmetric linear algebra: eigendecompositions, matrix powers, norms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput, NotPositiveDefinite, NotSymmetric

SYM_RTOL = 1e-12
PD_RTOL = 1e-12


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray  # nondecreasing
    eigenvectors: np.ndarray  # columns orthonormal

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def _as_square(m) -> np.ndarray:
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("matrix has non-finite entries")
    return a


def symmetrize(m) -> np.ndarray:
    """Return (M + M^T)/2 after checking the asymmetry is within round-off."""
    a = _as_square(m)
    scale = np.linalg.norm(a)
    asym = np.linalg.norm(a - a.T)
    if scale > 0 and asym > SYM_RTOL * scale:
        raise NotSymmetric(f"relative asymmetry {asym / scale:.3e} exceeds {SYM_RTOL}")
    return 0.5 * (a + a.T)


def spectral_decompose(m) -> Spectrum:
    a = symmetrize(m)
    w, q = np.linalg.eigh(a)
    top = w[-1]
    if top <= 0 or w[0] <= PD_RTOL * top:
        raise NotPositiveDefinite(
            f"smallest eigenvalue {w[0]:.3e} not above {PD_RTOL:g} * largest ({top:.3e})"
        )
    return Spectrum(eigenvalues=w, eigenvectors=q)


def as_spd(m) -> np.ndarray:
    """Validate an SPD matrix and return its symmetrized copy."""
    spectral_decompose(m)
    return symmetrize(m)


def matrix_power(m, p: float) -> np.ndarray:
    s = spectral_decompose(m)
    q = s.eigenvectors
    out = (q * s.eigenvalues**p) @ q.T
    return 0.5 * (out + out.T)


def sqrtm(m) -> np.ndarray:
    return matrix_power(m, 0.5)


def inv_sqrtm(m) -> np.ndarray:
    return matrix_power(m, -0.5)


def norms(m) -> tuple[float, float, float]:
    """(operator, Frobenius, nuclear) norms of a real matrix."""
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("matrix has non-finite entries")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0:
        return 0.0, 0.0, 0.0
    return float(sv[0]), float(np.sqrt(np.sum(a * a))), float(np.sum(sv))


def op_norm(m) -> float:
    return norms(m)[0]


def lambda_min(m) -> float:
    return float(spectral_decompose(m).eigenvalues[0])


def lambda_max(m) -> float:
    return float(spectral_decompose(m).eigenvalues[-1])
