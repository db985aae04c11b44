"""Dense symmetric linear algebra.

Cholesky with jitter escalation, triangular solves, log-determinants, a
cyclic Jacobi eigensolver and spectral matrix functions. Everything works on
plain ``numpy`` arrays; results are never mutated after they are returned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    InputError,
    NotPositiveDefinite,
    SingularForNegativePower,
)

JITTER_SCHEDULE = (0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2)
SYMMETRY_TOL = 1e-10
PINV_RTOL = 1e-10


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``a + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]


@dataclass(frozen=True)
class EigDecomp:
    """Eigenvalues in ascending order with orthonormal eigenvector columns."""

    values: np.ndarray
    vectors: np.ndarray

    def apply(self, fvals: np.ndarray) -> np.ndarray:
        """Return ``V diag(fvals) V^T``."""
        out = (self.vectors * fvals) @ self.vectors.T
        return 0.5 * (out + out.T)


def as_symmetric(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise InputError(f"{name} is not symmetric")
    return a


def cholesky(a, schedule=JITTER_SCHEDULE) -> CholFactor:
    """Factor ``a + j I`` for the first jitter ``j`` in ``schedule`` that works.

    Raises
    ------
    NotPositiveDefinite
        If every jitter level fails.
    """
    a = as_symmetric(a)
    n = a.shape[0]
    eye = np.eye(n)
    for jitter in schedule:
        try:
            lower = np.linalg.cholesky(a + jitter * eye if jitter else a)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(lower)):
            return CholFactor(lower=lower, jitter_used=float(jitter))
    raise NotPositiveDefinite(
        f"matrix of size {n} is not positive definite even with jitter {schedule[-1]:g}"
    )


def solve_chol(f: CholFactor, b) -> np.ndarray:
    """Solve ``(A + jI) x = b`` given the factor of ``A + jI``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.n:
        raise DimensionMismatch(f"factor has size {f.n}, right-hand side has {b.shape[0]} rows")
    z = solve_triangular(f.lower, b, lower=True, check_finite=False)
    return solve_triangular(f.lower.T, z, lower=False, check_finite=False)


def chol_inverse(f: CholFactor) -> np.ndarray:
    inv = solve_chol(f, np.eye(f.n))
    return 0.5 * (inv + inv.T)


def logdet(f: CholFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings that cover every (p, q) exactly once over n-1 rounds (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def sym_eig(a, eps: float = 1e-17) -> EigDecomp:
    """Eigendecomposition by cyclic Jacobi rotations.

    Rotations on disjoint index pairs commute, so each round of a
    round-robin schedule is applied at once as a single orthogonal
    similarity transform. A pair is skipped once ``|a_pq|`` is below
    ``eps`` relative to the Frobenius norm; the sweep loop ends when a full
    sweep rotates nothing.

    Raises
    ------
    ConvergenceFailure
        If rotations are still needed after ``100 * n`` sweeps.
    """
    a = as_symmetric(a)
    n = a.shape[0]
    if n == 0:
        return EigDecomp(np.zeros(0), np.zeros((0, 0)))
    if n == 1:
        return EigDecomp(a.diagonal().copy(), np.eye(1))

    m = n + (n % 2)
    work = np.zeros((m, m))
    work[:n, :n] = 0.5 * (a + a.T)
    vecs = np.eye(m)
    rounds = _round_robin(m)
    floor = eps * np.linalg.norm(work)

    for _ in range(100 * n):
        rotated = False
        for p, q in rounds:
            apq = work[p, q]
            active = np.abs(apq) > floor
            if not np.any(active):
                continue
            rotated = True
            p, q, apq = p[active], q[active], apq[active]
            theta = (work[q, q] - work[p, p]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 1.0, theta)
            t = np.sign(safe) / (np.abs(safe) + np.sqrt(safe * safe + 1.0))
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(m)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            work = rot.T @ work @ rot
            work = 0.5 * (work + work.T)
            vecs = vecs @ rot
        if not rotated:
            break
    else:
        raise ConvergenceFailure(f"Jacobi iteration did not converge for n={n}")

    # a padding row/column is never rotated, so the leading block is exact
    values = np.diag(work)[:n].copy()
    vectors = vecs[:n, :n].copy()
    order = np.argsort(values, kind="stable")
    return EigDecomp(values[order], vectors[:, order])


def matrix_function(a, f: str, t: float | None = None) -> np.ndarray:
    """Apply a scalar map to a symmetric matrix through its spectrum.

    ``f`` is one of ``"exp"``, ``"cos"``, ``"pow"`` (with exponent ``t``)
    or ``"pinv"``.
    """
    eig = sym_eig(a)
    return eig.apply(spectral_map(eig.values, f, t))


def spectral_map(lam: np.ndarray, f: str, t: float | None = None) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if f == "exp":
        return np.exp(lam)
    if f == "cos":
        return np.cos(lam)
    if f == "pinv":
        scale = float(np.max(np.abs(lam))) if lam.size else 0.0
        out = np.zeros_like(lam)
        nz = np.abs(lam) > PINV_RTOL * scale
        out[nz] = 1.0 / lam[nz]
        return out
    if f == "pow":
        if t is None:
            raise InputError("pow requires an exponent")
        if t < 0 and np.any(lam <= 1e-10):
            raise SingularForNegativePower(
                f"eigenvalue {lam.min():.3g} too small for negative power {t}"
            )
        if float(t).is_integer():
            return lam ** int(t)
        if np.any(lam < 0):
            raise InputError("fractional power of a matrix with negative eigenvalues")
        return lam**t
    raise InputError(f"unknown matrix function {f!r}")


def kron(a, b) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` equals ``a[i, j] * b``."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
