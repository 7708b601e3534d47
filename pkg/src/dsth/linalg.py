"""Dense linear-algebra helpers used by the optimizer and hash learning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NumericalError(ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


@dataclass(frozen=True)
class ThinSvd:
    """``m ~= left @ diag(singulars) @ right.T`` restricted to the numerical rank."""

    left: np.ndarray
    singulars: np.ndarray
    right: np.ndarray

    @property
    def rank(self) -> int:
        return self.singulars.size


def thin_svd(m, rank_tol: float = 1e-10) -> ThinSvd:
    """Thin SVD keeping singular values above ``rank_tol * sigma_max``."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericalError("thin_svd: non-finite input")
    if m.size == 0:
        return ThinSvd(np.zeros((m.shape[0], 0)), np.zeros(0), np.zeros((m.shape[1], 0)))
    p, s, qt = np.linalg.svd(m, full_matrices=False)
    if s[0] == 0.0:
        r = 0
    else:
        r = int(np.count_nonzero(s > rank_tol * s[0]))
    return ThinSvd(p[:, :r], s[:r], qt[:r].T)


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive-definite ``a`` via Cholesky."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve_spd: a must be square, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * scale:
        raise ValueError("solve_spd: a is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(a, lower=False, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "solve_spd: matrix is not positive definite; increase the ridge weight eta"
        ) from exc
    return scipy.linalg.cho_solve(factor, b)


def orthonormal_complement(basis, also_orthogonal_to=None, k: int = 1, seed=0) -> np.ndarray:
    """Return ``k`` orthonormal columns orthogonal to ``basis`` (and a vector).

    Random Gaussian candidates are orthogonalised with two passes of
    classical Gram-Schmidt against the basis, the optional extra vector and
    the columns accepted so far.  A candidate that collapses numerically is
    redrawn.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim == 1:
        basis = basis[:, None]
    m = basis.shape[0]
    constraints = [basis]
    available = m - basis.shape[1]
    if also_orthogonal_to is not None:
        v = np.asarray(also_orthogonal_to, dtype=np.float64).reshape(m)
        for _ in range(2):
            v = v - basis @ (basis.T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-10 * max(1.0, np.linalg.norm(also_orthogonal_to)):
            constraints.append((v / norm)[:, None])
            available -= 1
    if k < 0 or k > available:
        raise ValueError(
            f"orthonormal_complement: requested {k} columns but only "
            f"{available} complement dimensions exist"
        )
    rng = np.random.default_rng(seed)
    out = np.empty((m, k))
    fixed = np.hstack(constraints)
    done = 0
    attempts = 0
    while done < k:
        attempts += 1
        if attempts > 100 * (k + 1):
            raise NumericalError("orthonormal_complement: failed to find independent candidates")
        g = rng.standard_normal(m)
        g0 = np.linalg.norm(g)
        for _ in range(2):
            g = g - fixed @ (fixed.T @ g)
            g = g - out[:, :done] @ (out[:, :done].T @ g)
        norm = np.linalg.norm(g)
        if norm < 1e-8 * g0:
            continue
        out[:, done] = g / norm
        done += 1
    return out


def center_columns(m) -> np.ndarray:
    """Subtract each row's mean: ``m - (1/N) (m 1) 1^T``."""
    m = np.asarray(m, dtype=np.float64)
    return m - m.mean(axis=1, keepdims=True)
