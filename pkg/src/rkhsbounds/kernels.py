"""Kernel evaluation and positive-definite linear algebra.

Everything downstream (envelope solves, reference bounds, experiments) goes
through the primitives here: squared-exponential kernel evaluation, Gram
matrices and cross-vectors, a jittered Cholesky factorization, the power
function, and the rank-one augmentation identity used to extend a
factorization by one extra point without refactorizing.

Matrix inverses are never formed explicitly; all quadratic forms and gains
are computed with triangular solves against the Cholesky factor.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular


class NumericalDegeneracyError(RuntimeError):
    """Factorization or schur-complement machinery hit its numerical floor."""


class DegenerateAugmentationError(NumericalDegeneracyError):
    """Augmenting a kernel factorization with a point too close to the data.

    Callers should fall back to the on-data formulation instead of working
    with the (near-singular) augmented matrix.
    """


_SUPPORTED_FAMILIES = ("squared-exponential",)


@dataclass(frozen=True)
class KernelSpec:
    """Positive-definite kernel definition.

    Only the squared-exponential family is supported:

        k(x, x') = exp(-||x - x'||^2 / (2 * lengthscale^2))

    which is symmetric, has k(x, x) = 1, and takes values in (0, 1].
    """

    lengthscale: float
    family: str = "squared-exponential"

    def __post_init__(self):
        if self.family not in _SUPPORTED_FAMILIES:
            raise ValueError(
                f"unsupported kernel family {self.family!r}; "
                f"available: {_SUPPORTED_FAMILIES}"
            )
        if not np.isfinite(self.lengthscale) or self.lengthscale <= 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")


def _as_points(x, name="points"):
    """Coerce to a (m, n) float array of points; 1-D input is one point per row."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"{name} must be at most 2-D, got shape {arr.shape}")
    return arr


def _as_single_point(x, dim, name="x"):
    arr = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if arr.size != dim:
        raise ValueError(f"{name} has dimension {arr.size}, expected {dim}")
    return arr


def eval_kernel(spec: KernelSpec, x, xp) -> float:
    """Evaluate k(x, x') for two points of equal dimension."""
    xa = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    xb = np.atleast_1d(np.asarray(xp, dtype=float)).ravel()
    if xa.size != xb.size:
        raise ValueError(f"dimension mismatch: {xa.size} vs {xb.size}")
    sq = float(np.sum((xa - xb) ** 2))
    return float(np.exp(-sq / (2.0 * spec.lengthscale**2)))


def kernel_matrix(spec: KernelSpec, X) -> np.ndarray:
    """Gram matrix of kernel evaluations over the rows of ``X``.

    The result is exactly symmetric with unit diagonal.
    """
    pts = _as_points(X, "X")
    if pts.shape[0] == 0:
        raise ValueError("X must contain at least one point")
    diff = pts[:, None, :] - pts[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    K = np.exp(-sq / (2.0 * spec.lengthscale**2))
    np.fill_diagonal(K, 1.0)
    return K


def kernel_vector(spec: KernelSpec, X, x) -> np.ndarray:
    """Column vector (k(x, x_1), ..., k(x, x_d)) for the rows x_i of ``X``."""
    pts = _as_points(X, "X")
    q = _as_single_point(x, pts.shape[1])
    sq = np.sum((pts - q[None, :]) ** 2, axis=1)
    return np.exp(-sq / (2.0 * spec.lengthscale**2))


def kernel_cross(spec: KernelSpec, X, Q) -> np.ndarray:
    """Cross-kernel matrix of shape (d, m): entry (i, j) = k(x_i, q_j)."""
    pts = _as_points(X, "X")
    qs = _as_points(Q, "Q")
    if qs.shape[1] != pts.shape[1]:
        raise ValueError(
            f"dimension mismatch: data dim {pts.shape[1]}, query dim {qs.shape[1]}"
        )
    diff = pts[:, None, :] - qs[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return np.exp(-sq / (2.0 * spec.lengthscale**2))


@dataclass(frozen=True)
class JitterPolicy:
    """Escalation ladder for diagonal jitter, relative to the mean diagonal.

    The ladder is tried in order (0 first); the cap is
    ``max_relative * trace/size``.  Failing at the cap raises
    :class:`NumericalDegeneracyError`.
    """

    ladder: tuple = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)
    max_relative: float = 1e-6
    symmetry_tol: float = 1e-12


DEFAULT_JITTER = JitterPolicy()


@dataclass(frozen=True)
class PsdFactorization:
    """Cholesky factorization of a symmetric PSD matrix plus diagonal jitter.

    ``lower @ lower.T == M + jitter * I`` up to roundoff.
    """

    lower: np.ndarray
    jitter: float
    size: int

    def solve(self, b) -> np.ndarray:
        """Solve (M + jitter I) u = b."""
        return cho_solve((self.lower, True), np.asarray(b, dtype=float))

    def solve_lower(self, b) -> np.ndarray:
        """Solve L u = b (half solve; u'u gives the quadratic form)."""
        return solve_triangular(self.lower, np.asarray(b, dtype=float), lower=True)

    def quad_form(self, c) -> float:
        """c' (M + jitter I)^{-1} c via a triangular half solve."""
        w = self.solve_lower(c)
        return float(w @ w)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def factorize_psd(M, policy: JitterPolicy = DEFAULT_JITTER) -> PsdFactorization:
    """Cholesky-factorize a symmetric PSD matrix, escalating jitter as needed.

    Raises
    ------
    ValueError
        If ``M`` is not symmetric within ``policy.symmetry_tol`` (relative).
    NumericalDegeneracyError
        If the factorization still fails at the jitter cap.
    """
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))))
    asym = float(np.max(np.abs(A - A.T)))
    if asym > policy.symmetry_tol * scale:
        raise ValueError(
            f"matrix is not symmetric (relative asymmetry {asym / scale:.3e})"
        )
    n = A.shape[0]
    mean_diag = float(np.trace(A)) / n
    cap = policy.max_relative * mean_diag
    tried = []
    for rung in policy.ladder:
        jitter = rung * mean_diag if rung > 0 else 0.0
        if jitter > cap * (1 + 1e-15):
            break
        tried.append(jitter)
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(n) if jitter else A)
            return PsdFactorization(lower=L, jitter=jitter, size=n)
        except np.linalg.LinAlgError:
            continue
    raise NumericalDegeneracyError(
        f"Cholesky failed for all jitter values up to the cap {cap:.3e} "
        f"(tried {tried})"
    )


# Count of power-function radicands clamped from a (roundoff) negative to zero.
_clamp_lock = threading.Lock()
_clamp_events = 0


def power_clamp_events() -> int:
    """Number of times a negative power-function radicand was clamped to 0."""
    return _clamp_events


def _record_clamps(count: int):
    global _clamp_events
    if count:
        with _clamp_lock:
            _clamp_events += int(count)


def power_function(spec: KernelSpec, X, fact: PsdFactorization, x) -> float:
    """Pointwise interpolation-error quantity sqrt(k(x,x) - K_xX K_XX^-1 K_Xx).

    ``fact`` must factorize the Gram matrix of ``X`` under ``spec``.  The
    radicand is clamped at zero (the analytic value is nonnegative; roundoff
    may push it slightly below) and each clamp is recorded.
    """
    kx = kernel_vector(spec, X, x)
    w = fact.solve_lower(kx)
    r = 1.0 - float(w @ w)  # k(x,x) = 1 for the squared-exponential family
    if r < 0:
        _record_clamps(1)
        r = 0.0
    return float(np.sqrt(r))


def power_function_batch(spec: KernelSpec, X, fact: PsdFactorization, Q) -> np.ndarray:
    """Vectorized :func:`power_function` over the rows of ``Q``."""
    KXQ = kernel_cross(spec, X, Q)
    W = fact.solve_lower(KXQ)
    r = 1.0 - np.einsum("ij,ij->j", W, W)
    _record_clamps(int(np.sum(r < 0)))
    return np.sqrt(np.maximum(r, 0.0))


def block_inverse(A_fact: PsdFactorization, B, c: float,
                  degeneracy_tol: float = 1e-12):
    """Schur complement and gain for a one-point bordered PSD matrix.

    For the bordered matrix [[A, B], [B', c]] returns ``(schur, gain)`` with
    ``schur = c - B' A^-1 B`` and ``gain = A^-1 B``, both computed through
    triangular solves.  Callers assemble the bordered inverse as

        [[A^-1 + gain gain'/schur, -gain/schur],
         [-gain'/schur,            1/schur   ]].

    Raises
    ------
    DegenerateAugmentationError
        If ``schur <= degeneracy_tol * c``: the border is numerically inside
        the span of A and the bordered matrix cannot be inverted reliably.
    """
    b = np.asarray(B, dtype=float).ravel()
    gain = A_fact.solve(b)
    schur = float(c) - float(b @ gain)
    if schur <= degeneracy_tol * float(c):
        raise DegenerateAugmentationError(
            f"schur complement {schur:.3e} <= {degeneracy_tol:.1e} * diagonal "
            f"{c:.3e}: query too close to the data sites"
        )
    return schur, gain


def augment_factorization(fact: PsdFactorization, B, c: float,
                          degeneracy_tol: float = 1e-12) -> PsdFactorization:
    """Extend a Cholesky factorization by one bordered row/column.

    Given L with L L' = A, builds the factor of [[A, B], [B', c]] as

        [[L, 0], [v', sqrt(schur)]],  v = L^-1 B,

    in O(size^2).  Degeneracy handling matches :func:`block_inverse`.
    """
    b = np.asarray(B, dtype=float).ravel()
    v = fact.solve_lower(b)
    schur = float(c) - float(v @ v)
    if schur <= degeneracy_tol * float(c):
        raise DegenerateAugmentationError(
            f"schur complement {schur:.3e} <= {degeneracy_tol:.1e} * diagonal "
            f"{c:.3e}: query too close to the data sites"
        )
    n = fact.size
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = fact.lower
    L[n, :n] = v
    L[n, n] = np.sqrt(schur)
    return PsdFactorization(lower=L, jitter=fact.jitter, size=n + 1)
