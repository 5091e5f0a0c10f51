"""Dense linear algebra and seeded randomness used by every other module.

Matrices are plain 2-D float64 numpy arrays in C order; `as_matrix` is the
boundary validator that public operations apply to their inputs. Randomness
flows exclusively through `SeededRng`, a (seed, stream) pair that maps to an
independent PCG64 stream, so that every component of a simulation can be
re-derived from one experiment seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DomainError, ShapeError, SingularMatrixError

_MASK64 = (1 << 64) - 1
_TINY = float(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class SeededRng:
    """Deterministic random stream identified by (seed, stream).

    Equal pairs produce identical draw sequences on every platform. Distinct
    stream ids derived from one seed give statistically independent streams,
    which is how per-client and per-round randomness is kept uncoupled.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed & _MASK64, spawn_key=(self.stream & _MASK64,)
        )
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, offset: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + offset)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate `a` as a finite 2-D float64 array and return it (C order)."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got {m.ndim}-D")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise DomainError("matmul produced non-finite entries")
    return out


def ridge_solve(k, y, lam: float) -> np.ndarray:
    """Solve (k + lam*I) alpha = y for symmetric positive definite k + lam*I.

    Uses a Cholesky factorization rather than an explicit inverse. `lam` may
    be zero when `k` itself is positive definite.
    """
    k = as_matrix(k, "k")
    y = as_matrix(y, "y")
    if k.shape[0] != k.shape[1]:
        raise ShapeError(f"k must be square, got {k.shape}")
    if y.shape[0] != k.shape[0]:
        raise ShapeError(f"y rows {y.shape[0]} != k order {k.shape[0]}")
    if lam < 0:
        raise DomainError(f"lambda must be nonnegative, got {lam}")
    a = k.copy()
    if lam:
        a[np.diag_indices_from(a)] += lam
    try:
        factor = cho_factor(a, lower=True, check_finite=False)
    except LinAlgError as e:
        raise SingularMatrixError(f"system is not positive definite: {e}") from e
    return cho_solve(factor, y, check_finite=False)


def rbf_kernel(a, b, gamma: float) -> np.ndarray:
    """Gaussian kernel matrix: entry (i, j) = exp(-gamma * ||a_i - b_j||^2).

    When `a is b` the Gram term is symmetrized and the diagonal distance is
    pinned to zero, so the result is bit-exactly symmetric with unit diagonal.
    Entries are clamped to stay strictly positive (underflow maps to the
    smallest normal float), keeping the output inside (0, 1].
    """
    same = a is b
    a = as_matrix(a, "a")
    b = a if same else as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    if same:
        g = a @ a.T
        g = (g + g.T) * 0.5
        sq = np.diag(g).copy()
        d2 = sq[:, None] + sq[None, :] - 2.0 * g
        np.fill_diagonal(d2, 0.0)
    else:
        sqa = np.einsum("ij,ij->i", a, a)
        sqb = np.einsum("ij,ij->i", b, b)
        d2 = sqa[:, None] + sqb[None, :] - 2.0 * (a @ b.T)
    np.clip(d2, 0.0, None, out=d2)
    out = np.exp(-gamma * d2)
    np.maximum(out, _TINY, out=out)
    return out


def rbf_gamma(features) -> float:
    """Default kernel bandwidth: 1 / (2 * d * var) for feature matrix rows.

    `var` is the mean per-feature variance, floored so constant data still
    yields a finite positive gamma.
    """
    x = as_matrix(features, "features")
    d = x.shape[1]
    var = float(np.mean(np.var(x, axis=0)))
    var = max(var, 1e-12)
    return 1.0 / (2.0 * d * var)
