"""Dense matrix kernels: products, norms, thin QR, exact and randomized SVD.

All routines operate on 2-D float64 numpy arrays ("matrices") and are pure
functions of their inputs. The exact SVD is the accuracy reference for the
rest of the package; the randomized SVD trades accuracy for speed via
Gaussian range finding with subspace iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRNG_NAME = "pcg64-v1"


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class NumericalError(RuntimeError):
    """A numerical routine failed to reach its accuracy contract."""


def as_matrix(data) -> np.ndarray:
    """Validate and convert input to a 2-D float64 matrix.

    Rejects non-2-D shapes and any NaN/Inf entry.
    """
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.size and not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class RandomSource:
    """Deterministic stream of standard-normal samples.

    Identical seeds yield bit-identical streams. The underlying generator
    (numpy PCG64) is named by ``PRNG_NAME`` so reports can record it.
    """

    seed: int
    algorithm: str = PRNG_NAME

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def spawn(self, index: int) -> "RandomSource":
        """Derive an independent child stream (splitmix64 of seed + index)."""
        return RandomSource(_splitmix64((self.seed + index) & 0xFFFFFFFFFFFFFFFF))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


@dataclass
class SvdFactors:
    """Economy SVD triple: u (m x k), s (k,) descending, v (n x k)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T

    def truncate(self, r: int) -> "SvdFactors":
        return SvdFactors(self.u[:, :r].copy(), self.s[:r].copy(), self.v[:, :r].copy())


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with an explicit shape check."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def nuclear_norm(m: np.ndarray) -> float:
    """Sum of singular values (trace norm)."""
    return float(np.sum(exact_svd(m).s))


def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Force the largest-magnitude entry of each u column non-negative;
    # propagate the flip to v so the product is unchanged.
    if u.shape[1] == 0:
        return u, v
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def exact_svd(w: np.ndarray) -> SvdFactors:
    """Economy SVD with descending singular values and a fixed sign convention.

    Reconstruction is accurate to 1e-10 relative; failure to meet that
    raises NumericalError with the achieved residual.
    """
    w = as_matrix(w)
    try:
        u, s, vt = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails on near-degenerate spectra; the slower
        # Jacobi-free gesvd driver is far more robust.
        from scipy import linalg as sla
        try:
            u, s, vt = sla.svd(w, full_matrices=False, lapack_driver="gesvd")
        except sla.LinAlgError as exc:
            raise NumericalError(f"SVD did not converge: {exc}") from exc
    u, v = _fix_signs(u, vt.T)
    factors = SvdFactors(u, s, v)
    resid = frobenius_norm(factors.reconstruct() - w) / max(1.0, frobenius_norm(w))
    if resid > 1e-10:
        raise NumericalError(f"SVD reconstruction residual {resid:.3e} exceeds 1e-10")
    return factors


def qr_thin(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR via Householder reflections; requires rows >= cols.

    An exactly-zero column produces a zero reflector (no pivoting), leaving
    a zero on the corresponding diagonal of r.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    if rows < cols:
        raise ShapeError(f"qr_thin needs rows >= cols, got {m.shape}")
    r = m.copy()
    q = np.eye(rows, dtype=np.float64)
    for j in range(cols):
        x = r[j:, j]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += np.copysign(norm_x, x[0]) if x[0] != 0 else norm_x
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            continue
        v /= vnorm
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        q[:, j:] -= 2.0 * np.outer(q[:, j:] @ v, v)
    return q[:, :cols], np.triu(r[:cols, :])


def randomized_svd(w: np.ndarray, r: int, niter: int, rng: RandomSource,
                   oversample: int = 10) -> SvdFactors:
    """Truncated rank-r SVD via Gaussian range finding plus subspace iteration.

    ``niter`` subspace iterations refine the range basis; larger values give
    smaller approximation error at higher cost. Deterministic given ``rng``.
    """
    w = as_matrix(w)
    m, n = w.shape
    k_max = min(m, n)
    if not 1 <= r <= k_max:
        raise ValueError(f"rank {r} out of range for {w.shape}")
    if niter < 0:
        raise ValueError("niter must be non-negative")
    k = min(k_max, r + oversample)
    omega = rng.normal((n, k))
    q, _ = qr_thin(w @ omega)
    for _ in range(niter):
        z, _ = qr_thin(w.T @ q)
        q, _ = qr_thin(w @ z)
    small = exact_svd(q.T @ w)
    u = q @ small.u
    u, v = _fix_signs(u[:, :r], small.v[:, :r])
    return SvdFactors(u, small.s[:r].copy(), v)
