"""Low-rank adapter construction and algebra.

A DecomposedLayer pairs a frozen base matrix (full precision or quantized)
with a trainable rank-r adapter (A, B). Initializers cover the principal
singular-component split, the Gaussian/zero baseline, and window variants
built from medium or minor singular components. The forward pass, analytic
gradients, merging, and the lossless conversion of a trained adapter into a
delta on the original weights live here too.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import RandomSource, ShapeError, as_matrix, exact_svd, frobenius_norm


class InitStrategy(Enum):
    PRINCIPAL = "principal"
    MEDIUM = "medium"
    MINOR = "minor"
    GAUSSIAN_ZERO = "gaussian_zero"


@dataclass
class AdapterPair:
    """Trainable factors a (m x r) and b (r x n) with a scalar multiplier.

    scale defaults to 1 (alpha equal to the rank); it is stored explicitly
    so alpha != r configurations remain possible.
    """

    a: np.ndarray
    b: np.ndarray
    rank: int
    scale: float = 1.0

    def __post_init__(self):
        if self.a.shape[1] != self.rank or self.b.shape[0] != self.rank:
            raise ShapeError(
                f"adapter factor shapes {self.a.shape}, {self.b.shape} "
                f"inconsistent with rank {self.rank}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.a.shape[0], self.b.shape[1])

    def delta(self) -> np.ndarray:
        return self.scale * (self.a @ self.b)

    def copy(self) -> "AdapterPair":
        return AdapterPair(self.a.copy(), self.b.copy(), self.rank, self.scale)


@dataclass
class DecomposedLayer:
    """Frozen base (dense or quantized) plus a trainable adapter."""

    base: object  # np.ndarray or quant.QuantizedMatrix
    adapter: AdapterPair
    origin: str

    def __post_init__(self):
        if self.base.shape != self.adapter.shape:
            raise ShapeError(
                f"base shape {self.base.shape} != adapter shape {self.adapter.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.adapter.shape


def dense_base(layer: DecomposedLayer) -> np.ndarray:
    """The base as a dense matrix, dequantizing when needed."""
    if isinstance(layer.base, np.ndarray):
        return layer.base
    from .quant import dequantize
    return dequantize(layer.base)


def _check_rank(w: np.ndarray, r: int) -> None:
    if not 1 <= r <= min(w.shape):
        raise ValueError(f"rank {r} out of range for matrix of shape {w.shape}")


def pissa_init(w: np.ndarray, r: int) -> DecomposedLayer:
    """Split w into a rank-r principal adapter and a frozen residual base.

    A and B carry the square-root-weighted top singular vectors, so
    base + A B reproduces w exactly (up to floating point).
    """
    w = as_matrix(w)
    _check_rank(w, r)
    f = exact_svd(w)
    root = np.sqrt(f.s[:r])
    a = f.u[:, :r] * root
    b = root[:, None] * f.v[:, :r].T
    base = (f.u[:, r:] * f.s[r:]) @ f.v[:, r:].T
    return DecomposedLayer(base=base, adapter=AdapterPair(a, b, r), origin="pissa")


def lora_init(w: np.ndarray, r: int, rng: RandomSource) -> DecomposedLayer:
    """Gaussian A, zero B on top of the unchanged base.

    A entries are N(0, 1/r); with B zero the adapter contributes nothing at
    initialization, so the forward pass equals X w exactly.
    """
    w = as_matrix(w)
    _check_rank(w, r)
    m, n = w.shape
    a = rng.normal((m, r)) * np.sqrt(1.0 / r)
    b = np.zeros((r, n), dtype=np.float64)
    return DecomposedLayer(base=w.copy(), adapter=AdapterPair(a, b, r), origin="lora")


def _window(strategy: InitStrategy, k: int, r: int) -> tuple[int, int]:
    if strategy is InitStrategy.PRINCIPAL:
        return 0, r
    if strategy is InitStrategy.MEDIUM:
        start = (k - r) // 2
        return start, start + r
    if strategy is InitStrategy.MINOR:
        return k - r, k
    raise ValueError(f"no singular window for strategy {strategy}")


def variant_init(w: np.ndarray, r: int, strategy: InitStrategy) -> DecomposedLayer:
    """Adapter built from a chosen window of singular components.

    principal takes the top r indices, medium a centered window, minor the
    bottom r; the base holds the complementary components, so the sum always
    reconstructs w.
    """
    w = as_matrix(w)
    _check_rank(w, r)
    f = exact_svd(w)
    k = f.rank
    lo, hi = _window(strategy, k, r)
    if lo < 0 or hi > k:
        raise ValueError(f"singular window [{lo}, {hi}) exceeds spectrum size {k}")
    idx = np.arange(lo, hi)
    rest = np.concatenate([np.arange(0, lo), np.arange(hi, k)])
    root = np.sqrt(f.s[idx])
    a = f.u[:, idx] * root
    b = root[:, None] * f.v[:, idx].T
    base = (f.u[:, rest] * f.s[rest]) @ f.v[:, rest].T
    return DecomposedLayer(base=base, adapter=AdapterPair(a, b, r),
                           origin=strategy.value)


def forward(layer: DecomposedLayer, x: np.ndarray) -> np.ndarray:
    """Y = X base + scale (X A) B, dequantizing the base when needed."""
    x = as_matrix(x)
    if x.shape[1] != layer.shape[0]:
        raise ShapeError(f"input cols {x.shape[1]} != layer rows {layer.shape[0]}")
    p = layer.adapter
    return x @ dense_base(layer) + p.scale * ((x @ p.a) @ p.b)


def adapter_gradients(x: np.ndarray, d_y: np.ndarray,
                      adapter: AdapterPair) -> tuple[np.ndarray, np.ndarray]:
    """Analytic loss gradients of the adapter factors given dL/dY."""
    m, n = adapter.shape
    if x.shape[1] != m or d_y.shape[1] != n or x.shape[0] != d_y.shape[0]:
        raise ShapeError(
            f"gradient shapes x={x.shape}, dY={d_y.shape} inconsistent with "
            f"adapter {adapter.shape}")
    xt_dy = x.T @ d_y
    d_a = adapter.scale * (xt_dy @ adapter.b.T)
    d_b = adapter.scale * (adapter.a.T @ xt_dy)
    return d_a, d_b


def merge(layer: DecomposedLayer) -> np.ndarray:
    """Fold the adapter back into a plain dense matrix."""
    return dense_base(layer) + layer.adapter.delta()


def to_lora_delta(initial: AdapterPair,
                  trained: AdapterPair) -> tuple[np.ndarray, np.ndarray]:
    """Express the training update as a rank-2r delta on the original weights.

    Stacking [A' A] against [B'; -B] gives delta A delta B = A'B' - AB
    exactly, so the original w plus the delta matches the trained layer.
    """
    if initial.shape != trained.shape or initial.rank != trained.rank:
        raise ShapeError("initial and trained adapters must share dims and rank")
    if initial.scale != trained.scale:
        raise ValueError("initial and trained adapters must share the same scale")
    delta_a = np.hstack([trained.a, initial.a])
    delta_b = np.vstack([trained.b, -initial.b])
    return delta_a, delta_b


def reconstruction_error(w: np.ndarray, layer: DecomposedLayer) -> float:
    """Relative Frobenius distance between w and the merged layer."""
    w = as_matrix(w)
    if w.shape != layer.shape:
        raise ShapeError(f"shape mismatch {w.shape} vs {layer.shape}")
    return frobenius_norm(w - merge(layer)) / max(1.0, frobenius_norm(w))
