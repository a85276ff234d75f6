"""4-bit NormalFloat block quantization and quantized adapter initializers.

The 16-level codebook is built from standard-normal quantiles and applied
block-wise with absmax scaling. On top of it sit the three quantized
initializers (direct quantization with a zero adapter, alternating
error-matrix SVD, and principal-component extraction before quantization)
plus the nuclear-norm error metrics used to compare them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .linalg import (RandomSource, as_matrix, exact_svd, frobenius_norm,
                     nuclear_norm)

# Quantile range endpoint: 1 - (1/32 + 1/30)/2, the NormalFloat lineage default.
_QUANTILE_OFFSET = 1.0 - (1.0 / 32 + 1.0 / 30) / 2


@dataclass(frozen=True)
class Nf4Codebook:
    """Sorted 16-level codebook in [-1, 1] containing -1, 0, and 1 exactly."""

    levels: tuple

    def __post_init__(self):
        lv = np.asarray(self.levels)
        if lv.shape != (16,):
            raise ValueError("codebook must have exactly 16 levels")
        if not (np.diff(lv) > 0).all():
            raise ValueError("codebook levels must be strictly increasing")
        for required in (-1.0, 0.0, 1.0):
            if required not in lv:
                raise ValueError(f"codebook must contain {required} exactly")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)

    @property
    def max_gap(self) -> float:
        return float(np.max(np.diff(self.as_array())))


def build_nf4_codebook() -> Nf4Codebook:
    """Build the 16-level NormalFloat codebook from standard-normal quantiles.

    Eight evenly spaced quantiles cover the negative side and nine the
    non-negative side (both including zero, deduplicated); dividing by the
    largest magnitude pins the endpoints at exactly -1 and 1.
    """
    pos = stats.norm.ppf(np.linspace(0.5, _QUANTILE_OFFSET, 9))
    neg = -stats.norm.ppf(np.linspace(_QUANTILE_OFFSET, 0.5, 8))
    levels = np.concatenate([neg[:-1], pos]) / pos[-1]
    levels[len(neg) - 1] = 0.0  # exact zero (ppf(0.5) may be -0.0)
    return Nf4Codebook(tuple(levels.tolist()))


@dataclass(frozen=True)
class QuantConfig:
    block_size: int = 64
    codebook: Nf4Codebook = field(default_factory=build_nf4_codebook)

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


@dataclass
class QuantizedMatrix:
    """Block-quantized matrix: packed 4-bit codes plus per-block absmax scales."""

    rows: int
    cols: int
    block_size: int
    codes: np.ndarray    # uint8, two 4-bit codes per byte, low nibble first
    scales: np.ndarray   # float64, one per block
    levels: np.ndarray   # float64 codebook snapshot

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def unpacked_codes(self) -> np.ndarray:
        total = self.rows * self.cols
        lo = self.codes & 0x0F
        hi = self.codes >> 4
        flat = np.empty(self.codes.size * 2, dtype=np.uint8)
        flat[0::2] = lo
        flat[1::2] = hi
        return flat[:total]


def _pack(codes: np.ndarray) -> np.ndarray:
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def quantize(m: np.ndarray, cfg: QuantConfig | None = None) -> QuantizedMatrix:
    """Block-wise nearest-level quantization with absmax scaling.

    Ties between two equally near levels resolve toward the smaller index.
    A block of zeros gets scale 0 and zero-level codes.
    """
    cfg = cfg or QuantConfig()
    m = as_matrix(m)
    flat = m.ravel()
    bs = cfg.block_size
    nblocks = math.ceil(flat.size / bs) if flat.size else 0
    levels = cfg.codebook.as_array()
    zero_idx = int(np.where(levels == 0.0)[0][0])
    scales = np.zeros(nblocks, dtype=np.float64)
    codes = np.full(flat.size, zero_idx, dtype=np.uint8)
    for b in range(nblocks):
        block = flat[b * bs:(b + 1) * bs]
        scale = float(np.max(np.abs(block))) if block.size else 0.0
        scales[b] = scale
        if scale == 0.0:
            continue
        dist = np.abs(block[:, None] / scale - levels[None, :])
        codes[b * bs:b * bs + block.size] = np.argmin(dist, axis=1).astype(np.uint8)
    return QuantizedMatrix(m.shape[0], m.shape[1], bs, _pack(codes), scales, levels)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    """Map codes back through the codebook and per-block scales."""
    total = q.rows * q.cols
    values = q.levels[q.unpacked_codes()]
    block_scale = np.repeat(q.scales, q.block_size)[:total]
    return (values * block_scale).reshape(q.rows, q.cols)


def quantization_error_bound(q: QuantizedMatrix) -> np.ndarray:
    """Per-entry worst-case rounding error: block scale times half the widest gap."""
    total = q.rows * q.cols
    half_gap = np.max(np.diff(q.levels)) / 2.0
    return (np.repeat(q.scales, q.block_size)[:total] * half_gap).reshape(q.rows, q.cols)


def qlora_error(w: np.ndarray, cfg: QuantConfig | None = None) -> float:
    """Nuclear norm of the direct-quantization error matrix."""
    cfg = cfg or QuantConfig()
    return nuclear_norm(w - dequantize(quantize(w, cfg)))


def _principal_factors(w: np.ndarray, r: int):
    # Rank-r adapter pair from the top singular triplets, square-root split.
    f = exact_svd(w).truncate(r)
    root = np.sqrt(f.s)
    return f.u * root, root[:, None] * f.v.T


def qlora_init(w: np.ndarray, r: int, rng: RandomSource,
               cfg: QuantConfig | None = None):
    """Quantize the base directly; Gaussian A, zero B (the zero-adapter baseline)."""
    from .adapter import AdapterPair, DecomposedLayer
    cfg = cfg or QuantConfig()
    w = as_matrix(w)
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} out of range for {w.shape}")
    a = rng.normal((m, r)) * np.sqrt(1.0 / r)
    b = np.zeros((r, n), dtype=np.float64)
    pair = AdapterPair(a=a, b=b, rank=r)
    return DecomposedLayer(base=quantize(w, cfg), adapter=pair, origin="qlora")


def qpissa_init(w: np.ndarray, r: int, T: int = 1,
                cfg: QuantConfig | None = None):
    """Principal-component adapter with a quantized residual base.

    T = 1 takes the principal factors of w and quantizes w - AB. Further
    iterations alternate: refit (A, B) from the SVD of w minus the
    dequantized base, then re-quantize w - AB.
    """
    from .adapter import AdapterPair, DecomposedLayer
    cfg = cfg or QuantConfig()
    w = as_matrix(w)
    if not 1 <= r <= min(w.shape):
        raise ValueError(f"rank {r} out of range for {w.shape}")
    if T < 1:
        raise ValueError("T must be >= 1")
    a, b = _principal_factors(w, r)
    base = quantize(w - a @ b, cfg)
    for _ in range(T - 1):
        a, b = _principal_factors(w - dequantize(base), r)
        base = quantize(w - a @ b, cfg)
    pair = AdapterPair(a=a, b=b, rank=r)
    return DecomposedLayer(base=base, adapter=pair, origin="qpissa")


def loftq_init(w: np.ndarray, r: int, T: int = 1,
               cfg: QuantConfig | None = None):
    """Alternating quantization / error-matrix SVD initialization.

    Starts from the directly quantized base and fits the adapter to the
    quantization error; further iterations re-quantize w - AB before
    refitting.
    """
    from .adapter import AdapterPair, DecomposedLayer
    cfg = cfg or QuantConfig()
    w = as_matrix(w)
    if not 1 <= r <= min(w.shape):
        raise ValueError(f"rank {r} out of range for {w.shape}")
    if T < 1:
        raise ValueError("T must be >= 1")
    base = quantize(w, cfg)
    a, b = _principal_factors(w - dequantize(base), r)
    for _ in range(T - 1):
        base = quantize(w - a @ b, cfg)
        a, b = _principal_factors(w - dequantize(base), r)
    pair = AdapterPair(a=a, b=b, rank=r)
    return DecomposedLayer(base=base, adapter=pair, origin="loftq")


def error_reduction_ratio(w: np.ndarray, layer, cfg: QuantConfig | None = None) -> float:
    """Percentage decrease in nuclear quantization error vs direct quantization.

    Positive means the layer's base+adapter beats quantizing w outright;
    the zero-adapter baseline yields exactly 0.
    """
    from .adapter import merge
    cfg = cfg or QuantConfig()
    denom = qlora_error(w, cfg)
    if denom == 0.0:
        raise ZeroDivisionError("direct quantization error is zero; ratio undefined")
    err = nuclear_norm(w - merge(layer))
    return (1.0 - err / denom) * 100.0


@dataclass
class QuantReport:
    """Error summary for one quantized initialization."""

    method: str
    rank: int
    iters: int
    nuclear_error: float
    frobenius_error: float
    reduction_ratio_percent: float


def quant_report(w: np.ndarray, layer, cfg: QuantConfig | None = None) -> QuantReport:
    from .adapter import merge
    cfg = cfg or QuantConfig()
    err_matrix = w - merge(layer)
    return QuantReport(
        method=layer.origin,
        rank=layer.adapter.rank,
        iters=getattr(layer, "iters", 0),
        nuclear_error=nuclear_norm(err_matrix),
        frobenius_error=frobenius_norm(err_matrix),
        reduction_ratio_percent=error_reduction_ratio(w, layer, cfg),
    )


_DOF_GRID = tuple(range(1, 31)) + (math.inf,)


def distribution_diagnostics(m: np.ndarray) -> tuple[float, float]:
    """Fit the entry distribution: (sample std, best Student-t dof).

    The dof is chosen by profile likelihood over a fixed grid with the scale
    matched to the sample variance (falling back to the raw std where the
    t variance is undefined). A constant matrix reports std 0 and the grid
    maximum (infinity, i.e. Gaussian).
    """
    x = as_matrix(m).ravel()
    if x.size < 2:
        raise ValueError("need at least 2 entries")
    std = float(np.std(x, ddof=1))
    if std == 0.0:
        return 0.0, math.inf
    centered = x - np.mean(x)
    best_dof, best_ll = math.inf, -math.inf
    for dof in _DOF_GRID:
        if dof is math.inf:
            ll = float(np.sum(stats.norm.logpdf(centered, scale=std)))
        else:
            scale = std * math.sqrt((dof - 2) / dof) if dof > 2 else std
            ll = float(np.sum(stats.t.logpdf(centered, df=dof, scale=scale)))
        if ll > best_ll:
            best_ll, best_dof = ll, dof
    return std, float(best_dof)
