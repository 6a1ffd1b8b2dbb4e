"""Pairwise mutual-information affinity and the density weights.

Mutual information between signal dimensions plays the role of an unknown
adjacency structure: dimensions that share information are "near" each other.
Estimation is discrete: values in [0, 1] are histogrammed into K equal-width
bins, pairwise joints are accumulated by exact counting, and MI is evaluated
in bits.

The cell-term summation is arranged to be invariant under transposing the
joint table (terms are paired (l,k)+(k,l) before reduction), which makes
MI(x, y) == MI(y, x) bitwise and the affinity matrix exactly permutation
equivariant: relabeling dimensions permutes the matrix entry-for-entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import SignalMatrix
from .errors import (
    DegenerateNodeError,
    InvalidArgumentError,
    ShapeMismatchError,
    ValueRangeError,
)

ECCENTRICITY_FLOOR = 1e-6  # keeps q**(-alpha) finite for the exact-center kernel
MI_CLAMP = -1e-12


@dataclass
class AffinityMatrix:
    """D x D symmetric nonnegative mutual information, diagonal = entropies."""

    values: np.ndarray
    bins: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeMismatchError(f"affinity must be square, got {self.values.shape}")

    @property
    def n_dims(self) -> int:
        return self.values.shape[0]


@dataclass
class DensityVector:
    """Per-dimension weights p(i) = q(i)**(-alpha) * n(i)**beta, max-normalized."""

    p: np.ndarray
    alpha: float
    beta: float
    source: str  # "lattice" when eccentricities were supplied, else "none"
    q: np.ndarray | None = None
    n: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=np.float64)
        if np.any(self.p <= 0):
            raise ValueError("density entries must be strictly positive")


def bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin of [0,1] values: b = min(floor(v * K), K - 1)."""
    if bins < 2:
        raise InvalidArgumentError(f"bin count must be >= 2, got {bins}")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise InvalidArgumentError("cannot bin an empty column")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueRangeError("values must lie in [0, 1] before binning")
    return np.minimum(np.floor(values * bins), bins - 1).astype(np.int64)


def histogram_pmf(column: np.ndarray, bins: int) -> np.ndarray:
    """Histogram probability mass function of one column; sums to 1."""
    idx = bin_indices(np.asarray(column).ravel(), bins)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return counts / counts.sum()


def _mi_from_joint(
    counts: np.ndarray, log_row: np.ndarray, log_col: np.ndarray, n: int
) -> np.ndarray:
    """MI in bits from joint counts (..., K, K) and log2 marginal counts.

    Cell terms are summed as sum_{l<k}(t[l,k] + t[k,l]) + sum_l t[l,l] so the
    result is bitwise identical under transposition of the joint.
    """
    bins = counts.shape[-1]
    c = counts.astype(np.float64, copy=False)
    with np.errstate(divide="ignore"):
        log_c = np.where(c > 0, np.log2(c, where=c > 0), 0.0)
    # a - b with a = log2(c) + log2(N), b = log2(R_l) + log2(S_k); both inner
    # sums are commutative, so swapping the arguments transposes t exactly.
    a = log_c + np.log2(float(n))
    b = log_row[..., :, None] + log_col[..., None, :]
    t = np.where(c > 0, (c / float(n)) * (a - b), 0.0)
    iu, ju = np.triu_indices(bins, k=1)
    sym = t + np.swapaxes(t, -1, -2)
    total = sym[..., iu, ju].sum(axis=-1) + t[..., np.arange(bins), np.arange(bins)].sum(axis=-1)
    return np.maximum(total, 0.0)


def mutual_information(col_i: np.ndarray, col_j: np.ndarray, bins: int) -> float:
    """Discrete mutual information (bits) between two [0,1] columns.

    Cell terms are sorted before summation, so the result depends only on the
    multiset of joint counts: it is exactly symmetric in its arguments and
    exactly invariant under bijective bin relabelings of both columns.
    """
    col_i = np.asarray(col_i).ravel()
    col_j = np.asarray(col_j).ravel()
    if col_i.shape != col_j.shape:
        raise InvalidArgumentError(
            f"columns must have equal length, got {col_i.shape} vs {col_j.shape}"
        )
    bi = bin_indices(col_i, bins)
    bj = bin_indices(col_j, bins)
    n = len(col_i)
    joint = np.bincount(bi * bins + bj, minlength=bins * bins).reshape(bins, bins)
    row = joint.sum(axis=1).astype(np.float64)
    col = joint.sum(axis=0).astype(np.float64)
    c = joint.astype(np.float64)
    with np.errstate(divide="ignore"):
        log_row = np.where(row > 0, np.log2(row, where=row > 0), 0.0)
        log_col = np.where(col > 0, np.log2(col, where=col > 0), 0.0)
        log_c = np.where(c > 0, np.log2(c, where=c > 0), 0.0)
    a = log_c + np.log2(float(n))
    b = log_row[:, None] + log_col[None, :]
    terms = np.where(c > 0, (c / float(n)) * (a - b), 0.0)
    return float(max(np.sort(terms, axis=None).sum(), 0.0))


def normalize_unit_range(
    values: np.ndarray, fit_rows: np.ndarray | None = None
) -> SignalMatrix:
    """Per-dimension min-max normalization into [0, 1].

    Statistics come from ``fit_rows`` (the training split) when given;
    constant dimensions map to 0.5, and values outside the fitted range are
    clipped so the unit-range invariant holds for held-out rows too.
    """
    values = np.asarray(values, dtype=np.float64)
    fit = values if fit_rows is None else values[fit_rows]
    lo = fit.min(axis=0)
    hi = fit.max(axis=0)
    span = hi - lo
    constant = span == 0
    safe_span = np.where(constant, 1.0, span)
    out = (values - lo) / safe_span
    out[:, constant] = 0.5
    return SignalMatrix(np.clip(out, 0.0, 1.0), normalization="unit-range")


def affinity_matrix(
    signals: SignalMatrix | np.ndarray, bins: int = 16, block: int = 128
) -> AffinityMatrix:
    """All-pairs mutual information between dimensions.

    Expects unit-range signals (see :func:`normalize_unit_range`). Joint
    counts for a block of column pairs are accumulated with one one-hot
    matmul, which is exact (counts are small integers) and fast enough for a
    few thousand dimensions.
    """
    values = signals.values if isinstance(signals, SignalMatrix) else np.asarray(signals)
    idx = bin_indices(values, bins)
    n, d = idx.shape
    flat_idx = (idx + bins * np.arange(d)[None, :]).ravel()
    hist = np.bincount(flat_idx, minlength=d * bins).astype(np.float64).reshape(d, bins)
    with np.errstate(divide="ignore"):
        log_hist = np.where(hist > 0, np.log2(hist, where=hist > 0), 0.0)

    def onehot(cols: np.ndarray) -> np.ndarray:
        width = len(cols) * bins
        oh = np.zeros((n, width), dtype=np.float32)
        flat = idx[:, cols] + bins * np.arange(len(cols))[None, :]
        oh[np.repeat(np.arange(n), len(cols)), flat.ravel()] = 1.0
        return oh

    out = np.empty((d, d), dtype=np.float64)
    starts = list(range(0, d, block))
    for a_pos, a0 in enumerate(starts):
        ai = np.arange(a0, min(a0 + block, d))
        oh_a = onehot(ai)
        for b0 in starts[a_pos:]:
            bi = np.arange(b0, min(b0 + block, d))
            oh_b = oh_a if b0 == a0 else onehot(bi)
            counts = (oh_a.T @ oh_b).astype(np.float64)
            counts = counts.reshape(len(ai), bins, len(bi), bins).transpose(0, 2, 1, 3)
            mi = _mi_from_joint(counts, log_hist[ai][:, None, :], log_hist[bi][None, :, :], n)
            out[np.ix_(ai, bi)] = mi
            if b0 != a0:
                out[np.ix_(bi, ai)] = mi.T
    return AffinityMatrix(out, bins)


def abs_correlation_matrix(signals: SignalMatrix | np.ndarray) -> AffinityMatrix:
    """Debug-mode affinity: absolute Pearson correlation (constant dims -> 0)."""
    values = signals.values if isinstance(signals, SignalMatrix) else np.asarray(signals)
    centered = values - values.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    safe = np.where(norms == 0, 1.0, norms)
    unit = centered / safe
    corr = np.abs(unit.T @ unit)
    corr[norms == 0, :] = 0.0
    corr[:, norms == 0] = 0.0
    return AffinityMatrix(np.clip(corr, 0.0, 1.0), bins=0)


def density(
    eccentricity: np.ndarray | None,
    affinity: AffinityMatrix,
    alpha: float,
    beta: float,
) -> DensityVector:
    """Density weights p(i) = q(i)**(-alpha) * n(i)**beta, rescaled to max 1.

    ``n(i)`` is the affinity row sum. Without an eccentricity vector alpha
    must be 0. Any positive rescaling of p is equivalent for the clustering
    objective; max-normalization keeps P**(1/2) well conditioned.
    """
    n_vec = affinity.values.sum(axis=1)
    d = affinity.n_dims
    if eccentricity is None:
        if alpha != 0.0:
            raise InvalidArgumentError("alpha != 0 requires an eccentricity vector")
        q_eff = np.ones(d)
        q_rec = np.full(d, np.nan)
        source = "none"
    else:
        eccentricity = np.asarray(eccentricity, dtype=np.float64)
        if eccentricity.shape != (d,):
            raise ShapeMismatchError(
                f"eccentricity length {eccentricity.shape} != dimension count {d}"
            )
        q_eff = np.maximum(eccentricity, ECCENTRICITY_FLOOR)
        q_rec = eccentricity
        source = "lattice"
    if beta != 0.0 and np.any(n_vec == 0):
        bad = int(np.argmax(n_vec == 0))
        raise DegenerateNodeError(f"dimension {bad} has zero affinity row sum with beta != 0")
    raw = q_eff ** (-alpha) * n_vec**beta
    p = raw / raw.max()
    return DensityVector(p=p, alpha=alpha, beta=beta, source=source, q=q_rec, n=n_vec)
