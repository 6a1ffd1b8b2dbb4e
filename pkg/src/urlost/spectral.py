"""Density-adjusted spectral clustering of signal dimensions.

Pipeline: scale the affinity by density and degree into a symmetric operator,
take its top-k eigenvectors, row-normalize, then turn the continuous
embedding into a hard partition either by the alternating rotation/argmax
scheme (default; more consistent than k-means) or by restarted k-means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .affinity import AffinityMatrix, DensityVector, density
from .errors import (
    InvalidArgumentError,
    IsolatedDimensionError,
    NumericError,
    ShapeMismatchError,
)
from .io import sha256_array
from .rng import substream

log = logging.getLogger(__name__)

EIG_RESIDUAL_RTOL = 1e-8
ROTATION_TOL = 1e-10
ROTATION_MAX_ITERS = 100
KMEANS_MAX_ITERS = 300


@dataclass
class DensityLaplacian:
    """L = P^(1/2) D^(-1/2) A D^(-1/2) P^(1/2), with provenance hashes."""

    values: np.ndarray
    affinity_hash: str = ""
    density_hash: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Laplacian contains non-finite entries")

    @property
    def n_dims(self) -> int:
        return self.values.shape[0]


@dataclass
class SpectralEmbedding:
    """Top-k eigenvectors (columns of X, descending eigenvalues) and rows Y."""

    X: np.ndarray
    eigenvalues: np.ndarray
    Y: np.ndarray


@dataclass
class RotationState:
    """Orthonormal rotation from the discretization scheme and its objective."""

    R: np.ndarray
    objective: float


@dataclass
class ClusterAssignment:
    """Partition of the D dimensions into M non-empty clusters."""

    labels: np.ndarray
    M: int
    sizes: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise InvalidArgumentError("empty assignment")
        if self.labels.min() < 0 or self.labels.max() >= self.M:
            raise InvalidArgumentError("labels must lie in [0, M)")
        sizes = np.bincount(self.labels, minlength=self.M)
        if np.any(sizes == 0):
            raise InvalidArgumentError(f"empty cluster(s): {np.where(sizes == 0)[0].tolist()}")
        self.sizes = sizes

    @property
    def n_dims(self) -> int:
        return len(self.labels)

    def members(self) -> list[np.ndarray]:
        """Per-cluster dimension indices, ascending within each cluster."""
        return [np.where(self.labels == m)[0] for m in range(self.M)]

    def to_dict(self, params: dict | None = None, provenance: dict | None = None) -> dict:
        return {
            "M": int(self.M),
            "labels": self.labels.tolist(),
            "sizes": self.sizes.tolist(),
            "params": params or {},
            "provenance": provenance or {},
        }

    @staticmethod
    def from_dict(d: dict) -> "ClusterAssignment":
        return ClusterAssignment(np.array(d["labels"], dtype=np.int64), int(d["M"]))


def singleton_assignment(n_dims: int) -> ClusterAssignment:
    """Each dimension its own cluster (the pixel-token mode)."""
    return ClusterAssignment(np.arange(n_dims, dtype=np.int64), n_dims)


def canonical_relabel(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of their smallest member index."""
    labels = np.asarray(labels, dtype=np.int64)
    seen: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if int(lab) not in seen:
            seen[int(lab)] = len(seen)
        out[i] = seen[int(lab)]
    return out


def build_density_laplacian(A: AffinityMatrix, p: DensityVector) -> DensityLaplacian:
    a = A.values
    if a.shape[0] != len(p.p):
        raise ShapeMismatchError(f"affinity {a.shape} vs density length {len(p.p)}")
    if np.abs(a - a.T).max() > 1e-10:
        raise InvalidArgumentError("affinity must be symmetric")
    if a.min() < 0:
        raise InvalidArgumentError("affinity must be nonnegative")
    degree = a.sum(axis=1)
    if np.any(degree == 0):
        bad = int(np.argmax(degree == 0))
        raise IsolatedDimensionError(f"dimension {bad} has zero degree")
    # sqrt(p)/sqrt(d) rather than sqrt(p/d): with p = 1 this reproduces the
    # classic D^(-1/2) A D^(-1/2) operator bit-for-bit
    v = np.sqrt(p.p) / np.sqrt(degree)
    scaled = v[:, None] * a * v[None, :]
    scaled = 0.5 * (scaled + scaled.T)
    return DensityLaplacian(scaled, sha256_array(a), sha256_array(p.p))


def top_k_eigenvectors(L: DensityLaplacian | np.ndarray, k: int) -> SpectralEmbedding:
    """Top-k eigenpairs (largest algebraic), validated by residual bounds.

    Sign convention: the first entry of each eigenvector exceeding 1e-12 of
    its max magnitude is made positive, which pins an otherwise arbitrary
    per-column sign and makes reruns byte-identical.
    """
    mat = L.values if isinstance(L, DensityLaplacian) else np.asarray(L, dtype=np.float64)
    d = mat.shape[0]
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"k must lie in [1, {d}], got {k}")
    try:
        eigvals, eigvecs = np.linalg.eigh(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(eigvals, kind="stable")[::-1][:k]
    vals = eigvals[order]
    vecs = eigvecs[:, order].copy()
    for j in range(k):
        col = vecs[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0]
        if len(nz) and col[nz[0]] < 0:
            vecs[:, j] = -col
    norm_l = np.linalg.norm(mat, "fro")
    residual = np.linalg.norm(mat @ vecs - vecs * vals[None, :], axis=0)
    if np.any(residual > EIG_RESIDUAL_RTOL * max(norm_l, 1e-300)):
        raise NumericError(
            f"eigen residual {residual.max():.3e} exceeds {EIG_RESIDUAL_RTOL:.0e}*|L|_F={norm_l:.3e}"
        )
    return SpectralEmbedding(X=vecs, eigenvalues=vals, Y=row_normalize(vecs))


def row_normalize(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit norm; near-zero rows map to e1 (and are logged)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    out = np.empty_like(x)
    degenerate = norms < 1e-12
    if degenerate.any():
        log.warning("row_normalize: %d near-zero row(s) mapped to e1", int(degenerate.sum()))
    safe = np.where(degenerate, 1.0, norms)
    out[:] = x / safe[:, None]
    out[degenerate] = 0.0
    out[degenerate, 0] = 1.0
    return out


def _farthest_first_rotation(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    d, k = y.shape
    rot = np.zeros((k, k))
    rot[:, 0] = y[int(rng.integers(d))]
    c = np.zeros(d)
    for j in range(1, k):
        c += np.abs(y @ rot[:, j - 1])
        rot[:, j] = y[int(np.argmin(c))]
    return rot


def discretize_yu_shi(
    y: np.ndarray, seed: int, return_state: bool = False
) -> ClusterAssignment | tuple[ClusterAssignment, RotationState, list[float]]:
    """Alternate argmax-discretization and orthogonal alignment to a fixpoint.

    The rotation update is the orthogonal Procrustes solution, so the trace
    objective is nondecreasing; iteration stops when it moves < 1e-10 or
    after 100 rounds. Empty clusters are repaired afterwards by stealing the
    farthest member of the largest cluster, then labels are canonicalized.
    """
    y = np.asarray(y, dtype=np.float64)
    d, k = y.shape
    if k == 1:
        assign = ClusterAssignment(np.zeros(d, dtype=np.int64), 1)
        return (assign, RotationState(np.ones((1, 1)), float(d)), [float(d)]) if return_state else assign
    rng = substream(seed, "yu-shi-init")
    rot = _farthest_first_rotation(y, rng)
    labels = np.zeros(d, dtype=np.int64)
    prev_obj = -np.inf
    objectives: list[float] = []
    for _ in range(ROTATION_MAX_ITERS):
        labels = np.argmax(y @ rot, axis=1)
        onehot = np.zeros((d, k))
        onehot[np.arange(d), labels] = 1.0
        try:
            u, s, vt = np.linalg.svd(onehot.T @ y)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD failed during discretization: {exc}") from exc
        obj = float(s.sum())
        if obj < prev_obj - 1e-8:
            raise NumericError(f"discretization objective decreased: {prev_obj} -> {obj}")
        objectives.append(obj)
        rot_new = vt.T @ u.T
        if obj - prev_obj < ROTATION_TOL:
            rot = rot_new
            break
        prev_obj = obj
        rot = rot_new
    labels = _repair_empty_clusters(labels, y, k)
    assign = ClusterAssignment(canonical_relabel(labels), k)
    if return_state:
        return assign, RotationState(rot, objectives[-1]), objectives
    return assign


def _repair_empty_clusters(labels: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        sizes = np.bincount(labels, minlength=k)
        empty = np.where(sizes == 0)[0]
        if len(empty) == 0:
            return labels
        donor = int(np.argmax(sizes))
        members = np.where(labels == donor)[0]
        center = y[members].mean(axis=0)
        far = members[int(np.argmax(((y[members] - center) ** 2).sum(axis=1)))]
        labels[far] = empty[0]


def kmeans(
    y: np.ndarray, n_clusters: int, seed: int, restarts: int = 8
) -> ClusterAssignment:
    """Restarted k-means (++ seeding, Lloyd to a fixpoint), best by WCSS."""
    y = np.asarray(y, dtype=np.float64)
    d = y.shape[0]
    if n_clusters > d:
        raise InvalidArgumentError(f"M={n_clusters} exceeds point count {d}")
    best_labels, best_obj = None, np.inf
    for r in range(restarts):
        rng = substream(seed, "kmeans", r)
        labels, obj = _lloyd(y, n_clusters, rng)
        if obj < best_obj:
            best_labels, best_obj = labels, obj
    return ClusterAssignment(canonical_relabel(best_labels), n_clusters)


def _plusplus_init(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    d = y.shape[0]
    centers = np.empty((k, y.shape[1]))
    centers[0] = y[int(rng.integers(d))]
    dist2 = ((y - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = dist2.sum()
        if total == 0:
            centers[j] = y[int(rng.integers(d))]
            continue
        probs = dist2 / total
        centers[j] = y[int(rng.choice(d, p=probs))]
        dist2 = np.minimum(dist2, ((y - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(y: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    centers = _plusplus_init(y, k, rng)
    labels = np.full(y.shape[0], -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITERS):
        d2 = ((y[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        # keep every cluster populated: move the globally farthest point in
        own_d2 = d2[np.arange(len(new_labels)), new_labels].copy()
        for j in np.where(np.bincount(new_labels, minlength=k) == 0)[0]:
            far = int(np.argmax(own_d2))
            new_labels[far] = j
            own_d2[far] = -np.inf
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = y[labels == j].mean(axis=0)
    d2 = ((y[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    wcss = float(d2[np.arange(len(labels)), labels].sum())
    return labels, wcss


def cluster_signal_dimensions(
    affinity: AffinityMatrix,
    n_clusters: int,
    dens: DensityVector | None = None,
    method: str = "yu-shi",
    seed: int = 0,
    restarts: int = 8,
) -> tuple[ClusterAssignment, SpectralEmbedding, DensityLaplacian]:
    """Full clustering stage: density -> operator -> embedding -> partition."""
    if dens is None:
        dens = density(None, affinity, 0.0, 0.0)
    lap = build_density_laplacian(affinity, dens)
    emb = top_k_eigenvectors(lap, n_clusters)
    if method == "yu-shi":
        assign = discretize_yu_shi(emb.Y, seed)
    elif method == "kmeans":
        assign = kmeans(emb.Y, n_clusters, seed, restarts)
    else:
        raise InvalidArgumentError(f"unknown discretization method {method!r}")
    return assign, emb, lap


def classic_spectral_partition(
    affinity: AffinityMatrix, n_clusters: int, method: str = "yu-shi", seed: int = 0
) -> ClusterAssignment:
    """Uniform-density reference path: D^(-1/2) A D^(-1/2) built directly.

    Kept separate from the density-adjusted path so the two can be compared
    against each other as independent implementations.
    """
    a = affinity.values
    degree = a.sum(axis=1)
    if np.any(degree == 0):
        raise IsolatedDimensionError(f"dimension {int(np.argmax(degree == 0))} has zero degree")
    inv_sqrt = 1.0 / np.sqrt(degree)
    lap = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    emb = top_k_eigenvectors(lap, n_clusters)
    if method == "kmeans":
        return kmeans(emb.Y, n_clusters, seed)
    return discretize_yu_shi(emb.Y, seed)


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """Adjusted Rand index between two labelings of the same items."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError("labelings must have equal length")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))
