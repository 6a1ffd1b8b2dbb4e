"""Foveated sampling: concentric-ring Gaussian kernel lattices.

A lattice mimics a retinal mosaic: kernels sit on concentric rings around the
image center, and kernel radius grows exponentially with eccentricity so the
periphery is summarized coarsely while the center stays sharp. Each kernel's
response is a normalized Gaussian-weighted average of the pixels under it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidLatticeError, ShapeMismatchError

KERNEL_TRUNCATION_SIGMAS = 3.0


@dataclass
class RingSpec:
    eccentricity: float  # distance from lattice center, pixels
    count: int
    phase: float = 0.0  # radians added to each kernel's angle


@dataclass
class LatticeConfig:
    rings: list[RingSpec]
    sigma0: float = 1.0  # kernel radius at eccentricity 0
    gamma: float = 0.036  # radius law sigma(e) = sigma0 * exp(gamma * e)
    include_center: bool = True

    def to_dict(self) -> dict:
        return {
            "rings": [[r.eccentricity, r.count, r.phase] for r in self.rings],
            "sigma0": self.sigma0,
            "gamma": self.gamma,
            "include_center": self.include_center,
        }

    @staticmethod
    def from_dict(d: dict) -> "LatticeConfig":
        return LatticeConfig(
            rings=[RingSpec(e, int(c), p) for e, c, p in d["rings"]],
            sigma0=d["sigma0"],
            gamma=d["gamma"],
            include_center=d["include_center"],
        )


@dataclass
class SamplingLattice:
    """Kernel centers/radii in upsampled-pixel coordinates (row, col)."""

    centers: np.ndarray  # (D_k, 2) float64
    sigmas: np.ndarray  # (D_k,)
    eccentricities: np.ndarray  # (D_k,)

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.eccentricities = np.asarray(self.eccentricities, dtype=np.float64)
        if not (len(self.centers) == len(self.sigmas) == len(self.eccentricities)):
            raise ShapeMismatchError("centers, sigmas and eccentricities must align")
        if np.any(self.sigmas <= 0):
            raise InvalidConfigError("kernel radii must be strictly positive")
        if np.any(self.eccentricities < 0):
            raise InvalidConfigError("eccentricities must be nonnegative")
        order = np.argsort(self.eccentricities, kind="stable")
        if np.any(np.diff(self.sigmas[order]) < -1e-12):
            raise InvalidConfigError("kernel radius must be nondecreasing in eccentricity")

    @property
    def n_kernels(self) -> int:
        return len(self.sigmas)

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "sigmas": self.sigmas.tolist(),
            "eccentricities": self.eccentricities.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "SamplingLattice":
        return SamplingLattice(
            np.array(d["centers"]), np.array(d["sigmas"]), np.array(d["eccentricities"])
        )


def default_lattice_config(image_size: int = 96) -> LatticeConfig:
    """The shipped mosaic: one center kernel plus 20 rings, 1038 kernels total.

    Ring counts grow linearly with eccentricity (constant arc spacing); the
    outermost ring absorbs the rounding residue so the total is exact. Radii
    follow an exponential law, reduced foveal density suits low-res sources.
    """
    n_rings = 20
    e_max = 0.46 * image_size  # outermost ring, leaves room for kernel support
    target = 1038 - 1  # kernels on rings; one more sits at the center
    de = e_max / n_rings
    raw = [4.937 * r for r in range(1, n_rings + 1)]
    scale = target / sum(raw)
    counts = [max(1, round(v * scale)) for v in raw]
    counts[-1] += target - sum(counts)
    rings = [
        RingSpec(eccentricity=de * r, count=counts[r - 1], phase=(r % 2) * np.pi / counts[r - 1])
        for r in range(1, n_rings + 1)
    ]
    return LatticeConfig(rings=rings, sigma0=1.0, gamma=np.log(5.0) / e_max, include_center=True)


def build_retina_lattice(config: LatticeConfig, image_size: int = 96) -> SamplingLattice:
    """Place kernels on concentric rings around ((S-1)/2, (S-1)/2)."""
    for ring in config.rings:
        if ring.count < 1:
            raise InvalidConfigError(f"ring at eccentricity {ring.eccentricity} has count 0")
        if ring.eccentricity < 0:
            raise InvalidConfigError(f"negative ring eccentricity {ring.eccentricity}")
    if config.sigma0 <= 0 or config.gamma < 0:
        raise InvalidConfigError("radius law needs sigma0 > 0 and gamma >= 0")
    cy = cx = (image_size - 1) / 2.0
    centers, eccs = [], []
    if config.include_center:
        centers.append((cy, cx))
        eccs.append(0.0)
    for ring in config.rings:
        angles = 2.0 * np.pi * np.arange(ring.count) / ring.count + ring.phase
        for a in angles:
            centers.append((cy + ring.eccentricity * np.sin(a), cx + ring.eccentricity * np.cos(a)))
            eccs.append(ring.eccentricity)
    eccs = np.array(eccs)
    sigmas = config.sigma0 * np.exp(config.gamma * eccs)
    return SamplingLattice(np.array(centers), sigmas, eccs)


def kernel_weights(lattice: SamplingLattice, image_size: int) -> np.ndarray:
    """Dense (D_k, S*S) matrix of truncated, renormalized Gaussian weights.

    Weights are exp(-d^2 / (2 sigma^2)) for pixels within 3 sigma (Euclidean),
    zero outside, clipped to image bounds, and normalized to sum to one per
    kernel so constant images produce constant responses.
    """
    rows = np.arange(image_size, dtype=np.float64)
    weights = np.zeros((lattice.n_kernels, image_size, image_size))
    for i in range(lattice.n_kernels):
        cy, cx = lattice.centers[i]
        sig = lattice.sigmas[i]
        cut = KERNEL_TRUNCATION_SIGMAS * sig
        d2 = (rows[:, None] - cy) ** 2 + (rows[None, :] - cx) ** 2
        w = np.where(d2 <= cut * cut, np.exp(-d2 / (2.0 * sig * sig)), 0.0)
        total = w.sum()
        if total <= 0.0:
            raise InvalidLatticeError(
                f"kernel {i} at ({cy:.1f}, {cx:.1f}) has no support inside the image"
            )
        weights[i] = w / total
    return weights.reshape(lattice.n_kernels, image_size * image_size)


def foveate(image: np.ndarray, lattice: SamplingLattice, weights: np.ndarray | None = None) -> np.ndarray:
    """Sample one (S, S, C) image -> per-kernel responses (D_k, C) in [0, 1].

    Pixel intensities are assumed in [0, 255]; responses are divided by 255.
    """
    if image.ndim == 2:
        image = image[:, :, None]
    size, size2, channels = image.shape
    if size != size2:
        raise ShapeMismatchError(f"expected a square image, got {image.shape}")
    if weights is None:
        weights = kernel_weights(lattice, size)
    flat = image.reshape(size * size, channels).astype(np.float64)
    return (weights @ flat) / 255.0


def foveate_batch(
    images: np.ndarray, lattice: SamplingLattice, chunk: int = 256
) -> np.ndarray:
    """Vectorized :func:`foveate` over (N, S, S, C) -> (N, D_k, C)."""
    n, size, _, channels = images.shape
    weights = kernel_weights(lattice, size)
    out = np.empty((n, lattice.n_kernels, channels))
    for start in range(0, n, chunk):
        block = images[start : start + chunk].reshape(-1, size * size, channels)
        # (B, S^2, C) x (D_k, S^2) -> (B, D_k, C)
        out[start : start + chunk] = np.einsum(
            "bpc,kp->bkc", block.astype(np.float64), weights, optimize=True
        ) / 255.0
    return out


def kernel_major_signals(responses: np.ndarray) -> np.ndarray:
    """(N, D_k, C) -> (N, D_k*C), each kernel's channels stored contiguously."""
    n = responses.shape[0]
    return responses.reshape(n, -1)


def dim_eccentricities(lattice: SamplingLattice, channels: int) -> np.ndarray:
    """Per-dimension eccentricity after kernel-major flattening."""
    return np.repeat(lattice.eccentricities, channels)
