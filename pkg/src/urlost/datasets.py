"""Image ingestion and the synthetic dataset variants.

Builds the signal matrices the rest of the pipeline consumes: plain flattened
images, globally permuted images, locally permuted patches, and (via
:mod:`urlost.retina`) foveated responses. All stochastic choices are driven by
explicit seeds through :func:`urlost.rng.substream`.

Conventions, fixed once and tested:

* images are (N, H, W, C) uint8; flattening order is (row, col, channel);
* a Permutation's ``mapping`` gives the *source* index for each destination,
  i.e. ``out[:, d] = in[:, mapping[d]]``;
* patches tile the image row-major; each patch flattens (row, col, channel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptRecordError,
    InvalidArgumentError,
    MalformedFileError,
    ShapeMismatchError,
)
from .rng import substream

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 channel-planar pixel bytes
CIFAR_HW = 32
CIFAR_CLASSES = 10


@dataclass
class LabeledImageSet:
    """A stack of 8-bit images with integer class labels."""

    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int = CIFAR_CLASSES

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeMismatchError(f"images must be (N,H,W,C), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ShapeMismatchError(
                f"label count {len(self.labels)} != image count {len(self.images)}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class SignalMatrix:
    """N samples by D dimensions of real values, the pipeline's currency."""

    values: np.ndarray  # (N, D) float64
    normalization: str = "raw"  # raw | unit-range | standardized

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"signal matrix must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("signal matrix contains non-finite entries")
        if self.normalization == "unit-range":
            if len(self.values) and (self.values.min() < 0.0 or self.values.max() > 1.0):
                raise ValueError("unit-range signals must lie in [0, 1]")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]


@dataclass
class Permutation:
    """A bijection on dimension indices; ``mapping[d]`` is the source of ``d``."""

    mapping: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if not np.array_equal(np.sort(self.mapping), np.arange(len(self.mapping))):
            raise InvalidArgumentError("mapping is not a bijection on {0..D-1}")

    @property
    def size(self) -> int:
        return len(self.mapping)

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(len(self.mapping))
        return Permutation(inv, self.seed)


def load_cifar(path) -> LabeledImageSet:
    """Decode a CIFAR-10 binary batch (3073-byte records, channel-planar)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES != 0:
        raise MalformedFileError(
            f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    n = raw.size // CIFAR_RECORD_BYTES
    records = raw.reshape(n, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if n and labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise CorruptRecordError(f"{path}: record {bad} has label byte {labels[bad]} >= 10")
    # channel-planar (C,H,W) per record -> (H,W,C)
    pixels = records[:, 1:].reshape(n, 3, CIFAR_HW, CIFAR_HW).transpose(0, 2, 3, 1)
    return LabeledImageSet(pixels, labels)


def write_cifar(path, images: LabeledImageSet) -> None:
    """Inverse of :func:`load_cifar`; used to materialize synthetic batches."""
    n = len(images)
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = images.labels.astype(np.uint8)
    records[:, 1:] = images.images.transpose(0, 3, 1, 2).reshape(n, -1)
    records.tofile(path)


def upsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor replication: out[y, x] = in[y // factor, x // factor]."""
    if factor < 1:
        raise InvalidArgumentError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)


def make_global_permutation(seed: int, n_dims: int) -> Permutation:
    """Fisher-Yates shuffle of {0..D-1} from the (seed, "global-perm") stream."""
    if n_dims < 1:
        raise InvalidArgumentError(f"dimension count must be >= 1, got {n_dims}")
    rng = substream(seed, "global-perm")
    mapping = _fisher_yates(rng, n_dims)
    return Permutation(mapping, seed)


def _fisher_yates(rng: np.random.Generator, n: int) -> np.ndarray:
    mapping = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        mapping[i], mapping[j] = mapping[j], mapping[i]
    return mapping


def apply_permutation(signals: np.ndarray, perm: Permutation) -> np.ndarray:
    """Reorder columns of (N, D) signals; every row is permuted identically."""
    signals = np.asarray(signals)
    if signals.shape[-1] != perm.size:
        raise InvalidArgumentError(
            f"permutation size {perm.size} != signal dimension {signals.shape[-1]}"
        )
    return signals[..., perm.mapping]


def make_local_permutations(
    seed: int, patch_size: int, height: int, width: int, channels: int, identity: bool = False
) -> list[Permutation]:
    """One independent seeded permutation per patch position (row-major).

    Each permutation acts on the patch's ``patch_size**2 * channels`` flattened
    values and is fixed across the whole dataset. ``identity=True`` returns
    identity permutations so the result reduces to plain patchified data.
    """
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise InvalidArgumentError(
            f"patch_size {patch_size} must divide image height {height} and width {width}"
        )
    n_patches = (height // patch_size) * (width // patch_size)
    block = patch_size * patch_size * channels
    perms = []
    for p in range(n_patches):
        if identity:
            mapping = np.arange(block, dtype=np.int64)
        else:
            mapping = _fisher_yates(substream(seed, "local-perm", p), block)
        perms.append(Permutation(mapping, seed))
    return perms


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(N, H, W, C) -> (N, P, patch_size**2 * C), patches row-major."""
    n, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise InvalidArgumentError(f"patch_size {patch_size} must divide {h}x{w}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(n, gh, patch_size, gw, patch_size, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * gw, patch_size * patch_size * c)


def flatten_images(images: np.ndarray) -> np.ndarray:
    """(N, H, W, C) uint8 -> (N, H*W*C) float64 in [0, 1], (row, col, channel) order."""
    n = images.shape[0]
    return images.reshape(n, -1).astype(np.float64) / 255.0


def locally_permuted_signals(
    images: np.ndarray, perms: list[Permutation], patch_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Patchify, permute each patch by its own bijection, concatenate.

    Returns (signals (N, P*block) in [0,1], dim->patch cluster labels).
    """
    patches = patchify(images, patch_size).astype(np.float64) / 255.0
    n, n_patches, block = patches.shape
    if len(perms) != n_patches:
        raise InvalidArgumentError(f"need {n_patches} permutations, got {len(perms)}")
    out = np.empty_like(patches)
    for p, perm in enumerate(perms):
        out[:, p, :] = apply_permutation(patches[:, p, :], perm)
    cluster_of_dim = np.repeat(np.arange(n_patches, dtype=np.int64), block)
    return out.reshape(n, n_patches * block), cluster_of_dim


def downsample_grayscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool by ``factor`` and mean over channels -> (N, (H/f)*(W/f)) in [0,1]."""
    n, h, w, c = images.shape
    if h % factor or w % factor:
        raise InvalidArgumentError(f"downsample factor {factor} must divide {h}x{w}")
    x = images.astype(np.float64).reshape(n, h // factor, factor, w // factor, factor, c)
    pooled = x.mean(axis=(2, 4, 5)) / 255.0
    return pooled.reshape(n, -1)


# ---------------------------------------------------------------------------
# Synthetic CIFAR-format image generator.
#
# Real CIFAR-10 files load through load_cifar; when none are on disk the
# pipeline can synthesize a structured stand-in with the properties the
# method actually exploits: localized spatial correlation (mutual information
# between pixels decays with distance) and linearly decodable but
# non-trivial class structure.
# ---------------------------------------------------------------------------


def _gabor_patch(rng: np.random.Generator, size: int) -> np.ndarray:
    """One random oriented, windowed grating covering part of the image."""
    cy, cx = rng.uniform(size * 0.125, size * 0.875, size=2)
    sigma = rng.uniform(size * 0.08, size * 0.22)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(0.05, 0.25)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    rot = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    straight = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    envelope = np.exp(-(rot**2 + straight**2) / (2.0 * sigma**2))
    return envelope * np.cos(2.0 * np.pi * freq * rot + phase)


def synthesize_image_set(
    n_images: int, seed: int, num_classes: int = CIFAR_CLASSES, size: int = CIFAR_HW
) -> LabeledImageSet:
    """Generate class-structured color images, balanced across classes.

    Each class owns a fixed bank of eight colored Gabor patches; an image
    superimposes a random subset of its class bank on a fresh pile of
    distractor patches plus pixel noise, so classes are decodable but not
    trivially separable. Deterministic in all arguments.
    """
    if n_images < 0:
        raise InvalidArgumentError("n_images must be >= 0")
    proto_rng = substream(seed, "synth-class-templates")
    banks = []
    for _ in range(num_classes):
        banks.append(
            [(_gabor_patch(proto_rng, size), proto_rng.uniform(-1.0, 1.0, size=3)) for _ in range(8)]
        )
    images = np.empty((n_images, size, size, 3), dtype=np.uint8)
    labels = np.empty(n_images, dtype=np.int64)
    for i in range(n_images):
        cls = i % num_classes
        rng = substream(seed, "synth-image", i)
        field = np.zeros((size, size, 3))
        for t in rng.choice(8, size=3, replace=False):
            patch, color = banks[cls][t]
            field += rng.uniform(0.5, 1.0) * patch[:, :, None] * color[None, None, :]
        for _ in range(8):
            field += (
                rng.uniform(0.6, 1.2)
                * _gabor_patch(rng, size)[:, :, None]
                * rng.uniform(-1.0, 1.0, size=3)
            )
        field += rng.normal(0.0, 0.1, size=field.shape)
        field += rng.uniform(-0.12, 0.12)  # global brightness jitter
        images[i] = np.clip(127.5 + 95.0 * field, 0, 255).astype(np.uint8)
        labels[i] = cls
    return LabeledImageSet(images, labels, num_classes=num_classes)
