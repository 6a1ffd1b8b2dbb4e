"""Cluster-token masked autoencoder with a self-organizing input layer.

Each cluster of signal dimensions becomes one token: cluster i's values pass
through their own learnable projection (the self-organizing layer), so the
network can align clusters that are internally scrambled or differently
sized. A transformer encoder sees only the unmasked tokens; a decoder
receives encoder outputs plus a learned mask token at the masked positions
and reconstructs each masked cluster's raw values through a per-cluster
output head. Losses average per-cluster mean squared errors over the masked
clusters only.

Blocks are pre-normalization (x + Attn(LN(x)); x + MLP(LN(x))) with no
trailing norm, so a depth-0 stack is exactly the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .datasets import Permutation
from .errors import InvalidArgumentError, NumericError, ShapeMismatchError
from .rng import substream, truncated_normal
from .spectral import ClusterAssignment


@dataclass
class ModelConfig:
    d_model: int = 128
    enc_depth: int = 4
    dec_depth: int = 2
    n_heads: int = 4
    d_dec: int = 64
    dec_heads: int = 4
    mlp_ratio: int = 4
    shared_projection: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class MaskPattern:
    """A fixed subset of token indices to hide."""

    masked: np.ndarray
    ratio: float
    seed: int
    n_tokens: int

    def __post_init__(self) -> None:
        self.masked = np.asarray(sorted(int(i) for i in self.masked), dtype=np.int64)
        if not 1 <= len(self.masked) <= self.n_tokens - 1:
            raise InvalidArgumentError("mask must hide at least 1 and at most M-1 tokens")

    def bool_vector(self) -> np.ndarray:
        out = np.zeros(self.n_tokens, dtype=bool)
        out[self.masked] = True
        return out


def sample_mask(n_tokens: int, ratio: float, seed: int) -> MaskPattern:
    """Uniform random subset of round-half-up(ratio * M) token indices."""
    count = int(math.floor(ratio * n_tokens + 0.5))
    if not 1 <= count <= n_tokens - 1:
        raise InvalidArgumentError(
            f"ratio {ratio} with M={n_tokens} rounds to {count} masked tokens"
        )
    scores = substream(seed, "mask").uniform(size=n_tokens)
    masked = np.argsort(scores, kind="stable")[:count]
    return MaskPattern(masked, ratio, seed, n_tokens)


def sample_mask_batch(
    n_tokens: int, ratio: float, rng: np.random.Generator, batch: int
) -> np.ndarray:
    """Per-sample uniform masks as a (batch, M) boolean array."""
    count = int(math.floor(ratio * n_tokens + 0.5))
    if not 1 <= count <= n_tokens - 1:
        raise InvalidArgumentError(
            f"ratio {ratio} with M={n_tokens} rounds to {count} masked tokens"
        )
    scores = rng.uniform(size=(batch, n_tokens))
    order = np.argsort(scores, axis=1, kind="stable")
    out = np.zeros((batch, n_tokens), dtype=bool)
    np.put_along_axis(out, order[:, :count], True, axis=1)
    return out


class SelfOrgLayer(nn.Module):
    """Per-cluster linear projections g(x, W_i) = W_i x + b_i into token space.

    ``shared=True`` ties every cluster to one projection (all clusters must
    then have equal size), the conventional shared-embedding ablation.
    """

    def __init__(self, cluster_sizes: list[int], d_model: int, shared: bool = False):
        super().__init__()
        self.cluster_sizes = list(cluster_sizes)
        self.shared = shared
        if shared:
            if len(set(self.cluster_sizes)) != 1:
                raise InvalidArgumentError("shared projection requires equal cluster sizes")
            self.proj = nn.Linear(self.cluster_sizes[0], d_model)
        else:
            self.proj = nn.ModuleList(nn.Linear(s, d_model) for s in self.cluster_sizes)

    def forward(self, clusters: list[torch.Tensor]) -> torch.Tensor:
        if len(clusters) != len(self.cluster_sizes):
            raise ShapeMismatchError(
                f"expected {len(self.cluster_sizes)} clusters, got {len(clusters)}"
            )
        tokens = []
        for i, x in enumerate(clusters):
            if x.shape[-1] != self.cluster_sizes[i]:
                raise ShapeMismatchError(
                    f"cluster {i}: expected size {self.cluster_sizes[i]}, got {x.shape[-1]}"
                )
            layer = self.proj if self.shared else self.proj[i]
            tokens.append(layer(x))
        return torch.stack(tokens, dim=-2)

    def weight_matrices(self) -> list[np.ndarray]:
        """Detached (d_model, size_i) weights, shared mode repeated per cluster."""
        if self.shared:
            w = self.proj.weight.detach().cpu().numpy()
            return [w.copy() for _ in self.cluster_sizes]
        return [p.weight.detach().cpu().numpy().copy() for p in self.proj]


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise InvalidArgumentError(f"width {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.scale = 1.0 / math.sqrt(dim // n_heads)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, d // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # (B, heads, T, head_dim) each
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ClusterMae(nn.Module):
    """Masked autoencoder over cluster tokens."""

    def __init__(self, cluster_sizes: list[int], config: ModelConfig):
        super().__init__()
        self.config = config
        self.cluster_sizes = list(cluster_sizes)
        m = len(cluster_sizes)
        self.so_layer = SelfOrgLayer(cluster_sizes, config.d_model, config.shared_projection)
        self.enc_pos = nn.Parameter(torch.zeros(m, config.d_model))
        self.enc_blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads, config.mlp_ratio) for _ in range(config.enc_depth)
        )
        self.adapter = nn.Linear(config.d_model, config.d_dec)
        self.mask_token = nn.Parameter(torch.zeros(config.d_dec))
        self.dec_pos = nn.Parameter(torch.zeros(m, config.d_dec))
        self.dec_blocks = nn.ModuleList(
            Block(config.d_dec, config.dec_heads, config.mlp_ratio) for _ in range(config.dec_depth)
        )
        self.heads = nn.ModuleList(nn.Linear(config.d_dec, s) for s in cluster_sizes)

    @property
    def n_tokens(self) -> int:
        return len(self.cluster_sizes)

    def split_clusters(self, signals: torch.Tensor, members: list[torch.Tensor]) -> list[torch.Tensor]:
        return [signals[:, idx] for idx in members]

    def _tokens(self, clusters: list[torch.Tensor]) -> torch.Tensor:
        return self.so_layer(clusters) + self.enc_pos

    def _as_bool_mask(self, mask, batch: int) -> torch.Tensor:
        if isinstance(mask, MaskPattern):
            vec = torch.from_numpy(mask.bool_vector())
            return vec.unsqueeze(0).expand(batch, -1)
        mask = torch.as_tensor(np.asarray(mask, dtype=bool))
        if mask.ndim == 1:
            mask = mask.unsqueeze(0).expand(batch, -1)
        if mask.shape != (batch, self.n_tokens):
            raise ShapeMismatchError(f"mask shape {tuple(mask.shape)} != ({batch}, {self.n_tokens})")
        counts = mask.sum(dim=1)
        if counts.min() < 1 or counts.max() > self.n_tokens - 1 or counts.min() != counts.max():
            raise InvalidArgumentError("each sample must mask the same count in [1, M-1]")
        return mask

    def forward_mae(
        self, clusters: list[torch.Tensor], mask
    ) -> tuple[list[torch.Tensor | None], torch.Tensor, torch.Tensor]:
        """Run the masked autoencoder.

        Returns (per-cluster reconstructions for masked rows or None where a
        cluster is never masked, encoder outputs (B, V, d_model), the (B, M)
        boolean mask actually used).
        """
        tokens = self._tokens(clusters)
        b = tokens.shape[0]
        mask_b = self._as_bool_mask(mask, b).to(tokens.device)
        n_vis = self.n_tokens - int(mask_b[0].sum())
        # stable argsort of the mask puts visible indices first, in order
        vis_idx = torch.argsort(mask_b.to(torch.int64), dim=1, stable=True)[:, :n_vis]
        x = torch.gather(tokens, 1, vis_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))
        for blk in self.enc_blocks:
            x = blk(x)
        enc_out = x
        if not torch.isfinite(enc_out).all():
            raise NumericError("non-finite activations leaving the encoder")
        dec_x = (self.mask_token + self.dec_pos).unsqueeze(0).expand(b, -1, -1)
        vis_dec = self.adapter(enc_out) + self.dec_pos[vis_idx]
        dec_x = dec_x.scatter(1, vis_idx.unsqueeze(-1).expand(-1, -1, dec_x.shape[-1]), vis_dec)
        for blk in self.dec_blocks:
            dec_x = blk(dec_x)
        if not torch.isfinite(dec_x).all():
            raise NumericError("non-finite activations leaving the decoder")
        recons: list[torch.Tensor | None] = []
        for i in range(self.n_tokens):
            rows = mask_b[:, i]
            recons.append(self.heads[i](dec_x[rows, i]) if bool(rows.any()) else None)
        return recons, enc_out, mask_b

    def loss(
        self, clusters: list[torch.Tensor], mask, targets: list[torch.Tensor] | None = None
    ) -> torch.Tensor:
        """Masked reconstruction loss: per-cluster MSE, averaged over the
        (batch, masked-cluster) pairs; unmasked clusters contribute nothing.

        ``targets`` defaults to ``clusters`` (plain autoencoding); only the
        masked clusters' target values are ever read.
        """
        recons, _, mask_b = self.forward_mae(clusters, mask)
        if targets is None:
            targets = clusters
        total = None
        n_terms = int(mask_b.sum())
        for i, rec in enumerate(recons):
            if rec is None:
                continue
            target = targets[i][mask_b[:, i]]
            per_sample = ((rec - target) ** 2).mean(dim=1)
            term = per_sample.sum()
            total = term if total is None else total + term
        if total is None:
            raise InvalidArgumentError("mask is empty")
        return total / n_terms

    def encode(self, clusters: list[torch.Tensor]) -> torch.Tensor:
        """Mean-pooled encoder output over all tokens, no masking."""
        x = self._tokens(clusters)
        for blk in self.enc_blocks:
            x = blk(x)
        return x.mean(dim=1)


def masked_mse(
    preds: list[torch.Tensor | np.ndarray | None],
    targets: list[torch.Tensor | np.ndarray | None],
) -> float:
    """Mean over masked clusters of that cluster's elementwise MSE."""
    terms = []
    for pred, tgt in zip(preds, targets):
        if pred is None and tgt is None:
            continue
        if pred is None or tgt is None:
            raise InvalidArgumentError("prediction/target mask disagreement")
        p = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
        t = np.asarray(tgt.detach().cpu() if isinstance(tgt, torch.Tensor) else tgt, dtype=np.float64)
        if p.shape != t.shape:
            raise ShapeMismatchError(f"prediction {p.shape} vs target {t.shape}")
        terms.append(((p - t) ** 2).mean())
    if not terms:
        raise InvalidArgumentError("mask is empty")
    return float(np.mean(terms))


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic init from per-tensor Philox streams.

    Weight matrices get truncated-normal(std 0.02), biases zero, mask token
    and positional embeddings normal * 0.02, layer norms identity. The stream
    is keyed by parameter name, so unrelated tensors never shift each other.
    """
    for name, param in model.named_parameters():
        rng = substream(seed, "init", name)
        shape = tuple(param.shape)
        if name.endswith("mask_token") or "pos" in name.split(".")[-1]:
            values = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith("bias") or "norm" in name:
            if name.endswith("weight"):  # layer norm scale
                values = np.ones(shape)
            else:
                values = np.zeros(shape)
        else:
            values = truncated_normal(rng, shape, std=0.02)
        with torch.no_grad():
            param.copy_(torch.from_numpy(np.ascontiguousarray(values)).to(param.dtype))


def collect_gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter, keyed by name."""
    model.zero_grad(set_to_none=True)
    loss.backward()
    out = {}
    for name, param in model.named_parameters():
        grad = param.grad
        out[name] = (
            np.zeros(tuple(param.shape)) if grad is None else grad.detach().cpu().numpy().copy()
        )
    return out


def alignment_metric(
    weights: list[np.ndarray], perms: list[Permutation]
) -> float:
    """Mean pairwise cosine similarity of un-permuted projection filters.

    For equal-size clusters whose inputs were scrambled by known bijections,
    undo each cluster's permutation on its weight columns and compare the
    resulting filters across clusters, column by column. 1 means every
    cluster learned the same projection up to its permutation; random
    weights score near 0.
    """
    if len(weights) != len(perms):
        raise InvalidArgumentError(f"{len(weights)} weight matrices vs {len(perms)} permutations")
    sizes = {w.shape[1] for w in weights}
    if len(sizes) != 1:
        raise InvalidArgumentError(f"clusters must share one size, got {sorted(sizes)}")
    aligned = np.stack(
        [w[:, perm.inverse().mapping] for w, perm in zip(weights, perms)], axis=0
    )  # (M, d_model, size)
    norms = np.linalg.norm(aligned, axis=2, keepdims=True)
    unit = aligned / np.where(norms < 1e-30, 1.0, norms)
    m = unit.shape[0]
    if m < 2:
        raise InvalidArgumentError("need at least two clusters")
    s = unit.sum(axis=0)  # (d_model, size)
    sq = (unit**2).sum(axis=(0, 2))  # (d_model,) == M for nonzero filters
    pair_sum = 0.5 * ((s**2).sum(axis=1) - sq)
    return float(pair_sum.mean() / (m * (m - 1) / 2.0))


def clusters_from_assignment(
    signals: np.ndarray, assignment: ClusterAssignment, dtype=torch.float64
) -> list[torch.Tensor]:
    """Split an (N, D) array into per-cluster tensors ordered by cluster id."""
    if signals.shape[1] != assignment.n_dims:
        raise ShapeMismatchError(
            f"signal dimension {signals.shape[1]} != assignment size {assignment.n_dims}"
        )
    full = torch.as_tensor(signals, dtype=dtype)
    return [full[:, torch.from_numpy(idx)] for idx in assignment.members()]
