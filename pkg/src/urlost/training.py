"""Deterministic training loop for the cluster-token masked autoencoder.

All randomness (init, batch order, masks) comes from per-purpose Philox
streams keyed by (seed, epoch), so a run is a pure function of its inputs and
an interrupted run resumed from a checkpoint replays the remaining epochs
bitwise identically (in double precision). The optimizer is Adam with
decoupled weight decay and a linear-warmup/cosine schedule; its moment
tensors are serialized alongside the parameters in the checkpoint container.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .datasets import Permutation
from .errors import InvalidArgumentError, NumericError
from .model import (
    ClusterMae,
    ModelConfig,
    alignment_metric,
    clusters_from_assignment,
    init_parameters,
    sample_mask_batch,
)
from .rng import substream
from .spectral import ClusterAssignment


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    mask_ratio: float = 0.75
    learning_rate: float | None = None  # default: 1.5e-4 * batch_size / 256
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    seed: int = 0
    precision: str = "f64"  # f64 for verification, f32 for speed

    def __post_init__(self) -> None:
        if not 0.0 < self.mask_ratio < 1.0:
            raise InvalidArgumentError("mask ratio must lie in (0, 1)")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise InvalidArgumentError("epochs and batch size must be positive")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise InvalidArgumentError("learning rate must be nonnegative")
        if self.precision not in ("f32", "f64"):
            raise InvalidArgumentError(f"precision must be f32 or f64, got {self.precision}")

    @property
    def base_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1.5e-4 * self.batch_size / 256.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class TrainResult:
    model: ClusterMae
    assignment: ClusterAssignment
    loss_curve: list[float]
    alignment_curve: list[float] = field(default_factory=list)
    checkpoint_path: Path | None = None


class AdamW:
    """Decoupled-weight-decay Adam with serializable moment state.

    Weight decay applies only to matrices (ndim >= 2): biases, norms, mask
    token and positional embeddings are left unregularized.
    """

    def __init__(self, named_params, beta1, beta2, eps, weight_decay):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.named_params}
        self.v = {n: torch.zeros_like(p) for n, p in self.named_params}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, param in self.named_params:
            if param.grad is None:
                continue
            grad = param.grad
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.beta1).add_(grad, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(grad, grad, value=1.0 - self.beta2)
            if self.weight_decay and param.ndim >= 2:
                param.mul_(1.0 - lr * self.weight_decay)
            update = (m / bc1) / ((v / bc2).sqrt() + self.eps)
            param.add_(update, alpha=-lr)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([[float(self.step_count)]])}
        for name, _ in self.named_params:
            out[f"opt.m.{name}"] = self.m[name].detach().cpu().numpy()
            out[f"opt.v.{name}"] = self.v[name].detach().cpu().numpy()
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["opt.step"].ravel()[0])
        for name, param in self.named_params:
            self.m[name] = torch.as_tensor(tensors[f"opt.m.{name}"], dtype=param.dtype).clone()
            self.v[name] = torch.as_tensor(tensors[f"opt.v.{name}"], dtype=param.dtype).clone()


def schedule_lr(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup over the first warmup epochs, cosine decay to zero after."""
    total = cfg.epochs * steps_per_epoch
    warm = min(cfg.warmup_epochs * steps_per_epoch, total)
    if step < warm:
        return cfg.base_lr * (step + 1) / warm
    if total == warm:
        return cfg.base_lr
    progress = (step - warm) / (total - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _torch_dtype(precision: str):
    return torch.float64 if precision == "f64" else torch.float32


def build_model(
    assignment: ClusterAssignment, model_cfg: ModelConfig, train_cfg: TrainConfig
) -> ClusterMae:
    model = ClusterMae([int(s) for s in assignment.sizes], model_cfg)
    model = model.to(_torch_dtype(train_cfg.precision))
    init_parameters(model, train_cfg.seed)
    return model


def train(
    signals: np.ndarray,
    assignment: ClusterAssignment,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    perms: list[Permutation] | None = None,
    resume_from: str | Path | None = None,
    provenance: dict | None = None,
    epoch_limit: int | None = None,
) -> TrainResult:
    """Fit the masked autoencoder; optionally log/checkpoint into ``out_dir``.

    When ``perms`` is given (locally-permuted data with known patch
    scrambles), the filter-alignment metric is recorded once per epoch.
    ``epoch_limit`` stops this invocation early (before ``cfg.epochs``)
    without changing the schedule; a later resume completes the run.
    """
    signals = np.asarray(signals, dtype=np.float64)
    n = signals.shape[0]
    dtype = _torch_dtype(train_cfg.precision)
    steps_per_epoch = max(1, math.ceil(n / train_cfg.batch_size))

    start_epoch = 0
    loss_curve: list[float] = []
    alignment_curve: list[float] = []
    if resume_from is None:
        model = build_model(assignment, model_cfg, train_cfg)
        optimizer = AdamW(
            list(model.named_parameters()),
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.eps,
            train_cfg.weight_decay,
        )
    else:
        model, ck_assignment, model_cfg, train_cfg_ck, extra, tensors = load_checkpoint_model(
            resume_from
        )
        if train_cfg_ck.to_dict() != train_cfg.to_dict():
            raise InvalidArgumentError("resume config differs from checkpoint config")
        if not np.array_equal(ck_assignment.labels, assignment.labels):
            raise InvalidArgumentError("resume cluster assignment differs from checkpoint")
        assignment = ck_assignment
        optimizer = AdamW(
            list(model.named_parameters()),
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.eps,
            train_cfg.weight_decay,
        )
        optimizer.load_state_tensors(tensors)
        start_epoch = int(extra["epoch"]) + 1
        loss_curve = list(extra.get("loss_curve", []))
        alignment_curve = list(extra.get("alignment_curve", []))

    clusters = clusters_from_assignment(signals, assignment, dtype)
    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_path / "model.ckpt" if out_path else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)

    last_epoch = train_cfg.epochs if epoch_limit is None else min(train_cfg.epochs, epoch_limit)
    for epoch in range(start_epoch, last_epoch):
        order = substream(train_cfg.seed, "shuffle", epoch).permutation(n)
        mask_rng = substream(train_cfg.seed, "mask", epoch)
        total, seen = 0.0, 0
        for step in range(steps_per_epoch):
            rows = order[step * train_cfg.batch_size : (step + 1) * train_cfg.batch_size]
            if len(rows) == 0:
                continue
            batch = [c[torch.from_numpy(rows)] for c in clusters]
            mask_b = sample_mask_batch(
                assignment.M, train_cfg.mask_ratio, mask_rng, len(rows)
            )
            loss = model.loss(batch, mask_b)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericError(
                    f"loss diverged at epoch {epoch} step {step}; "
                    f"last checkpoint is epoch {epoch - 1}"
                )
            model.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step(schedule_lr(train_cfg, epoch * steps_per_epoch + step, steps_per_epoch))
            total += value * len(rows)
            seen += len(rows)
        loss_curve.append(total / seen)
        if perms is not None:
            alignment_curve.append(alignment_metric(model.so_layer.weight_matrices(), perms))
        if out_path:
            _append_log(out_path / "training_log.csv", epoch, loss_curve[-1],
                        schedule_lr(train_cfg, (epoch + 1) * steps_per_epoch - 1, steps_per_epoch),
                        alignment_curve[-1] if perms is not None else None)
            save_checkpoint_model(
                ckpt_path, model, assignment, model_cfg, train_cfg, optimizer,
                epoch=epoch, loss_curve=loss_curve, alignment_curve=alignment_curve,
                provenance=provenance,
            )
    return TrainResult(model, assignment, loss_curve, alignment_curve, ckpt_path)


def _append_log(path: Path, epoch: int, loss: float, lr: float, alignment: float | None) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "loss", "lr", "alignment"])
        writer.writerow([epoch, f"{loss:.17g}", f"{lr:.17g}",
                         "" if alignment is None else f"{alignment:.17g}"])


def save_checkpoint_model(
    path: str | Path,
    model: ClusterMae,
    assignment: ClusterAssignment,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    optimizer: AdamW | None = None,
    epoch: int = -1,
    loss_curve: list[float] | None = None,
    alignment_curve: list[float] | None = None,
    provenance: dict | None = None,
) -> None:
    config = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "clusters": {"M": int(assignment.M), "labels": assignment.labels.tolist()},
        "epoch": int(epoch),
        "loss_curve": [float(v) for v in (loss_curve or [])],
        "alignment_curve": [float(v) for v in (alignment_curve or [])],
        "provenance": provenance or {},
    }
    tensors: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        tensors[f"param.{name}"] = param.detach().cpu().numpy()
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    io.save_checkpoint(path, config, tensors)


def load_checkpoint_model(
    path: str | Path,
) -> tuple[ClusterMae, ClusterAssignment, ModelConfig, TrainConfig, dict, dict[str, np.ndarray]]:
    config, tensors = io.load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(config["model"])
    train_cfg = TrainConfig.from_dict(config["train"])
    assignment = ClusterAssignment(
        np.array(config["clusters"]["labels"], dtype=np.int64), int(config["clusters"]["M"])
    )
    model = ClusterMae([int(s) for s in assignment.sizes], model_cfg)
    model = model.to(_torch_dtype(train_cfg.precision))
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(torch.as_tensor(tensors[f"param.{name}"], dtype=param.dtype))
    return model, assignment, model_cfg, train_cfg, config, tensors


def encode_signals(
    model: ClusterMae, signals: np.ndarray, assignment: ClusterAssignment, batch: int = 512
) -> np.ndarray:
    """Mean-pooled encoder representations for every row of ``signals``."""
    dtype = next(model.parameters()).dtype
    clusters = clusters_from_assignment(np.asarray(signals, dtype=np.float64), assignment, dtype)
    n = signals.shape[0]
    chunks = []
    with torch.no_grad():
        for start in range(0, n, batch):
            part = [c[start : start + batch] for c in clusters]
            chunks.append(model.encode(part).cpu().numpy())
    return np.concatenate(chunks, axis=0)
