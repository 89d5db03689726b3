"""Training loop: exponential lr decay per epoch, SGD-momentum / AdamW, clipping, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from tomformer import tensor as T
from tomformer.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from tomformer.data import DatasetManifest, Sample, batch, load_samples
from tomformer.errors import ConfigError, NumericalError
from tomformer.matching import LossBreakdown, LossWeights, set_loss
from tomformer.model import ModelConfig, ModelParams, forward, init_parameters

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay_per_epoch: float = 0.05
    epochs: int = 10
    batch_size: int = 4
    optimizer: str = "sgd"  # "sgd" (momentum) or "adamw"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float | None = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if not 0 <= self.lr_decay_per_epoch < 1:
            raise ConfigError("lr_decay_per_epoch must be in [0, 1)")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.initial_lr * (1.0 - cfg.lr_decay_per_epoch) ** epoch


class Optimizer:
    """Per-parameter state keyed by tensor name, so it can be checkpointed."""

    kind = ""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: ModelParams, lr: float) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"optim/{k}": v for k, v in self.state.items()}

    def load_state(self, arrays: dict[str, np.ndarray], steps: int) -> None:
        self.state = {k[len("optim/") :]: v.copy() for k, v in arrays.items() if k.startswith("optim/")}
        self.steps = steps


class SGDMomentum(Optimizer):
    """v = momentum * v + g; p -= lr * v."""

    kind = "sgd"

    def step(self, params, lr):
        mu = self.cfg.momentum
        for name, p in params.items():
            if p.grad is None:
                continue
            v = self.state.get(f"v.{name}")
            v = p.grad.copy() if v is None else mu * v + p.grad
            self.state[f"v.{name}"] = v
            p.data = p.data - lr * v
        self.steps += 1


class AdamW(Optimizer):
    kind = "adamw"

    def step(self, params, lr):
        b1, b2 = self.cfg.betas
        self.steps += 1
        t = self.steps
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self.state.get(f"m.{name}", np.zeros_like(p.data))
            v = self.state.get(f"v.{name}", np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * p.grad
            v = b2 * v + (1 - b2) * p.grad * p.grad
            self.state[f"m.{name}"], self.state[f"v.{name}"] = m, v
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            decayed = p.data * (1 - lr * self.cfg.weight_decay)
            p.data = decayed - lr * m_hat / (np.sqrt(v_hat) + self.cfg.adam_eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return SGDMomentum(cfg) if cfg.optimizer == "sgd" else AdamW(cfg)


def clip_gradients(params: ModelParams, max_norm: float | None) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def batch_loss(params: ModelParams, config: ModelConfig, images, targets, weights: LossWeights = LossWeights()):
    """Mean set loss over a batch; returns the graph scalar and a float breakdown."""
    parts = []
    for img, tg in zip(images, targets):
        out = forward(img, params, config)
        for term, t in (("class_logits", out.class_logits), ("boxes", out.boxes)):
            if not np.all(np.isfinite(t.data)):
                raise NumericalError(f"non-finite model output: {term}")
        parts.append(set_loss(out, tg, weights))
    n = len(parts)
    total = parts[0].loss
    for part in parts[1:]:
        total = total + part.loss
    total = total * (1.0 / n)
    summary = LossBreakdown(
        total=total.item(),
        class_term=sum(p.class_term for p in parts) / n,
        l1_term=sum(p.l1_term for p in parts) / n,
        giou_term=sum(p.giou_term for p in parts) / n,
        assignment=parts[0].assignment,
        loss=total,
    )
    return summary, parts


def _check_finite(summary: LossBreakdown) -> None:
    for term, value in summary.as_dict().items():
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss: {term} = {value}")


def train_step(
    params: ModelParams,
    batch_data: tuple[Sequence, Sequence],
    cfg: TrainConfig,
    model_config: ModelConfig,
    optimizer: Optimizer,
    lr: float,
    weights: LossWeights = LossWeights(),
) -> tuple[ModelParams, LossBreakdown]:
    """forward -> set loss -> backward -> clip -> optimizer update, in place."""
    images, targets = batch_data
    if not images:
        raise ValueError("train_step needs a non-empty batch")
    params.zero_grad()
    summary, _ = batch_loss(params, model_config, images, targets, weights)
    _check_finite(summary)
    T.backward(summary.loss)
    norm = clip_gradients(params, cfg.grad_clip)
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm {norm}")
    optimizer.step(params, lr)
    params.zero_grad()
    summary.loss = None
    return params, summary


def _write_checkpoint(path: Path, params, model_config, cfg, optimizer, epoch: int) -> None:
    meta = {"epoch": epoch, "optimizer": optimizer.kind, "optimizer_steps": optimizer.steps, "train": cfg.to_dict()}
    save_checkpoint(path, params, model_config, meta=meta, extra=optimizer.state_arrays())


def fit(
    model_config: ModelConfig,
    cfg: TrainConfig,
    manifest: DatasetManifest | Sequence[Sample],
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    weights: LossWeights = LossWeights(),
) -> tuple[ModelParams, Path]:
    """Train for ``cfg.epochs`` epochs, writing ``train_log.jsonl`` and ``checkpoint.bin`` in ``out_dir``.

    With ``resume`` the parameters, optimizer state and epoch counter come
    from that checkpoint and training continues up to ``cfg.epochs``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(manifest, DatasetManifest):
        if not len(manifest):
            raise ValueError("cannot train on an empty manifest")
        samples = load_samples(manifest, model_config.image_height, model_config.image_width)
    else:
        samples = list(manifest)
    if not samples:
        raise ValueError("cannot train on an empty dataset")

    optimizer = make_optimizer(cfg)
    start_epoch = 0
    if resume is not None:
        params, _ = load_checkpoint(resume, model_config)
        header, arrays = read_checkpoint(resume)
        start_epoch = int(header["meta"].get("epoch", 0))
        optimizer.load_state(arrays, int(header["meta"].get("optimizer_steps", 0)))
    else:
        params = init_parameters(model_config, cfg.seed)

    log_path = out / "train_log.jsonl"
    ckpt_path = out / "checkpoint.bin"
    step = optimizer.steps
    mode = "a" if resume is not None else "w"
    with open(log_path, mode, encoding="utf-8") as logf:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            t0 = time.perf_counter()
            seen, acc = 0, np.zeros(4)
            for images, targets in batch(samples, cfg.batch_size, shuffle_seed=cfg.seed * 100_003 + epoch):
                params, summary = train_step(params, (images, targets), cfg, model_config, optimizer, lr, weights)
                n = len(images)
                acc += n * np.array(list(summary.as_dict().values()))
                seen += n
                record = {"kind": "step", "epoch": epoch, "step": step, "lr": lr, **summary.as_dict()}
                record["wall_time"] = time.perf_counter() - t0
                logf.write(json.dumps(record) + "\n")
                step += 1
            means = dict(zip(("total", "class_term", "l1_term", "giou_term"), (acc / seen).tolist()))
            record = {"kind": "epoch", "epoch": epoch, "step": step, "lr": lr, **means}
            record["wall_time"] = time.perf_counter() - t0
            logf.write(json.dumps(record) + "\n")
            logf.flush()
            log.info("epoch %d lr %.6g loss %.4f", epoch, lr, means["total"])
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                _write_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.bin", params, model_config, cfg, optimizer, epoch + 1)
    _write_checkpoint(ckpt_path, params, model_config, cfg, optimizer, max(cfg.epochs, start_epoch))
    return params, ckpt_path


def read_log(path: str | os.PathLike, kind: str | None = "epoch") -> list[dict]:
    records = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    return [r for r in records if kind is None or r.get("kind") == kind]
