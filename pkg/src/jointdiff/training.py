"""Two-stage training.

Stage "pretrain" fits the single-branch base on the image marginal with the
standard noise-prediction least squares objective. Stage "adapt" freezes the
base and trains only the attached adapter set under independently sampled
per-branch timesteps:

    loss = mean ||eps_x - eps_hat_x||^2 + [loss_y_enabled] * mean ||eps_y - eps_hat_y||^2

Everything is reproducible from one seed via named substreams; the base
parameters are checksummed so adapt runs can prove they never touched them.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericalFailure
from .model import BaseDenoiser, JointDenoiser
from .rng import numpy_stream, torch_stream
from .schedule import NoiseSchedule, add_noise


@dataclass
class TrainConfig:
    stage: str = "adapt"  # {"pretrain", "adapt"}
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss_y_enabled: bool = True
    seed: int = 0
    t_min_train: int = 1
    save_every: int = 0  # 0 = final checkpoint only
    hflip: bool = False
    lr_schedule: str = "none"  # {"none", "cosine"}
    lr_min: float = 1e-5

    def __post_init__(self):
        if self.stage not in ("pretrain", "adapt"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.t_min_train < 1:
            raise ConfigError("t_min_train must be >= 1; t = 0 is inference-only")
        if self.lr_schedule not in ("none", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


class TrainStreams:
    """Named RNG substreams for one training run."""

    def __init__(self, seed: int):
        self.tsteps_x = numpy_stream(seed, "tsteps.x")
        self.tsteps_y = numpy_stream(seed, "tsteps.y")
        self.noise_x = torch_stream(seed, "noise.x")
        self.noise_y = torch_stream(seed, "noise.y")
        self.augment = numpy_stream(seed, "augment")


def sample_timesteps_disentangled(
    batch_size: int, schedule: NoiseSchedule, streams: TrainStreams, t_min: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Independent uniform draws over {t_min..T} for each branch."""
    t_x = streams.tsteps_x.integers(t_min, schedule.T + 1, size=batch_size)
    t_y = streams.tsteps_y.integers(t_min, schedule.T + 1, size=batch_size)
    return t_x, t_y


def _check_finite(loss: torch.Tensor, step: int, parts: dict) -> None:
    if not torch.isfinite(loss):
        raise NumericalFailure(f"non-finite loss at step {step}: {parts}")


def pretrain_step(x_batch: torch.Tensor, base_model, config: TrainConfig, schedule: NoiseSchedule, streams: TrainStreams, step: int = 0):
    """Single-branch denoising loss; all base parameters trainable."""
    b = x_batch.shape[0]
    t = streams.tsteps_x.integers(config.t_min_train, schedule.T + 1, size=b)
    eps = torch.randn(x_batch.shape, generator=streams.noise_x, dtype=x_batch.dtype)
    x_t = add_noise(x_batch, t, eps, schedule)
    eps_hat = base_model(x_t, torch.from_numpy(t))
    loss = torch.mean((eps_hat - eps) ** 2)
    _check_finite(loss.detach(), step, {"loss": float(loss.detach())})
    return loss


def adapt_training_step(pair_batch, model: JointDenoiser, config: TrainConfig, schedule: NoiseSchedule, streams: TrainStreams, step: int = 0):
    """Joint denoising loss under disentangled per-branch timesteps.

    Returns (loss, loss_x, loss_y); gradients reach only the adapter set
    because the base is frozen by the adapt stage.
    """
    x0, y0 = pair_batch
    t_x, t_y = sample_timesteps_disentangled(x0.shape[0], schedule, streams, config.t_min_train)
    eps_x = torch.randn(x0.shape, generator=streams.noise_x, dtype=x0.dtype)
    eps_y = torch.randn(y0.shape, generator=streams.noise_y, dtype=y0.dtype)
    x_t = add_noise(x0, t_x, eps_x, schedule)
    y_t = add_noise(y0, t_y, eps_y, schedule)
    eh_x, eh_y = model(x_t, y_t, torch.from_numpy(t_x), torch.from_numpy(t_y))
    loss_x = torch.mean((eh_x - eps_x) ** 2)
    loss_y = torch.mean((eh_y - eps_y) ** 2)
    loss = loss_x + loss_y if config.loss_y_enabled else loss_x
    lx, ly = float(loss_x.detach()), float(loss_y.detach())
    _check_finite(loss.detach(), step, {"loss_x": lx, "loss_y": ly})
    return loss, lx, ly


def base_checksum(base: BaseDenoiser) -> str:
    h = hashlib.sha256()
    for name, p in sorted(base.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _maybe_flip(x0: torch.Tensor, y0: torch.Tensor | None, config: TrainConfig, streams: TrainStreams):
    if not config.hflip:
        return x0, y0
    flip = torch.from_numpy(streams.augment.random(x0.shape[0]) < 0.5)
    x0 = torch.where(flip[:, None, None, None], x0.flip(-1), x0)
    if y0 is not None:
        y0 = torch.where(flip[:, None, None, None], y0.flip(-1), y0)
    return x0, y0


@dataclass
class TrainResult:
    losses: list
    checkpoint_path: Path | None
    metrics_path: Path | None
    base_checksum_before: str
    base_checksum_after: str
    wall_seconds: float
    extra: dict = field(default_factory=dict)


def train(
    config: TrainConfig,
    dataset,
    model,
    schedule: NoiseSchedule,
    out_dir=None,
    checkpoint_name: str | None = None,
) -> TrainResult:
    """Run one stage to completion.

    ``model`` is a BaseDenoiser for pretraining or a JointDenoiser with an
    attached adapter set for adaptation. Writes a metrics CSV with columns
    step,loss_x,loss_y,loss_total,wall_ms and a checkpoint (every
    ``save_every`` steps when nonzero, and always at the end) under out_dir.
    Fully reproducible for a given seed on the same build.
    """
    from .checkpoint import save_adapter_checkpoint, save_base_checkpoint

    streams = TrainStreams(config.seed)
    if config.stage == "pretrain":
        if not isinstance(model, BaseDenoiser):
            raise ConfigError("pretrain stage expects a BaseDenoiser")
        base = model
        params = list(model.parameters())
    else:
        if not isinstance(model, JointDenoiser) or model.adapter_set is None:
            raise ConfigError("adapt stage expects a JointDenoiser with an attached adapter set")
        base = model.base
        base.requires_grad_(False)
        params = list(model.adapter_set.parameters())

    checksum_before = base_checksum(base)
    opt = torch.optim.AdamW(
        params, lr=config.lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
    )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = None
    metrics_path = None
    rows = []
    losses = []
    t_start = time.perf_counter()

    def save(tag: str) -> Path:
        provenance = {"stage": config.stage, "steps": config.steps, "seed": config.seed, "tag": tag}
        if config.stage == "pretrain":
            path = out_dir / (checkpoint_name or f"base_{tag}.uckp")
            save_base_checkpoint(path, base, schedule, provenance)
        else:
            path = out_dir / (checkpoint_name or f"adapter_{tag}.uckp")
            save_adapter_checkpoint(path, model.adapter_set, model.cfg, schedule, provenance)
        return path

    for step in range(config.steps):
        step_t0 = time.perf_counter()
        if config.lr_schedule == "cosine":
            frac = step / max(config.steps - 1, 1)
            lr_now = config.lr_min + 0.5 * (config.lr - config.lr_min) * (1 + np.cos(np.pi * frac))
            for group in opt.param_groups:
                group["lr"] = lr_now
        if config.stage == "pretrain":
            x0 = dataset.batch(step, config.batch_size)[0]
            x0, _ = _maybe_flip(x0, None, config, streams)
            loss = pretrain_step(x0, model, config, schedule, streams, step)
            loss_x, loss_y = float(loss.detach()), 0.0
        else:
            x0, y0 = dataset.batch(step, config.batch_size)
            x0, y0 = _maybe_flip(x0, y0, config, streams)
            loss, loss_x, loss_y = adapt_training_step((x0, y0), model, config, schedule, streams, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        wall_ms = (time.perf_counter() - step_t0) * 1000.0
        losses.append(float(loss.detach()))
        rows.append((step, loss_x, loss_y, float(loss.detach()), wall_ms))
        if out_dir is not None and config.save_every and (step + 1) % config.save_every == 0 and (step + 1) < config.steps:
            save(f"step{step + 1:06d}")

    if out_dir is not None:
        ckpt_path = save("final")
        metrics_path = out_dir / f"metrics_{config.stage}.csv"
        with open(metrics_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss_x", "loss_y", "loss_total", "wall_ms"])
            writer.writerows(rows)

    checksum_after = base_checksum(base)
    if config.stage == "adapt" and checksum_after != checksum_before:
        raise NumericalFailure("frozen base parameters changed during an adapt run")

    return TrainResult(
        losses=losses,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        base_checksum_before=checksum_before,
        base_checksum_after=checksum_after,
        wall_seconds=time.perf_counter() - t_start,
    )
