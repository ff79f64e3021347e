"""Conditional denoiser training with EMA shadow weights and resumable checkpoints.

Every random draw of step ``s`` (batch order, timesteps, diffusion noise and
previous-frame noise) comes from generators derived from ``(seed, s)``, so a
run resumed from a checkpoint replays exactly the same draws as an
uninterrupted one.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import ModelCheckpoint
from .data import TrainingSample
from .denoiser import ConditionalUNet, DenoiserConfig, noise_previous
from .diffusion import NoiseSchedule, build_schedule, diffuse_pair
from .errors import ConfigError, DataIOError, NumericalError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 400
    max_steps: int | None = None
    learning_rate: float = 2e-5
    batch_size: int = 4
    ema_decay: float = 0.9999
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    checkpoint_interval: int = 1000
    optimizer: str = "adam"
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate}")
        # decay == 1 freezes the shadow; allowed for audits
        if not 0 < self.ema_decay <= 1:
            raise ConfigError(f"ema_decay: must lie in (0, 1], got {self.ema_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max_steps: must be >= 0, got {self.max_steps}")
        if self.checkpoint_interval < 1:
            raise ConfigError(f"checkpoint_interval: must be >= 1, got {self.checkpoint_interval}")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"optimizer: unsupported {self.optimizer!r}")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, dtype=np.uint64)[0] >> 1)


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stream, step))


def batch_indices(seed: int, step: int, n_samples: int, batch_size: int) -> list[int]:
    """Dataset indices for 0-based ``step``; each epoch is a fresh permutation."""
    per_epoch = math.ceil(n_samples / batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = torch.randperm(n_samples, generator=step_generator(seed, epoch, stream=1))
    return perm[pos * batch_size : (pos + 1) * batch_size].tolist()


def collate(samples: Sequence[TrainingSample]) -> dict[str, torch.Tensor]:
    try:
        return {
            "low_res": torch.stack([s.low_res for s in samples]),
            "identity": torch.stack([s.identity for s in samples]),
            "target": torch.stack([s.target for s in samples]),
            "previous": torch.stack([s.previous for s in samples]),
        }
    except RuntimeError as e:
        raise ShapeError(f"inconsistent sample shapes in batch: {e}") from e


class EMA:
    """Shadow copy updated as ``ema <- decay * ema + (1 - decay) * weights``."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module):
        d = self.decay
        for k, v in model.state_dict().items():
            if v.is_floating_point():
                self.shadow[k].mul_(d).add_(v, alpha=1.0 - d)
            else:
                self.shadow[k].copy_(v)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: dict[str, torch.Tensor]):
        self.shadow = {k: v.detach().clone() for k, v in state.items()}


def init_model(config: DenoiserConfig, seed: int) -> ConditionalUNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, 2))
        return ConditionalUNet(config)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    return cls(model.parameters(), lr=config.learning_rate)


def diffusion_loss(model, batch, schedule, generator, audit=None):
    """Build the paired target for random timesteps and return the MSE."""
    target = batch["target"]
    b = target.shape[0]
    t = torch.randint(1, schedule.total_steps + 1, (b,), generator=generator)
    eps = torch.randn(target.shape, generator=generator, dtype=target.dtype)
    x_t, x_prev = diffuse_pair(target, t, eps, schedule)
    previous = None
    if model.config.use_previous_frame:
        previous = noise_previous(batch["previous"], model.config, generator)
    pred = model(x_t, t, batch["identity"], batch["low_res"], previous)
    if audit is not None:
        audit.append({"t": t.clone(), "previous_noised": None if previous is None else previous.detach().clone()})
    return F.mse_loss(pred, x_prev), t


def train_step(model, ema, optimizer, batch, schedule, generator, step=0, grad_clip=None, audit=None) -> float:
    """One optimizer update on ``batch``; returns the loss before the update."""
    model.train()
    loss, t = diffusion_loss(model, batch, schedule, generator, audit)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()} at step {step} with t={t.tolist()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    ema.update(model)
    return loss.item()


class Trainer:
    """Owns the model, EMA, optimizer and step counter for one run."""

    def __init__(
        self,
        samples: Sequence[TrainingSample],
        config: TrainConfig,
        denoiser_config: DenoiserConfig,
        output_dir: str | os.PathLike | None = None,
        resume: ModelCheckpoint | str | os.PathLike | None = None,
    ):
        if len(samples) == 0:
            raise ConfigError("dataset: no training samples")
        self.samples = list(samples)
        self.config = config
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.losses: list[float] = []

        if resume is not None:
            ckpt = resume if isinstance(resume, ModelCheckpoint) else ModelCheckpoint.load(resume)
            denoiser_config = ckpt.denoiser_config
            self.schedule = ckpt.schedule
            self.model = ConditionalUNet(denoiser_config)
            self.model.load_state_dict(ckpt.model_state)
            self.ema = EMA(self.model, config.ema_decay)
            self.ema.load_state_dict(ckpt.ema_state)
            self.optimizer = make_optimizer(self.model, config)
            if ckpt.optimizer_state is not None:
                self.optimizer.load_state_dict(ckpt.optimizer_state)
            self.step = ckpt.global_step
        else:
            self.schedule = config.schedule()
            self.model = init_model(denoiser_config, config.seed)
            self.ema = EMA(self.model, config.ema_decay)
            self.optimizer = make_optimizer(self.model, config)
            self.step = 0
        self.denoiser_config = denoiser_config

        shape = self.samples[0].target.shape
        if shape != (3, denoiser_config.image_size, denoiser_config.image_size):
            raise ShapeError(f"training frames are {tuple(shape)}, model expects 3x{denoiser_config.image_size}^2")

    @property
    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * math.ceil(len(self.samples) / self.config.batch_size)

    def checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint(
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            ema_state=self.ema.state_dict(),
            schedule=self.schedule,
            denoiser_config=self.denoiser_config,
            train_config=self.config.to_dict(),
            global_step=self.step,
            optimizer_state=self.optimizer.state_dict(),
        )

    def save(self) -> Path | None:
        if self.output_dir is None:
            return None
        ckpt = self.checkpoint()
        ckpt.save(self.output_dir / f"ckpt_{self.step:07d}.npz")
        return ckpt.save(self.output_dir / "last.npz")

    def _log(self, loss: float):
        if self.output_dir is None:
            return
        lr = self.optimizer.param_groups[0]["lr"]
        path = self.output_dir / "train_log.txt"
        try:
            with open(path, "a") as f:
                f.write(f"{self.step} {loss!r} {lr!r} {time.time():.3f}\n")
        except OSError as e:
            raise DataIOError(f"cannot append to training log {path}: {e}") from e

    def run(self, n_steps: int | None = None, callback: Callable[[int, float], None] | None = None) -> ModelCheckpoint:
        """Train until ``total_steps`` (or for ``n_steps`` more steps)."""
        end = self.total_steps if n_steps is None else min(self.step + n_steps, self.total_steps)
        if self.output_dir is not None:
            try:
                self.output_dir.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise DataIOError(f"cannot create output directory {self.output_dir}: {e}") from e
        cfg = self.config
        while self.step < end:
            idx = batch_indices(cfg.seed, self.step, len(self.samples), cfg.batch_size)
            batch = collate([self.samples[i] for i in idx])
            gen = step_generator(cfg.seed, self.step)
            loss = train_step(
                self.model, self.ema, self.optimizer, batch, self.schedule, gen, step=self.step + 1, grad_clip=cfg.grad_clip
            )
            self.step += 1
            self.losses.append(loss)
            self._log(loss)
            if callback is not None:
                callback(self.step, loss)
            if self.step % cfg.checkpoint_interval == 0:
                self.save()
            if self.step % 100 == 0:
                log.info("step %d loss %.6f", self.step, loss)
        if self.output_dir is not None and self.step % cfg.checkpoint_interval:
            self.save()
        return self.checkpoint()


def train(samples, config: TrainConfig, denoiser_config: DenoiserConfig, output_dir=None, resume=None) -> ModelCheckpoint:
    return Trainer(samples, config, denoiser_config, output_dir=output_dir, resume=resume).run()
