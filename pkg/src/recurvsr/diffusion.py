"""Noise schedule and closed-form Gaussian diffusion math.

Timesteps are 1-based: ``t`` ranges over ``1..T`` and ``alpha_bar(0) == 1``
by convention, so the clean image is the state "before" step 1.

Schedule tables are float64 tensors. Operations cast the coefficients to the
dtype of the image they act on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable table of beta, alpha and cumulative alpha products."""

    total_steps: int
    beta_start: float
    beta_end: float
    schedule_kind: str = "linear"
    beta: torch.Tensor = field(repr=False, compare=False, default=None)
    alpha: torch.Tensor = field(repr=False, compare=False, default=None)
    alpha_bar: torch.Tensor = field(repr=False, compare=False, default=None)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.total_steps:
            raise IndexError(f"timestep {t} outside [1, {self.total_steps}]")
        return t

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product at 1-based ``t``; ``t == 0`` gives 1.0."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self.check_t(t) - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "schedule_kind": self.schedule_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("schedule_kind", "linear") != "linear":
            raise ConfigError(f"schedule_kind: unsupported value {d['schedule_kind']!r}")
        return build_schedule(d["total_steps"], d["beta_start"], d["beta_end"])


def build_schedule(total_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if isinstance(total_steps, bool) or int(total_steps) != total_steps or total_steps < 1:
        raise ConfigError(f"total_steps: must be a positive integer, got {total_steps!r}")
    if not 0.0 < beta_start < 1.0:
        raise ConfigError(f"beta_start: must lie in (0, 1), got {beta_start!r}")
    if not 0.0 < beta_end < 1.0:
        raise ConfigError(f"beta_end: must lie in (0, 1), got {beta_end!r}")
    if beta_start > beta_end:
        raise ConfigError(f"beta_start: {beta_start} exceeds beta_end {beta_end}")
    total_steps = int(total_steps)
    beta = torch.linspace(beta_start, beta_end, total_steps, dtype=torch.float64)
    if total_steps > 1:
        # linspace can be off by an ulp at the far end
        beta[0], beta[-1] = beta_start, beta_end
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    for t in (beta, alpha, alpha_bar):
        t.requires_grad_(False)
    return NoiseSchedule(
        total_steps=total_steps,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
    )


def _coef(values, x: torch.Tensor) -> torch.Tensor:
    """Broadcast per-sample scalar coefficients against a (B, ...) batch or a single image."""
    c = torch.as_tensor(values, dtype=torch.float64)
    if c.ndim == 0:
        return c.to(x.dtype)
    return c.to(x.dtype).view(-1, *([1] * (x.ndim - 1)))


def _alpha_bars(t, schedule: NoiseSchedule, offset: int = 0) -> torch.Tensor:
    ts = torch.as_tensor(t, dtype=torch.long)
    if ts.numel() and (ts.min() < 1 or ts.max() > schedule.total_steps):
        raise IndexError(f"timestep outside [1, {schedule.total_steps}]: {ts.tolist()}")
    ab = torch.cat([torch.ones(1, dtype=torch.float64), schedule.alpha_bar])
    return ab[ts - offset]


def forward_diffuse(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Sample ``q(x_t | x_0)`` in closed form with caller-supplied noise.

    ``t`` is either an int or a 1-D tensor of per-sample timesteps matching
    the leading dimension of ``x0``.
    """
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    ab = _alpha_bars(t, schedule)
    return _coef(ab.sqrt(), x0) * x0 + _coef((1.0 - ab).sqrt(), x0) * noise


def diffuse_pair(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule):
    """Return ``(x_t, x_{t-1})`` built from one shared noise draw.

    At ``t == 1`` the second element is ``x0`` itself.
    """
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    ab_t = _alpha_bars(t, schedule)
    ab_prev = _alpha_bars(t, schedule, offset=1)
    x_t = _coef(ab_t.sqrt(), x0) * x0 + _coef((1.0 - ab_t).sqrt(), x0) * noise
    x_prev = _coef(ab_prev.sqrt(), x0) * x0 + _coef((1.0 - ab_prev).sqrt(), x0) * noise
    return x_t, x_prev


def posterior_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """Coefficients ``(c_x0, c_xt, variance)`` of ``q(x_{t-1} | x_t, x_0)``."""
    t = schedule.check_t(t)
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t - 1)
    beta_t = schedule.beta_at(t)
    alpha_t = schedule.alpha_at(t)
    c_x0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    c_xt = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    return c_x0, c_xt, var


def posterior_params(x0: torch.Tensor, x_t: torch.Tensor, t: int, schedule: NoiseSchedule):
    """Mean and variance of the Gaussian posterior ``q(x_{t-1} | x_t, x_0)``."""
    if x0.shape != x_t.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != x_t shape {tuple(x_t.shape)}")
    c_x0, c_xt, var = posterior_coefficients(t, schedule)
    return c_x0 * x0 + c_xt * x_t, var
