"""Reverse diffusion for one frame and recurrent enhancement of a whole clip.

The network output at each step is taken as the next state (no added
posterior noise). The previous-frame noise ``z`` is redrawn at every reverse
step. Within a clip, frame ``n`` is conditioned on the clamped output of
frame ``n - 1``; the first frame is conditioned on the identity image.
"""

from __future__ import annotations

from typing import Callable

import torch

from .data import VideoClip
from .denoiser import ConditionalUNet, noise_previous
from .diffusion import NoiseSchedule
from .errors import InputError, ShapeError

# (frame_index, t, inputs) -> None ; inputs holds the exact tensors fed to the network
StepHook = Callable[[int, int, dict], None]


def _check_frame(name: str, x: torch.Tensor, size: int):
    if x.shape != (3, size, size):
        raise ShapeError(f"{name} is {tuple(x.shape)}, checkpoint expects (3, {size}, {size})")


def reverse_timesteps(total_steps: int, stride: int = 1) -> list[int]:
    """Timesteps visited by the reverse loop, always ending at 1."""
    ts = list(range(total_steps, 0, -stride))
    if ts[-1] != 1:
        ts.append(1)
    return ts


@torch.no_grad()
def infer_frame(
    low_res: torch.Tensor,
    identity: torch.Tensor,
    previous: torch.Tensor,
    model: ConditionalUNet,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    seed: int | None = None,
    stride: int = 1,
    frame_index: int = 1,
    hook: StepHook | None = None,
) -> torch.Tensor:
    """Run the full reverse chain for one frame; returns (3, H, W) clamped to [-1, 1].

    ``stride > 1`` skips timesteps for quick previews; it is an approximation.
    """
    cfg = model.config
    _check_frame("identity image", identity, cfg.image_size)
    _check_frame("previous frame", previous, cfg.image_size)
    if low_res.shape != (3, cfg.low_res_size, cfg.low_res_size):
        raise ShapeError(f"low-res frame is {tuple(low_res.shape)}, checkpoint expects (3, {cfg.low_res_size}, {cfg.low_res_size})")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    dtype = next(model.parameters()).dtype

    identity_b = identity[None].to(dtype)
    low_b = low_res[None].to(dtype)
    prev_b = previous[None].to(dtype)
    x = torch.randn((1, 3, cfg.image_size, cfg.image_size), generator=generator, dtype=dtype)
    for t in reverse_timesteps(schedule.total_steps, stride):
        prev_in = noise_previous(prev_b, cfg, generator) if cfg.use_previous_frame else None
        if hook is not None:
            hook(frame_index, t, {"noisy": x, "previous": prev_b, "previous_noised": prev_in})
        x = model(x, t, identity_b, low_b, prev_in)
    return x[0].clamp(-1.0, 1.0)


@torch.no_grad()
def infer_video(
    v_low: VideoClip | torch.Tensor,
    identity: torch.Tensor,
    model: ConditionalUNet,
    schedule: NoiseSchedule,
    seed: int = 0,
    stride: int = 1,
    hook: StepHook | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> VideoClip:
    """Enhance every frame in order, feeding each output forward as the next previous frame."""
    frames = v_low.frames if isinstance(v_low, VideoClip) else v_low
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise InputError("low-res clip is empty")
    _check_frame("identity image", identity, model.config.image_size)
    generator = torch.Generator().manual_seed(seed)
    previous = identity
    out = []
    for n, low in enumerate(frames, start=1):
        try:
            frame = infer_frame(low, identity, previous, model, schedule, generator=generator, stride=stride, frame_index=n, hook=hook)
        except (ShapeError, InputError) as e:
            raise type(e)(f"frame {n}: {e}") from e
        out.append(frame)
        previous = frame
        if progress is not None:
            progress(n, frames.shape[0])
    return VideoClip(torch.stack(out), fps=getattr(v_low, "fps", None))
