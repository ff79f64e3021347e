"""Conditional UNet that predicts the next (less noisy) frame directly.

Conditioning:
  - identity image and noised previous frame are concatenated with the
    noisy frame along channels (9 input channels, 6 without the previous frame)
  - the timestep enters every residual block through a sinusoidal embedding
  - the low-resolution expression frame is encoded by ``ExpressionEncoder``
    and fused at one level by joint self-attention over image and expression
    tokens

Levels are 1-based. Level ``i`` runs at ``H / 2**(i-1)`` with
``hidden_channels * channel_multipliers[i-1]`` channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass
class DenoiserConfig:
    image_size: int = 192
    low_res_size: int = 64
    hidden_channels: int = 128
    channel_multipliers: tuple[int, ...] = (1, 1, 2, 2, 4, 8)
    res_blocks_per_level: int = 1
    attention_levels: tuple[int, ...] = (5,)
    expression_injection_level: int = 5
    timestep_embedding_dim: int = 128
    attention_heads: int = 4
    expression_encoder_channels: int = 64
    use_expression_encoder: bool = True
    use_previous_frame: bool = True
    noise_previous_frame: bool = True
    previous_noise_scale: float = 1.0

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        self.validate()

    @property
    def in_channels(self) -> int:
        return 9 if self.use_previous_frame else 6

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    def level_size(self, level: int) -> int:
        return self.image_size // 2 ** (level - 1)

    def level_channels(self, level: int) -> int:
        return self.hidden_channels * self.channel_multipliers[level - 1]

    def validate(self):
        if not self.channel_multipliers:
            raise ConfigError("channel_multipliers: must be nonempty")
        if self.hidden_channels < 1:
            raise ConfigError(f"hidden_channels: must be positive, got {self.hidden_channels}")
        if self.res_blocks_per_level < 1:
            raise ConfigError("res_blocks_per_level: must be >= 1")
        step = 2 ** (self.num_levels - 1)
        if self.image_size < step or self.image_size % step:
            raise ConfigError(
                f"image_size: {self.image_size} not divisible by 2^{self.num_levels - 1} = {step}"
            )
        for lvl in self.attention_levels:
            if not 1 <= lvl <= self.num_levels:
                raise ConfigError(f"attention_levels: level {lvl} outside [1, {self.num_levels}]")
        if self.use_expression_encoder and self.expression_injection_level not in self.attention_levels:
            raise ConfigError(
                f"expression_injection_level: {self.expression_injection_level} "
                f"not among attention_levels {list(self.attention_levels)}"
            )
        for lvl in self.attention_levels:
            if self.level_channels(lvl) % self.attention_heads:
                raise ConfigError(
                    f"attention_heads: {self.attention_heads} does not divide "
                    f"{self.level_channels(lvl)} channels at level {lvl}"
                )
        if self.timestep_embedding_dim < 2 or self.timestep_embedding_dim % 2:
            raise ConfigError("timestep_embedding_dim: must be an even integer >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ConditioningBundle:
    """Guidance for one denoising call. Tensors are (B, 3, H, W) or (3, H, W)."""

    noisy_frame: torch.Tensor
    identity_image: torch.Tensor
    low_res_frame: torch.Tensor
    previous_frame_noised: torch.Tensor | None
    timestep: torch.Tensor | int
    extras: dict = field(default_factory=dict)


def noise_previous(previous: torch.Tensor, config: DenoiserConfig, generator: torch.Generator | None):
    """Apply the silhouette-only noise trick to the previous frame (or pass it through)."""
    if not config.noise_previous_frame:
        return previous
    z = torch.randn(previous.shape, generator=generator, dtype=previous.dtype, device=previous.device)
    return previous + config.previous_noise_scale * z


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(channels: int) -> int:
    return math.gcd(32, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class JointAttention(nn.Module):
    """Self-attention over image tokens, optionally joined by expression tokens.

    Expression tokens take part in the attention but only the image tokens
    are written back.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.expr_norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, expression=None):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        n_img = tokens.shape[1]
        if expression is not None:
            expr = self.expr_norm(expression).flatten(2).transpose(1, 2)
            tokens = torch.cat([tokens, expr], dim=1)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        out = self.proj(out[:, :n_img])
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ExpressionEncoder(nn.Module):
    """Strided conv encoder mapping the low-res frame onto the injection level grid."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.in_size = config.low_res_size
        self.out_size = config.level_size(config.expression_injection_level)
        width = config.expression_encoder_channels
        out_ch = config.level_channels(config.expression_injection_level)
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        size = self.in_size
        while size >= 2 * self.out_size and size % 2 == 0:
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.GroupNorm(_groups(width), width), nn.SiLU()]
            size //= 2
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(width, out_ch, 1)

    def forward(self, low_res):
        if low_res.shape[-2:] != (self.in_size, self.in_size):
            raise ShapeError(
                f"low-res frame is {tuple(low_res.shape[-2:])}, expected {(self.in_size, self.in_size)}"
            )
        h = self.body(low_res)
        if h.shape[-1] != self.out_size:
            h = F.adaptive_avg_pool2d(h, self.out_size)
        return self.out(h)


class ConditionalUNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        temb_dim = config.timestep_embedding_dim * 4
        self.temb = nn.Sequential(
            nn.Linear(config.timestep_embedding_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.stem = nn.Conv2d(config.in_channels, config.hidden_channels, 3, padding=1)
        self.expression_encoder = ExpressionEncoder(config) if config.use_expression_encoder else None

        levels = range(1, config.num_levels + 1)
        skip_channels = [config.hidden_channels]
        ch = config.hidden_channels
        self.down = nn.ModuleList()
        for lvl in levels:
            out_ch = config.level_channels(lvl)
            stage = nn.ModuleDict()
            stage["res"] = nn.ModuleList()
            stage["attn"] = nn.ModuleList()
            for _ in range(config.res_blocks_per_level):
                stage["res"].append(ResBlock(ch, out_ch, temb_dim))
                ch = out_ch
                if lvl in config.attention_levels:
                    stage["attn"].append(JointAttention(ch, config.attention_heads))
                skip_channels.append(ch)
            if lvl < config.num_levels:
                stage["downsample"] = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
                skip_channels.append(ch)
            self.down.append(stage)

        self.mid1 = ResBlock(ch, ch, temb_dim)
        self.mid2 = ResBlock(ch, ch, temb_dim)

        self.up = nn.ModuleList()
        for lvl in reversed(levels):
            out_ch = config.level_channels(lvl)
            stage = nn.ModuleDict()
            stage["res"] = nn.ModuleList()
            stage["attn"] = nn.ModuleList()
            for _ in range(config.res_blocks_per_level + 1):
                stage["res"].append(ResBlock(ch + skip_channels.pop(), out_ch, temb_dim))
                ch = out_ch
                if lvl in config.attention_levels:
                    stage["attn"].append(JointAttention(ch, config.attention_heads))
            if lvl > 1:
                stage["upsample"] = nn.Conv2d(ch, ch, 3, padding=1)
            self.up.append(stage)

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)

    def encode_expression(self, low_res: torch.Tensor) -> torch.Tensor:
        if self.expression_encoder is None:
            raise ConfigError("use_expression_encoder: encoder disabled in this config")
        return self.expression_encoder(low_res)

    def forward(self, noisy, t, identity, low_res, previous=None):
        cfg = self.config
        inputs = [noisy, identity]
        if cfg.use_previous_frame:
            if previous is None:
                raise ShapeError("previous frame required when use_previous_frame is on")
            inputs.append(previous)
        for name, x in zip(("noisy", "identity", "previous"), inputs):
            if x.shape != noisy.shape:
                raise ShapeError(f"{name} shape {tuple(x.shape)} != noisy shape {tuple(noisy.shape)}")
        if noisy.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(f"frames must be (3, {cfg.image_size}, {cfg.image_size}), got {tuple(noisy.shape[1:])}")
        h = torch.cat(inputs, dim=1)

        t = torch.as_tensor(t, device=noisy.device).reshape(-1).expand(noisy.shape[0])
        temb = self.temb(timestep_embedding(t, cfg.timestep_embedding_dim).to(noisy.dtype))
        expression = self.expression_encoder(low_res) if self.expression_encoder is not None else None

        def attend(attn, x, lvl):
            return attn(x, expression if lvl == cfg.expression_injection_level else None)

        h = self.stem(h)
        skips = [h]
        for lvl, stage in enumerate(self.down, start=1):
            for i, res in enumerate(stage["res"]):
                h = res(h, temb)
                if len(stage["attn"]):
                    h = attend(stage["attn"][i], h, lvl)
                skips.append(h)
            if "downsample" in stage:
                h = stage["downsample"](h)
                skips.append(h)

        h = self.mid2(self.mid1(h, temb), temb)

        for lvl, stage in zip(range(cfg.num_levels, 0, -1), self.up):
            for i, res in enumerate(stage["res"]):
                h = res(torch.cat([h, skips.pop()], dim=1), temb)
                if len(stage["attn"]):
                    h = attend(stage["attn"][i], h, lvl)
            if "upsample" in stage:
                h = stage["upsample"](F.interpolate(h, scale_factor=2, mode="nearest"))

        return self.out_conv(F.silu(self.out_norm(h)))


def _batched(x):
    return x.unsqueeze(0) if x is not None and x.ndim == 3 else x


def encode_expression(model: ConditionalUNet, low_res_frame: torch.Tensor) -> torch.Tensor:
    """Expression feature map at the injection level; single frames keep no batch dim."""
    single = low_res_frame.ndim == 3
    out = model.encode_expression(_batched(low_res_frame))
    return out[0] if single else out


def denoise_step(model: ConditionalUNet, bundle: ConditioningBundle, total_steps: int | None = None) -> torch.Tensor:
    """Predict the frame one step less noisy than ``bundle.noisy_frame``.

    With ``total_steps`` given, timesteps outside ``[1, total_steps]`` raise IndexError.
    """
    if total_steps is not None:
        t = torch.as_tensor(bundle.timestep)
        if t.min() < 1 or t.max() > total_steps:
            raise IndexError(f"timestep {t.tolist()} outside [1, {total_steps}]")
    single = bundle.noisy_frame.ndim == 3
    out = model(
        _batched(bundle.noisy_frame),
        bundle.timestep,
        _batched(bundle.identity_image),
        _batched(bundle.low_res_frame),
        _batched(bundle.previous_frame_noised),
    )
    return out[0] if single else out
