"""Frame I/O, clip standardization, degradation and the synthetic toy dataset.

On disk a video is a directory of zero-padded PNG frames (``000.png``,
``001.png``, ...). In memory a clip is a float tensor ``(N, 3, H, W)`` in
``[-1, 1]``.

A manifest is a JSON-lines file with one record per clip; paths inside it are
relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DataIOError, InputError, ShapeError

EXPRESSIONS = ("happiness", "sadness", "surprise", "anger", "disgust", "fear")
MANIFEST_NAME = "manifest.jsonl"


@dataclass
class VideoClip:
    frames: torch.Tensor  # (N, 3, H, W)
    fps: float | None = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ShapeError(f"clip frames must be (N, 3, H, W), got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 1:
            raise InputError("clip has no frames")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.frames.shape[-2:])

    def __len__(self):
        return self.frame_count

    def __getitem__(self, i):
        return self.frames[i]


@dataclass
class TrainingSample:
    low_res: torch.Tensor
    identity: torch.Tensor
    target: torch.Tensor
    previous: torch.Tensor
    subject_id: str = ""
    expression_label: str = ""
    frame_index: int = 1


@dataclass
class ManifestRecord:
    subject_id: str
    expression_label: str
    identity_image_path: str
    high_res_dir: str
    split: str
    low_res_dir: str | None = None


@dataclass
class SampleManifest:
    records: list[ManifestRecord]
    root: Path

    def subjects(self, split: str) -> set[str]:
        return {r.subject_id for r in self.records if r.split == split}

    def validate(self, check_paths: bool = True):
        for r in self.records:
            if r.split not in ("train", "test"):
                raise ConfigError(f"split: {r.split!r} for subject {r.subject_id} must be train or test")
            if r.expression_label not in EXPRESSIONS:
                raise ConfigError(f"expression_label: unknown label {r.expression_label!r}")
        overlap = self.subjects("train") & self.subjects("test")
        if overlap:
            raise ConfigError(f"split: subjects in both train and test: {sorted(overlap)}")
        if check_paths:
            for r in self.records:
                for p in (r.identity_image_path, r.high_res_dir, r.low_res_dir):
                    if p is not None and not (self.root / p).exists():
                        raise DataIOError(f"manifest path does not exist: {self.root / p}")

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SampleManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise DataIOError(f"cannot read manifest {path}: {e}") from e
        records = []
        for i, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise ConfigError(f"{path}:{i}: bad manifest record: {e}") from e
        manifest = cls(records=records, root=path.parent)
        manifest.validate()
        return manifest


# pixel value mapping


def normalize(pixels: np.ndarray) -> torch.Tensor:
    """uint8 HWC (or NHWC) -> float32 CHW in [-1, 1]."""
    x = torch.from_numpy(np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0)
    return x.movedim(-1, -3).contiguous()


def denormalize(x: torch.Tensor) -> np.ndarray:
    """Inverse of ``normalize`` with round-half-away-from-zero, clipped to 0..255."""
    v = (x.detach().to(torch.float64).clamp(-1, 1) + 1.0) * 127.5
    v = torch.sign(v) * torch.floor(v.abs() + 0.5)
    return v.movedim(-3, -1).numpy().astype(np.uint8)


def to_unit(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1]."""
    return (x + 1.0) / 2.0


def read_image(path: str | os.PathLike) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DataIOError(f"cannot read image {path}: {e}") from e
    return normalize(arr)


def write_image(x: torch.Tensor, path: str | os.PathLike):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(denormalize(x)).save(path, format="PNG", optimize=False)
    except OSError as e:
        raise DataIOError(f"cannot write image {path}: {e}") from e


def frame_paths(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataIOError(f"frame directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def read_clip(directory: str | os.PathLike) -> VideoClip:
    paths = frame_paths(directory)
    if not paths:
        raise InputError(f"no PNG frames in {directory}")
    return VideoClip(torch.stack([read_image(p) for p in paths]))


def write_clip(clip: VideoClip | torch.Tensor, directory: str | os.PathLike) -> list[Path]:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    directory = Path(directory)
    width = max(3, len(str(len(frames) - 1)))
    paths = []
    for i, frame in enumerate(frames):
        p = directory / f"{i:0{width}d}.png"
        write_image(frame, p)
        paths.append(p)
    return paths


# clip operations


def standardize_indices(n_source: int, target_n: int) -> list[int]:
    """Source frame index for each of ``target_n`` output frames.

    Shrinking picks evenly spaced frames (first and last kept); stretching
    repeats each source frame floor or ceil of ``target_n / n_source`` times.
    """
    if n_source < 1:
        raise InputError("cannot standardize an empty clip")
    if target_n < 1:
        raise ConfigError(f"target_n: must be positive, got {target_n}")
    if target_n == 1:
        return [0]
    if n_source >= target_n:
        return [int(math.floor(k * (n_source - 1) / (target_n - 1) + 0.5)) for k in range(target_n)]
    return [k * n_source // target_n for k in range(target_n)]


def standardize_clip(clip: VideoClip, target_n: int) -> VideoClip:
    if clip.frames.shape[0] == 0:
        raise InputError("cannot standardize an empty clip")
    idx = standardize_indices(clip.frame_count, target_n)
    return VideoClip(clip.frames[idx], fps=clip.fps)


def degrade(v_high: VideoClip, face_mask: torch.Tensor | str | None = "none", low_res: int = 64) -> VideoClip:
    """Black out the background (if a mask is given) and area-downsample.

    ``face_mask`` is ``(N, H, W)`` or ``(H, W)`` with 1 on the face.
    """
    frames = v_high.frames
    if not (face_mask is None or isinstance(face_mask, str)):
        mask = torch.as_tensor(face_mask, dtype=frames.dtype)
        if mask.ndim == 2:
            mask = mask.expand(frames.shape[0], *mask.shape)
        if mask.shape != (frames.shape[0], *frames.shape[-2:]):
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(frames.shape)}")
        # black is -1 in normalized space
        frames = frames * mask[:, None] + (-1.0) * (1 - mask[:, None])
    elif isinstance(face_mask, str) and face_mask != "none":
        raise ConfigError(f"face_mask: expected a mask tensor or 'none', got {face_mask!r}")
    return VideoClip(F.interpolate(frames, size=(low_res, low_res), mode="area"), fps=v_high.fps)


def upsample_naive(v_low: VideoClip, size: int) -> VideoClip:
    """Bicubic upsampling baseline, clamped to the valid range."""
    up = F.interpolate(v_low.frames, size=(size, size), mode="bicubic", align_corners=False)
    return VideoClip(up.clamp(-1, 1), fps=v_low.fps)


# synthetic data

_EXPRESSION_PARAMS = {
    # mouth_curve, mouth_open, brow_raise, eye_open, mouth_width
    "happiness": (0.9, 0.25, 0.1, -0.2, 0.35),
    "sadness": (-0.8, 0.0, -0.4, -0.35, -0.15),
    "surprise": (0.0, 0.9, 0.9, 0.6, -0.3),
    "anger": (-0.4, 0.15, -0.9, 0.25, 0.1),
    "disgust": (-0.6, 0.3, -0.5, -0.5, 0.25),
    "fear": (-0.2, 0.6, 0.7, 0.45, 0.3),
}


def _subject_look(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform(0.35, 0.95, 3),
        "eye": rng.uniform(0.0, 0.4, 3),
        "mouth": rng.uniform([0.5, 0.0, 0.0], [0.9, 0.3, 0.3]),
        "bg_a": rng.uniform(0.0, 1.0, 3),
        "bg_b": rng.uniform(0.0, 1.0, 3),
        "bg_freq": rng.uniform(2.0, 6.0, 2),
        "bg_phase": rng.uniform(0, 2 * np.pi, 2),
        "face_rx": rng.uniform(0.26, 0.34),
        "face_ry": rng.uniform(0.34, 0.42),
        "eye_dx": rng.uniform(0.10, 0.14),
    }


def _soft(d: np.ndarray, px: float) -> np.ndarray:
    """Antialiased inside-indicator for a signed distance (negative inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(d / px, -50, 50)))


def render_face(look: dict, expression: Sequence[float], size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (rgb HxWx3 in [0,1], face mask HxW in [0,1])."""
    mouth_curve, mouth_open, brow_raise, eye_open, mouth_width = expression
    px = 1.0 / size
    ys, xs = np.meshgrid((np.arange(size) + 0.5) / size - 0.5, (np.arange(size) + 0.5) / size - 0.5, indexing="ij")

    fx, fy = look["bg_freq"]
    px_, py_ = look["bg_phase"]
    pattern = 0.5 + 0.5 * np.sin(2 * np.pi * fx * xs + px_) * np.cos(2 * np.pi * fy * ys + py_)
    img = look["bg_a"] * pattern[..., None] + look["bg_b"] * (1 - pattern[..., None])

    rx, ry = look["face_rx"], look["face_ry"]
    face_d = (np.sqrt((xs / rx) ** 2 + (ys / ry) ** 2) - 1.0) * min(rx, ry)
    mask = _soft(face_d, px)
    img = img * (1 - mask[..., None]) + look["skin"] * mask[..., None]

    def paint(alpha, color):
        nonlocal img
        a = (alpha * mask)[..., None]
        img = img * (1 - a) + np.asarray(color) * a

    eye_ry = 0.035 * (1.0 + 0.6 * eye_open)
    for side in (-1, 1):
        ex, ey = side * look["eye_dx"], -0.08
        d = (np.sqrt(((xs - ex) / 0.05) ** 2 + ((ys - ey) / eye_ry) ** 2) - 1.0) * min(0.05, eye_ry)
        paint(_soft(d, px), look["eye"])
        by = ey - 0.075 - 0.04 * brow_raise
        tilt = -side * 0.25 * min(brow_raise, 0.0)
        brow_y = by + tilt * (xs - ex)
        d = np.maximum(np.abs(ys - brow_y) - 0.012, np.abs(xs - ex) - 0.06)
        paint(_soft(d, px), look["eye"] * 0.6)

    mw = 0.11 * (1.0 + 0.5 * mouth_width)
    my = 0.15
    u = np.clip((xs / mw), -1, 1)
    center = my + 0.05 * mouth_curve * (1 - u**2)
    thickness = 0.012 + 0.045 * mouth_open * (1 - u**2)
    d = np.maximum(np.abs(ys - center) - thickness, np.abs(xs) - mw)
    paint(_soft(d, px), look["mouth"])
    return np.clip(img, 0.0, 1.0), mask


def _quantize(img01: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img01, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def synthesize_toy_dataset(
    out_dir: str | os.PathLike,
    n_subjects: int = 2,
    n_frames: int = 8,
    high_res: int = 32,
    low_res: int = 8,
    seed: int = 0,
    expressions: Sequence[str] = EXPRESSIONS,
    train_fraction: float = 0.75,
) -> SampleManifest:
    """Render a procedural face-video dataset and its manifest into ``out_dir``.

    Each subject gets a fixed look; each expression ramps a deformation from
    neutral (frame 0 equals the identity image) to apex. Low-res clips are the
    face only, on black.
    """
    for name, v in (("n_subjects", n_subjects), ("n_frames", n_frames), ("high_res", high_res), ("low_res", low_res)):
        if int(v) < 1:
            raise ConfigError(f"{name}: must be positive, got {v}")
    unknown = set(expressions) - set(EXPRESSIONS)
    if unknown:
        raise ConfigError(f"expressions: unknown labels {sorted(unknown)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create output directory {out_dir}: {e}") from e

    rng = np.random.default_rng(seed)
    # keep at least one held-out subject whenever there are two or more
    n_train = min(n_subjects - 1, max(1, int(round(train_fraction * n_subjects)))) if n_subjects > 1 else 1
    records = []
    for s in range(n_subjects):
        subject = f"s{s:03d}"
        look = _subject_look(rng)
        split = "train" if s < n_train else "test"
        neutral, _ = render_face(look, (0, 0, 0, 0, 0), high_res)
        identity_rel = f"{subject}/identity.png"
        (out_dir / subject).mkdir(exist_ok=True)
        Image.fromarray(_quantize(neutral)).save(out_dir / identity_rel)
        for label in expressions:
            apex = np.asarray(_EXPRESSION_PARAMS[label])
            high_rel = f"{subject}/{label}/high"
            low_rel = f"{subject}/{label}/low"
            high, masks = [], []
            for n in range(n_frames):
                ramp = n / (n_frames - 1) if n_frames > 1 else 0.0
                img, mask = render_face(look, apex * ramp, high_res)
                high.append(_quantize(img))
                masks.append(mask)
            v_high = VideoClip(normalize(np.stack(high)))
            v_low = degrade(v_high, torch.from_numpy(np.stack(masks).astype(np.float32)), low_res=low_res)
            write_clip(v_high, out_dir / high_rel)
            write_clip(v_low, out_dir / low_rel)
            records.append(
                ManifestRecord(
                    subject_id=subject,
                    expression_label=label,
                    identity_image_path=identity_rel,
                    high_res_dir=high_rel,
                    low_res_dir=low_rel,
                    split=split,
                )
            )
    manifest = SampleManifest(records=records, root=out_dir)
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


# loading


@dataclass
class ClipPair:
    v_low: VideoClip
    v_high: VideoClip
    identity: torch.Tensor
    record: ManifestRecord | None = None


def load_clip_pair(manifest: SampleManifest, record: ManifestRecord, low_res: int | None = None, target_n: int | None = None) -> ClipPair:
    root = manifest.root
    identity = read_image(root / record.identity_image_path)
    v_high = read_clip(root / record.high_res_dir)
    if record.low_res_dir is not None:
        v_low = read_clip(root / record.low_res_dir)
    else:
        v_low = degrade(v_high, "none", low_res=low_res or 64)
    if v_low.frame_count != v_high.frame_count:
        raise ShapeError(
            f"subject {record.subject_id}/{record.expression_label}: "
            f"{v_low.frame_count} low-res frames vs {v_high.frame_count} high-res frames"
        )
    if target_n is not None:
        v_low, v_high = standardize_clip(v_low, target_n), standardize_clip(v_high, target_n)
    return ClipPair(v_low=v_low, v_high=v_high, identity=identity, record=record)


def clip_samples(pair: ClipPair) -> list[TrainingSample]:
    """One training tuple per frame; frame 1's previous frame is the identity image."""
    rec = pair.record
    samples = []
    for i in range(pair.v_high.frame_count):
        samples.append(
            TrainingSample(
                low_res=pair.v_low[i],
                identity=pair.identity,
                target=pair.v_high[i],
                previous=pair.identity if i == 0 else pair.v_high[i - 1],
                subject_id=rec.subject_id if rec else "",
                expression_label=rec.expression_label if rec else "",
                frame_index=i + 1,
            )
        )
    return samples


def load_pairs(manifest: SampleManifest, split: str, low_res: int | None = None, target_n: int | None = None) -> Iterator[TrainingSample]:
    if split not in ("train", "test"):
        raise ConfigError(f"split: must be train or test, got {split!r}")
    overlap = manifest.subjects("train") & manifest.subjects("test")
    if overlap:
        raise ConfigError(f"split: subjects in both train and test: {sorted(overlap)}")
    for record in manifest.records:
        if record.split != split:
            continue
        try:
            pair = load_clip_pair(manifest, record, low_res=low_res, target_n=target_n)
        except DataIOError as e:
            raise DataIOError(f"record {record.subject_id}/{record.expression_label}: {e}") from e
        yield from clip_samples(pair)
