"""Video quality metrics: PSNR, SSIM, ACD, ACD-I and FVD.

Clips are ``(N, 3, H, W)`` arrays with values in ``[0, 1]`` (use
``data.to_unit`` on model-space tensors first). Computation is float64 numpy.

ACD, ACD-I and FVD depend on a feature embedder. Reported numbers always
carry the embedder's identifier; substitute embedders are not comparable with
published values.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataIOError, InputError, NumericalError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
FVD_DIAGONAL_LOADING = 1e-6


def _as_clip(x) -> np.ndarray:
    a = np.asarray(x.detach().cpu() if hasattr(x, "detach") else x, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ShapeError(f"expected a clip (N, C, H, W), got shape {a.shape}")
    return a


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(generated, reference) -> float:
    """PSNR in dB with peak 1, MSE pooled over the whole clip. Identical clips give ``inf``."""
    g, r = _as_clip(generated), _as_clip(reference)
    _same_shape(g, r)
    mse = float(np.mean((g - r) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-covered window positions."""
    out = ndimage.correlate1d(img, w, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, w, axis=-2, mode="constant")
    r = len(w) // 2
    return out[..., r:-r, r:-r] if r else out


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-window SSIM for two grayscale images (..., H, W)."""
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mu_x**2
    syy = _filter_valid(y * y, w) - mu_y**2
    sxy = _filter_valid(x * y, w) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim(generated, reference) -> float:
    """Gaussian-window SSIM on channel-mean grayscale, averaged over windows then frames."""
    g, r = _as_clip(generated), _as_clip(reference)
    _same_shape(g, r)
    if min(g.shape[-2:]) < SSIM_WINDOW:
        raise InputError(f"frames {g.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    maps = ssim_map(g.mean(axis=1), r.mean(axis=1))
    return float(maps.mean(axis=(-2, -1)).mean())


# embedders


class Embedder(Protocol):
    name: str

    def embed_image(self, image) -> np.ndarray: ...

    def embed_video(self, clip) -> np.ndarray: ...


class PixelEmbedder:
    """Flattened pixels; ACD with it is the mean consecutive-frame pixel L2."""

    name = "pixel-v1"

    def embed_image(self, image) -> np.ndarray:
        return np.asarray(image, dtype=np.float64).reshape(-1)

    def embed_video(self, clip) -> np.ndarray:
        return _as_clip(clip).reshape(-1)


class RandomProjectionEmbedder:
    """Fixed Gaussian projection of area-pooled frames.

    Video features are the mean frame feature concatenated with the mean
    absolute frame-to-frame feature change, so the dimension is ``2 * dim``
    whatever the clip length or resolution.
    """

    def __init__(self, dim: int = 16, pool: int = 16, seed: int = 0):
        self.dim = dim
        self.pool = pool
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((3 * pool * pool, dim)) / math.sqrt(3 * pool * pool)
        self.name = f"randproj-v1-d{dim}-p{pool}-s{seed}"

    def _pool(self, frames: np.ndarray) -> np.ndarray:
        n, c, h, w = frames.shape
        p = self.pool
        if h % p == 0 and w % p == 0:
            return frames.reshape(n, c, p, h // p, p, w // p).mean(axis=(3, 5))
        zoom = (1, 1, p / h, p / w)
        return ndimage.zoom(frames, zoom, order=1)

    def _frame_features(self, clip) -> np.ndarray:
        frames = self._pool(_as_clip(clip))
        return frames.reshape(frames.shape[0], -1) @ self.matrix

    def embed_image(self, image) -> np.ndarray:
        return self._frame_features(np.asarray(image, dtype=np.float64)[None])[0]

    def embed_video(self, clip) -> np.ndarray:
        f = self._frame_features(clip)
        motion = np.abs(np.diff(f, axis=0)).mean(axis=0) if len(f) > 1 else np.zeros(self.dim)
        return np.concatenate([f.mean(axis=0), motion])


def make_embedder(name: str, **kwargs) -> Embedder:
    if name in ("pixel", "pixel-v1"):
        return PixelEmbedder()
    if name in ("randproj", "random-projection"):
        return RandomProjectionEmbedder(**kwargs)
    raise InputError(f"unknown embedder {name!r}")


# content distances


def acd(generated, embedder: Embedder) -> float:
    """Mean L2 distance between embeddings of consecutive frames."""
    clip = _as_clip(generated)
    if clip.shape[0] < 2:
        raise InputError("ACD needs at least two frames")
    e = np.stack([embedder.embed_image(f) for f in clip])
    return float(np.linalg.norm(e[1:] - e[:-1], axis=1).mean())


def acd_i(generated, identity, embedder: Embedder) -> float:
    """Mean L2 distance between each frame's embedding and the identity image's."""
    clip = _as_clip(generated)
    identity = np.asarray(identity.detach().cpu() if hasattr(identity, "detach") else identity, dtype=np.float64)
    if identity.shape != clip.shape[1:]:
        raise ShapeError(f"identity image {identity.shape} does not match frames {clip.shape[1:]}")
    ref = embedder.embed_image(identity)
    e = np.stack([embedder.embed_image(f) for f in clip])
    return float(np.linalg.norm(e - ref, axis=1).mean())


# Frechet distance


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via symmetric eigendecompositions.

    ``Tr((S1 S2)^(1/2))`` equals ``Tr((S1^(1/2) S2 S1^(1/2))^(1/2))``, which keeps
    every square root on a symmetric PSD matrix.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ShapeError(f"moment shapes disagree: {mu1.shape}, {mu2.shape}, {s1.shape}, {s2.shape}")
    try:
        root1 = _sqrtm_psd(s1)
        middle = root1 @ s2 @ root1
        vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    except np.linalg.LinAlgError as e:
        cond = np.linalg.cond(s1) * np.linalg.cond(s2)
        raise NumericalError(f"covariance square root did not converge (condition ~{cond:.3e}): {e}") from e
    tr_covmean = float(np.sqrt(np.clip(vals, 0, None)).sum())
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_covmean)
    return max(value, 0.0)


def gaussian_moments(features: np.ndarray, loading: float = FVD_DIAGONAL_LOADING) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise InputError("empty feature corpus")
    mu = features.mean(axis=0)
    if features.shape[0] > 1:
        sigma = np.cov(features, rowvar=False).reshape(features.shape[1], features.shape[1])
    else:
        sigma = np.zeros((features.shape[1], features.shape[1]))
    n, d = features.shape
    if n <= d:
        sigma = sigma + loading * np.eye(d)
    return mu, sigma


def fvd(generated: Sequence, reference: Sequence, embedder: Embedder) -> float:
    """Frechet distance between Gaussian fits of video embeddings of two corpora."""
    if len(generated) == 0 or len(reference) == 0:
        raise InputError("FVD needs nonempty corpora")
    fg = np.stack([embedder.embed_video(c) for c in generated])
    fr = np.stack([embedder.embed_video(c) for c in reference])
    # same loading on both sides keeps fvd(A, B) symmetric
    loading = FVD_DIAGONAL_LOADING if min(len(fg), len(fr)) <= fg.shape[1] else 0.0
    return frechet_distance(*gaussian_moments(fg, loading), *gaussian_moments(fr, loading))


# reports


def _encode_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _decode_float(v) -> float:
    return float(v) if isinstance(v, str) else v


@dataclass
class ClipMetrics:
    name: str
    psnr_db: float
    ssim: float
    acd: float | None
    acd_i: float


@dataclass
class MetricsReport:
    clips: list[ClipMetrics]
    fvd: float
    embedders: dict[str, str]
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def clip_count(self) -> int:
        return len(self.clips)

    def summary(self) -> dict[str, float]:
        def mean(key):
            vals = [getattr(c, key) for c in self.clips if getattr(c, key) is not None]
            return float(np.mean(vals)) if vals else math.nan

        return {
            "fvd": self.fvd,
            "psnr_db": mean("psnr_db"),
            "ssim": mean("ssim"),
            "acd": mean("acd"),
            "acd_i": mean("acd_i"),
        }

    def to_dict(self) -> dict:
        clips = []
        for c in self.clips:
            d = asdict(c)
            d["psnr_db"] = _encode_float(c.psnr_db)
            clips.append(d)
        return {
            "label": self.label,
            "clip_count": self.clip_count,
            "embedders": self.embedders,
            "fvd": self.fvd,
            "summary": {k: _encode_float(v) for k, v in self.summary().items()},
            "clips": clips,
            "extra": self.extra,
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        except OSError as e:
            raise DataIOError(f"cannot write report {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricsReport":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise DataIOError(f"report file not found: {path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise DataIOError(f"cannot read report {path}: {e}") from e
        clips = [ClipMetrics(**{**c, "psnr_db": _decode_float(c["psnr_db"])}) for c in d["clips"]]
        return cls(clips=clips, fvd=d["fvd"], embedders=d["embedders"], label=d.get("label", ""), extra=d.get("extra", {}))


def evaluate_corpus(
    generated: Sequence[np.ndarray],
    reference: Sequence[np.ndarray],
    identities: Sequence[np.ndarray],
    content_embedder: Embedder,
    video_embedder: Embedder,
    names: Sequence[str] | None = None,
    label: str = "",
) -> MetricsReport:
    """Per-clip PSNR/SSIM/ACD/ACD-I and corpus FVD; all inputs in [0, 1]."""
    if len(generated) != len(reference) or len(generated) != len(identities):
        raise InputError(f"corpus sizes differ: {len(generated)} generated, {len(reference)} reference, {len(identities)} identities")
    names = list(names) if names is not None else [f"clip{i:03d}" for i in range(len(generated))]
    clips = []
    for name, g, r, ident in zip(names, generated, reference, identities):
        g = _as_clip(g)
        clips.append(
            ClipMetrics(
                name=name,
                psnr_db=psnr(g, r),
                ssim=ssim(g, r),
                acd=acd(g, content_embedder) if g.shape[0] > 1 else None,
                acd_i=acd_i(g, ident, content_embedder),
            )
        )
    return MetricsReport(
        clips=clips,
        fvd=fvd(generated, reference, video_embedder),
        embedders={"content": content_embedder.name, "video": video_embedder.name},
        label=label,
    )
