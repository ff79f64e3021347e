"""Self-describing checkpoint container.

The file is an uncompressed ``.npz`` archive: every tensor is a named array
(``model:<param>``, ``ema:<param>``, ``optim:<i>:<key>``) plus one
``__manifest__`` array holding UTF-8 JSON with the format version, configs,
config digests and a SHA-256 over all tensor payloads. Loading recomputes the
checksum and refuses a mismatch.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import ConditionalUNet, DenoiserConfig
from .diffusion import NoiseSchedule
from .errors import ConfigError, DataIOError

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def tensors_checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class ModelCheckpoint:
    model_state: dict[str, torch.Tensor]
    ema_state: dict[str, torch.Tensor]
    schedule: NoiseSchedule
    denoiser_config: DenoiserConfig
    train_config: dict
    global_step: int = 0
    optimizer_state: dict | None = None
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def expression_encoder_state(self) -> dict[str, torch.Tensor]:
        prefix = "expression_encoder."
        return {k[len(prefix):]: v for k, v in self.model_state.items() if k.startswith(prefix)}

    def build_denoiser(self, use_ema: bool = True) -> ConditionalUNet:
        model = ConditionalUNet(self.denoiser_config)
        model.load_state_dict(self.ema_state if use_ema else self.model_state)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model

    def save(self, path: str | os.PathLike) -> Path:
        """Write atomically: temp file in the target directory, then rename."""
        path = Path(path)
        arrays = {}
        for k, v in self.model_state.items():
            arrays[f"model:{k}"] = v.detach().cpu().numpy()
        for k, v in self.ema_state.items():
            arrays[f"ema:{k}"] = v.detach().cpu().numpy()
        optim_groups = None
        if self.optimizer_state is not None:
            for idx, st in self.optimizer_state["state"].items():
                for key, v in st.items():
                    arrays[f"optim:{idx}:{key}"] = torch.as_tensor(v).detach().cpu().numpy()
            optim_groups = self.optimizer_state["param_groups"]
        manifest = {
            "format_version": self.format_version,
            "global_step": self.global_step,
            "schedule": self.schedule.to_dict(),
            "denoiser_config": self.denoiser_config.to_dict(),
            "train_config": self.train_config,
            "optimizer_param_groups": optim_groups,
            "extra": self.extra,
            "digests": {
                "denoiser_config": _digest(self.denoiser_config.to_dict()),
                "train_config": _digest(self.train_config),
                "schedule": _digest(self.schedule.to_dict()),
            },
            "checksum": tensors_checksum(arrays),
        }
        buf = io.BytesIO()
        np.savez(buf, **arrays, **{MANIFEST_KEY: np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)})
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
            with os.fdopen(fd, "wb") as f:
                f.write(buf.getvalue())
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except OSError as e:
            raise DataIOError(f"cannot write checkpoint {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelCheckpoint":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as npz:
                arrays = {k: npz[k] for k in npz.files}
        except (OSError, ValueError) as e:
            raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
        if MANIFEST_KEY not in arrays:
            raise DataIOError(f"{path}: not a checkpoint (no manifest)")
        manifest = json.loads(arrays.pop(MANIFEST_KEY).tobytes().decode())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"format_version: {path} has {manifest.get('format_version')}, expected {FORMAT_VERSION}")
        if tensors_checksum(arrays) != manifest["checksum"]:
            raise DataIOError(f"{path}: checksum mismatch, file is corrupt")

        model_state, ema_state, optim_state = {}, {}, {}
        for name, a in arrays.items():
            kind, _, rest = name.partition(":")
            t = torch.from_numpy(a.copy())
            if kind == "model":
                model_state[rest] = t
            elif kind == "ema":
                ema_state[rest] = t
            elif kind == "optim":
                idx, _, key = rest.partition(":")
                optim_state.setdefault(int(idx), {})[key] = t
        optimizer_state = None
        if manifest["optimizer_param_groups"] is not None:
            optimizer_state = {"state": optim_state, "param_groups": manifest["optimizer_param_groups"]}
        return cls(
            model_state=model_state,
            ema_state=ema_state,
            schedule=NoiseSchedule.from_dict(manifest["schedule"]),
            denoiser_config=DenoiserConfig.from_dict(manifest["denoiser_config"]),
            train_config=manifest["train_config"],
            global_step=manifest["global_step"],
            optimizer_state=optimizer_state,
            format_version=manifest["format_version"],
            extra=manifest.get("extra", {}),
        )
