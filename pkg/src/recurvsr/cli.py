"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import data as D
from .checkpoint import ModelCheckpoint
from .config import RunConfig, load_config, parse_override
from .errors import ConfigError, DataIOError, InputError, RecurVSRError
from .inference import infer_video
from .metrics import MetricsReport, evaluate_corpus, make_embedder
from .training import Trainer

log = logging.getLogger("recurvsr")


def _fail(msg: str, code: int):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def guarded(stage: str):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except RecurVSRError as e:
                _fail(f"{stage}: {e}", e.exit_code)
            except OSError as e:
                where = f" ({e.filename})" if getattr(e, "filename", None) else ""
                _fail(f"{stage}: {e.strerror or e}{where}", 3)
            except (ArithmeticError, FloatingPointError) as e:
                _fail(f"{stage}: {e}", 4)

        return inner

    return wrap


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML run config.")(fn)
    fn = click.option("--preset", type=click.Choice(["full", "toy"]), default=None, help="Built-in config base.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Overrides the config seed.")(fn)
    fn = click.option("--output-dir", type=click.Path(file_okay=False), default=None)(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE", help="Override any config key.")(fn)
    return fn


def resolve(command: str, config_path, preset, seed, output_dir, sets, extra: dict | None = None) -> RunConfig:
    overrides = [parse_override(s) for s in sets]
    if extra:
        overrides.append(extra)
    if seed is not None:
        overrides.append({"seed": seed})
    if output_dir is not None:
        overrides.append({"output_dir": output_dir})
    cfg = load_config(config_path, preset=preset, overrides=overrides)
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create output directory {out}: {e.strerror}") from e
    cfg.dump(out / f"{command}.config.yaml")
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Recurrent diffusion enhancement of low-resolution face videos."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("synth-data")
@common_options
@guarded("synth-data")
def synth_data(config_path, preset, seed, output_dir, sets):
    """Render the procedural toy dataset and its manifest."""
    cfg = resolve("synth-data", config_path, preset, seed, output_dir, sets)
    d = cfg.data
    manifest = D.synthesize_toy_dataset(
        Path(cfg.output_dir) / "dataset",
        n_subjects=d.n_subjects,
        n_frames=d.n_frames,
        high_res=d.high_res,
        low_res=d.low_res,
        seed=cfg.seed,
        expressions=d.expressions,
        train_fraction=d.train_fraction,
    )
    click.echo(f"wrote {len(manifest.records)} clips to {manifest.root / D.MANIFEST_NAME}")


def _training_samples(cfg: RunConfig):
    if cfg.data.manifest is None:
        raise ConfigError("data.manifest: required for training")
    manifest = D.SampleManifest.load(cfg.data.manifest)
    samples = list(D.load_pairs(manifest, cfg.data.split, low_res=cfg.data.low_res, target_n=cfg.data.clip_frames))
    if cfg.data.max_clips is not None:
        keep = {(r.subject_id, r.expression_label) for r in manifest.records if r.split == cfg.data.split}
        keep = set(sorted(keep)[: cfg.data.max_clips])
        samples = [s for s in samples if (s.subject_id, s.expression_label) in keep]
    return samples


@main.command("train")
@common_options
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to continue from.")
@click.option("--steps", type=int, default=None, help="Overrides train.max_steps.")
@guarded("train")
def train_cmd(config_path, preset, seed, output_dir, sets, manifest, resume, steps):
    """Train the conditional denoiser; writes checkpoints and train_log.txt."""
    extra: dict = {}
    if manifest is not None:
        extra.setdefault("data", {})["manifest"] = manifest
    if resume is not None:
        extra.setdefault("train", {})["resume"] = resume
    if steps is not None:
        extra.setdefault("train", {})["max_steps"] = steps
    cfg = resolve("train", config_path, preset, seed, output_dir, sets, extra)
    samples = _training_samples(cfg)
    trainer = Trainer(samples, cfg.train_config(), cfg.denoiser_config(), output_dir=cfg.output_dir, resume=cfg.train.resume)
    start = trainer.step
    ckpt = trainer.run()
    click.echo(f"trained steps {start + 1}..{ckpt.global_step}; checkpoint {Path(cfg.output_dir) / 'last.npz'}")


def _load_model(cfg: RunConfig, checkpoint):
    path = checkpoint or cfg.infer.checkpoint
    if path is None:
        raise ConfigError("infer.checkpoint: required")
    ckpt = ModelCheckpoint.load(path)
    return ckpt, ckpt.build_denoiser(use_ema=cfg.infer.use_ema)


@main.command("enhance")
@common_options
@click.option("--low-res-dir", type=click.Path(), default=None, help="Directory of low-res PNG frames.")
@click.option("--identity-image", type=click.Path(dir_okay=False), default=None)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--manifest", type=click.Path(), default=None, help="Enhance every clip of data.split instead.")
@guarded("enhance")
def enhance(config_path, preset, seed, output_dir, sets, low_res_dir, identity_image, checkpoint, manifest):
    """Enhance one low-res clip (or all clips of a manifest split)."""
    extra = {"data": {"manifest": manifest}} if manifest else None
    cfg = resolve("enhance", config_path, preset, seed, output_dir, sets, extra)
    ckpt, model = _load_model(cfg, checkpoint)
    out = Path(cfg.output_dir)
    size = model.config.image_size

    def run(v_low, identity):
        if v_low.resolution != (model.config.low_res_size,) * 2:
            v_low = D.VideoClip(F.interpolate(v_low.frames, size=(model.config.low_res_size,) * 2, mode="area"))
        return infer_video(v_low, identity, model, ckpt.schedule, seed=cfg.seed, stride=cfg.infer.stride)

    if cfg.data.manifest:
        m = D.SampleManifest.load(cfg.data.manifest)
        records = [r for r in m.records if r.split == cfg.data.split][: cfg.data.max_clips]
        if not records:
            raise InputError(f"data.split: no {cfg.data.split!r} clips in {cfg.data.manifest}")
        for r in records:
            pair = D.load_clip_pair(m, r, low_res=model.config.low_res_size, target_n=cfg.data.clip_frames)
            name = f"{r.subject_id}_{r.expression_label}"
            D.write_clip(run(pair.v_low, pair.identity), out / "enhanced" / name)
            D.write_clip(pair.v_high, out / "reference" / name)
            D.write_clip(D.upsample_naive(pair.v_low, size), out / "upsampled" / name)
            D.write_image(pair.identity, out / "identities" / f"{name}.png")
        click.echo(f"enhanced {len(records)} clips into {out / 'enhanced'}")
        return

    if low_res_dir is None or identity_image is None:
        raise ConfigError("enhance: --low-res-dir and --identity-image are required without --manifest")
    identity = D.read_image(identity_image)
    v_low = D.read_clip(low_res_dir)
    result = run(v_low, identity)
    paths = D.write_clip(result, out / "frames")
    click.echo(f"wrote {len(paths)} frames to {out / 'frames'}")


def _clip_dirs(root: Path) -> dict[str, Path]:
    """A frame directory is one clip; otherwise each subdirectory with frames is a clip."""
    if not root.is_dir():
        raise DataIOError(f"not a directory: {root}")
    if D.frame_paths(root):
        return {root.name: root}
    clips = {p.name: p for p in sorted(root.iterdir()) if p.is_dir() and D.frame_paths(p)}
    if not clips:
        raise DataIOError(f"no frame directories under {root}")
    return clips


def _unit_clip(path: Path) -> np.ndarray:
    return D.to_unit(D.read_clip(path).frames).numpy().astype(np.float64)


@main.command("evaluate")
@common_options
@click.option("--generated-dir", type=click.Path(), required=True)
@click.option("--reference-dir", type=click.Path(), required=True)
@click.option("--identity-image", type=click.Path(), required=True, help="One image, or a directory of <clip>.png.")
@click.option("--label", default="", help="Row name used by the report command.")
@guarded("evaluate")
def evaluate(config_path, preset, seed, output_dir, sets, generated_dir, reference_dir, identity_image, label):
    """Score generated clips against references; writes metrics.json."""
    cfg = resolve("evaluate", config_path, preset, seed, output_dir, sets)
    gen_dirs = _clip_dirs(Path(generated_dir))
    ref_dirs = _clip_dirs(Path(reference_dir))
    if len(gen_dirs) == 1 and len(ref_dirs) == 1:
        pairs = [(next(iter(gen_dirs)), next(iter(gen_dirs.values())), next(iter(ref_dirs.values())))]
    else:
        missing = sorted(set(gen_dirs) - set(ref_dirs))
        if missing:
            raise DataIOError(f"no reference clip for {missing[0]} under {reference_dir}")
        pairs = [(k, gen_dirs[k], ref_dirs[k]) for k in gen_dirs]

    ident_path = Path(identity_image)
    names, gen, ref, idents = [], [], [], []
    for name, g, r in pairs:
        ip = ident_path / f"{name}.png" if ident_path.is_dir() else ident_path
        names.append(name)
        gen.append(_unit_clip(g))
        ref.append(_unit_clip(r))
        idents.append(D.to_unit(D.read_image(ip)).numpy().astype(np.float64))

    m = cfg.metrics
    rp = {"dim": m.randproj_dim, "pool": m.randproj_pool, "seed": m.randproj_seed}
    content = make_embedder(m.content_embedder, **({} if m.content_embedder == "pixel" else rp))
    video = make_embedder(m.video_embedder, **({} if m.video_embedder == "pixel" else rp))
    report = evaluate_corpus(gen, ref, idents, content, video, names=names, label=label or Path(generated_dir).name)
    path = report.save(Path(cfg.output_dir) / "metrics.json")
    s = report.summary()
    click.echo(
        f"FVD {s['fvd']:.4f}  PSNR {s['psnr_db']:.3f}  SSIM {s['ssim']:.4f}  "
        f"ACD {s['acd']:.4f}  ACD-I {s['acd_i']:.4f}  -> {path}"
    )


COLUMNS = [("fvd", "FVD"), ("psnr_db", "PSNR"), ("ssim", "SSIM"), ("acd", "ACD"), ("acd_i", "ACD-I")]


def format_table(reports: list[MetricsReport]) -> str:
    header = ["run"] + [c for _, c in COLUMNS] + ["embedders"]
    rows = []
    for r in reports:
        s = r.summary()
        rows.append([r.label or "-"] + [f"{s[k]:.4f}" for k, _ in COLUMNS] + [f"{r.embedders.get('content')}/{r.embedders.get('video')}"])
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def frame_grid(dirs: list[Path], cols: int) -> Image.Image:
    """One row per frame directory, ``cols`` evenly spaced frames per row."""
    rows = []
    size = None
    for d in dirs:
        paths = D.frame_paths(d)
        if not paths:
            raise DataIOError(f"no frames in {d}")
        idx = D.standardize_indices(len(paths), cols)
        imgs = []
        for i in idx:
            with Image.open(paths[i]) as im:
                im = im.convert("RGB")
                size = size or im.size
                imgs.append(np.asarray(im.resize(size, Image.NEAREST)))
        rows.append(np.concatenate(imgs, axis=1))
    return Image.fromarray(np.concatenate(rows, axis=0))


@main.command("report")
@common_options
@click.argument("reports", nargs=-1, required=True, type=click.Path())
@click.option("--grid", "grid_dirs", multiple=True, type=click.Path(), help="Frame directory for one grid row.")
@click.option("--cols", type=int, default=8, show_default=True)
@guarded("report")
def report(config_path, preset, seed, output_dir, sets, reports, grid_dirs, cols):
    """Compare metric reports as a text table and optionally render a frame grid."""
    cfg = resolve("report", config_path, preset, seed, output_dir, sets)
    loaded = []
    for p in reports:
        if not Path(p).is_file():
            raise DataIOError(f"report file not found: {p}")
        r = MetricsReport.load(p)
        r.label = r.label or Path(p).stem
        loaded.append(r)
    table = format_table(loaded)
    out = Path(cfg.output_dir)
    (out / "table.txt").write_text(table)
    click.echo(table, nl=False)
    if grid_dirs:
        if cols < 1:
            raise ConfigError("cols: must be positive")
        grid = frame_grid([Path(d) for d in grid_dirs], cols)
        grid.save(out / "grid.png")
        click.echo(f"grid {grid.size[0]}x{grid.size[1]} -> {out / 'grid.png'}")


if __name__ == "__main__":
    main()
