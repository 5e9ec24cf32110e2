"""Command-line entry point: harmonize, stats, train, eval, ablate."""

from __future__ import annotations

import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import checkpoint, configio
from .datasets import (
    Frame,
    TaxonomyMapper,
    assemble_kitti_frame,
    frame_from_bytes,
    frame_to_bytes,
    size_histograms,
)
from .errors import MDetError
from .geometry import crop_to_range, shift_origin
from .heads import detections_to_text
from .model import Model
from .training import (
    DEFAULT_IOU_THRESHOLDS,
    TrainConfig,
    ablation_runner,
    evaluate_model,
    generate_domain_frames,
    train,
)

DATA_ROOT_ENV = "MDET3D_DATA_ROOT"


def _run_dir(out_root: str | None, tag: str) -> Path:
    root = Path(out_root or os.environ.get(DATA_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{stamp}-{tag}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_frames_dir(path: Path) -> list[Frame]:
    frames = []
    for f in sorted(path.glob("*.mdfr")):
        frames.append(frame_from_bytes(f.read_bytes()))
    return frames


def _resolve_specs(kv: dict[str, str], config_path: Path) -> list:
    if "dataset_specs" in kv:
        specs = []
        for p in kv["dataset_specs"].split(","):
            specs.append(configio.load_dataset_spec(config_path.parent / p.strip()))
        return specs
    return configio.extract_specs(kv)


@click.group()
def main() -> None:
    """Multi-dataset 3D detection: harmonization, training, evaluation."""


@main.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--dataset-spec", "spec_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def harmonize(in_dir: Path, spec_path: Path, out_dir: Path) -> None:
    """Apply range crop and origin shift to a directory of frames."""
    spec = configio.load_dataset_spec(spec_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    mapper = TaxonomyMapper(spec)
    frames: list[Frame] = []
    kitti_velo = in_dir / "velodyne"
    if kitti_velo.is_dir():
        for bin_path in sorted(kitti_velo.glob("*.bin")):
            fid = bin_path.stem
            label = (in_dir / "label_2" / f"{fid}.txt").read_text()
            calib = (in_dir / "calib" / f"{fid}.txt").read_text()
            frames.append(assemble_kitti_frame(0, fid, bin_path.read_bytes(), label, calib, spec, mapper))
    else:
        frames = _load_frames_dir(in_dir)
    points_dropped = 0
    boxes_dropped = 0
    for frame in frames:
        pc, boxes = crop_to_range(frame.pc, frame.gt_boxes, spec.range)
        points_dropped += frame.pc.n - pc.n
        boxes_dropped += len(frame.gt_boxes) - len(boxes)
        if spec.dz_shift != 0.0:
            pc, boxes = shift_origin(pc, boxes, spec.dz_shift)
        out = Frame(frame.dataset_id, pc, boxes, frame.frame_id)
        (out_dir / f"{frame.frame_id}.mdfr").write_bytes(frame_to_bytes(out))
    click.echo(f"frames: {len(frames)}")
    click.echo(f"points dropped by range crop: {points_dropped}")
    click.echo(f"boxes dropped by range crop: {boxes_dropped}")
    click.echo(f"labels dropped by taxonomy: {mapper.dropped}")


@main.command()
@click.option("--frames", "frames_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out-csv", required=True, type=click.Path(path_type=Path))
@click.option("--bin-width", default=0.25, show_default=True)
def stats(frames_dir: Path, out_csv: Path, bin_width: float) -> None:
    """Object-size histograms and point-channel statistics as CSV."""
    frames = _load_frames_dir(frames_dir)
    bins = np.arange(0.0, 8.0 + bin_width, bin_width)
    hists = size_histograms(frames, bins)
    lines = ["kind,class_id,dim,bin_lo,bin_hi,count"]
    for cid, dims in sorted(hists.items()):
        for dim, counts in sorted(dims.items()):
            for i, c in enumerate(counts):
                if c:
                    lines.append(f"size_hist,{cid},{dim},{bins[i]:.3f},{bins[i+1]:.3f},{int(c)}")
    if frames:
        xyz = np.vstack([f.pc.xyz for f in frames if f.pc.n])
        inten = np.concatenate([f.pc.intensity for f in frames if f.pc.n])
        for name, col in (("x", xyz[:, 0]), ("y", xyz[:, 1]), ("z", xyz[:, 2]), ("intensity", inten)):
            lines.append(f"point_channel,{name},mean,{col.mean():.6f},std,{col.std():.6f}")
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {out_csv}")


def _build_and_train(config_path: Path, out_root: str | None) -> Path:
    kv = configio.load_config(config_path)
    specs = _resolve_specs(kv, config_path)
    cfg = configio.train_config_from_config(kv, [s.name for s in specs])
    train_frames = int(kv.get("train_frames", "48"))
    run_dir = _run_dir(out_root, cfg.name)
    echo = configio.dump_config(configio.embed_specs(kv, specs))
    (run_dir / "config.cfg").write_text(echo)
    frames = {d: generate_domain_frames(s, d, train_frames, 0) for d, s in enumerate(specs)}
    model = Model(specs, cfg.model, seed=cfg.seed)
    trace = train(model, frames, cfg)
    (run_dir / "loss.log").write_text(trace.to_log_text())
    checkpoint.save_checkpoint(model, run_dir / "model.ckpt", config_text=echo)
    click.echo(f"final loss: {trace.losses[-1]:.6f}")
    click.echo(f"run dir: {run_dir}")
    return run_dir


@main.command(name="train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out-root", default=None)
def train_cmd(config_path: Path, out_root: str | None) -> None:
    """Train a model from a flat config file (synthetic domains)."""
    try:
        _build_and_train(config_path, out_root)
    except MDetError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


@main.command(name="eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--dataset", "dataset_name", default=None, help="restrict to one dataset by name")
@click.option("--zero-shot-donor-head", "donor", type=int, default=None)
@click.option("--eval-frames", default=16, show_default=True)
@click.option("--out-root", default=None)
def eval_cmd(ckpt_path: Path, dataset_name: str | None, donor: int | None, eval_frames: int, out_root: str | None) -> None:
    """Evaluate a checkpoint on held-out synthetic frames."""
    try:
        config_text, _ = checkpoint.deserialize_blobs(ckpt_path.read_bytes())
        kv = configio.parse_config_text(config_text)
        specs = configio.extract_specs(kv)
        cfg = configio.train_config_from_config(kv, [s.name for s in specs])
        model = Model(specs, cfg.model, seed=cfg.seed)
        checkpoint.load_checkpoint(model, ckpt_path)
        names = [s.name for s in specs]
        targets = range(len(specs)) if dataset_name is None else [names.index(dataset_name)]
        frames = {d: generate_domain_frames(specs[d], d, eval_frames, 10_000) for d in targets}
        report = evaluate_model(
            model, frames, specs, DEFAULT_IOU_THRESHOLDS, config_name=cfg.name, donor_head=donor
        )
        run_dir = _run_dir(out_root, "eval")
        (run_dir / "report.csv").write_text(report.to_csv())
        records = []
        for d, fs in frames.items():
            for f in fs:
                for b in model.predict(f, head_id=donor):
                    records.append((f.frame_id, specs[d].name, b))
        (run_dir / "detections.txt").write_text(detections_to_text(records))
        click.echo(report.to_csv())
        click.echo(f"run dir: {run_dir}")
    except MDetError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


@main.command()
@click.option("--matrix", "matrix_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out-root", default=None)
def ablate(matrix_path: Path, out_root: str | None) -> None:
    """Run a config matrix over synthetic domains and report AP medians."""
    kv = configio.load_config(matrix_path)
    config_keys = sorted(k for k in kv if k.startswith("config."))
    if not config_keys:
        click.echo("error: ablation matrix lists no config.<name> entries", err=True)
        sys.exit(2)
    try:
        specs = _resolve_specs(kv, matrix_path)
        matrix: dict[str, TrainConfig] = {}
        for key in config_keys:
            name = key[len("config.") :]
            sub = configio.load_config(matrix_path.parent / kv[key])
            matrix[name] = replace(
                configio.train_config_from_config(sub, [s.name for s in specs]), name=name
            )
        seeds = tuple(int(s) for s in kv.get("seeds", "0,1,2,3,4").split(","))
        report = ablation_runner(
            matrix,
            specs,
            seeds=seeds,
            train_frames=int(kv.get("train_frames", "48")),
            eval_frames=int(kv.get("eval_frames", "16")),
            progress=lambda name, seed, _r: click.echo(f"done: {name} seed {seed}"),
        )
        run_dir = _run_dir(out_root, "ablate")
        (run_dir / "config.cfg").write_text(configio.dump_config(configio.embed_specs(kv, specs)))
        (run_dir / "report.csv").write_text(report.to_csv())
        for name in matrix:
            click.echo(f"{name}: median cross-domain AP_3D = {report.median_average(name):.2f}")
        click.echo(f"run dir: {run_dir}")
    except MDetError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
