"""Multi-dataset training loop, evaluation reports and the ablation matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from statistics import median

import numpy as np

from .datasets import DatasetSpec, Frame, generate_synthetic_frame
from .errors import ConfigError
from .evalap import evaluate_ap
from .model import Model, ModelConfig
from .optim import Adam, OneCycleConfig, onecycle_lr


@dataclass
class TrainConfig:
    """One training run: optimization settings plus module toggles."""

    name: str = "run"
    steps: int = 2000
    batch_size: int = 8
    base_lr: float = 0.003
    pct_start: float = 0.3
    div_factor: float = 10.0
    final_div: float = 100.0
    weight_decay: float = 0.01
    seed: int = 0
    mode: str = "scratch"  # "scratch" | "pretrain_then_finetune"
    pretrain_dataset: int = 0
    pretrain_steps: int = 0
    subsample: dict[int, float] = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for d, f in self.subsample.items():
            if not (0.0 < f <= 1.0):
                raise ConfigError(f"subsample fraction for dataset {d} must be in (0, 1]")
        if self.mode not in ("scratch", "pretrain_then_finetune"):
            raise ConfigError(f"unknown training mode {self.mode!r}")


def paper_profile(**overrides) -> TrainConfig:
    """The published optimization settings (8-GPU scale, not desk scale)."""
    cfg = TrainConfig(name="paper", base_lr=0.01, batch_size=32, weight_decay=0.01)
    return replace(cfg, **overrides)


def subsample_frames(frames: list[Frame], fraction: float, seed: int) -> list[Frame]:
    """Keep ceil(fraction * n) frames chosen by a seeded shuffle."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError("fraction must be in (0, 1]")
    n_keep = math.ceil(fraction * len(frames))
    order = np.random.default_rng(seed).permutation(len(frames))
    return [frames[i] for i in sorted(order[:n_keep])]


class _RoundRobinSampler:
    """Equal frames per dataset per batch, reshuffling each pass."""

    def __init__(self, frames_by_dataset: dict[int, list[Frame]], per_dataset: int, seed: int):
        self.groups = {d: list(fs) for d, fs in frames_by_dataset.items() if fs}
        if not self.groups:
            raise ConfigError("no frames to train on")
        self.per_dataset = per_dataset
        self.rngs = {d: np.random.default_rng((seed, d)) for d in self.groups}
        self.queues: dict[int, list[int]] = {d: [] for d in self.groups}

    def next_batch(self) -> list[Frame]:
        batch = []
        for d, frames in sorted(self.groups.items()):
            for _ in range(self.per_dataset):
                if not self.queues[d]:
                    self.queues[d] = list(self.rngs[d].permutation(len(frames)))
                batch.append(frames[self.queues[d].pop()])
        return batch


def train_step(batch: list[Frame], model: Model, opt: Adam, lr: float) -> float:
    """One optimization step; returns the scalar batch loss."""
    opt.zero_grad()
    loss, _ = model.total_loss(batch)
    loss.backward()
    opt.step(lr)
    return loss.item()


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def to_log_text(self) -> str:
        return "".join(
            f"step={s} loss={l:.10g} lr={r:.10g}\n"
            for s, l, r in zip(self.steps, self.losses, self.lrs)
        )


def _run_phase(
    model: Model,
    frames_by_dataset: dict[int, list[Frame]],
    cfg: TrainConfig,
    steps: int,
    trace: TrainTrace,
    step_offset: int = 0,
) -> None:
    per_dataset = max(cfg.batch_size // max(len(frames_by_dataset), 1), 1)
    sampler = _RoundRobinSampler(frames_by_dataset, per_dataset, cfg.seed)
    opt = Adam(model.parameters(), weight_decay=cfg.weight_decay)
    sched = OneCycleConfig(steps, cfg.base_lr, cfg.pct_start, cfg.div_factor, cfg.final_div)
    for step in range(steps):
        lr = onecycle_lr(step, sched)
        loss = train_step(sampler.next_batch(), model, opt, lr)
        trace.append(step_offset + step, loss, lr)


def train(model: Model, frames_by_dataset: dict[int, list[Frame]], cfg: TrainConfig) -> TrainTrace:
    """Run the configured training (scratch or pretrain-then-finetune)."""
    frames_by_dataset = {
        d: subsample_frames(fs, cfg.subsample.get(d, 1.0), cfg.seed * 1000 + d)
        if cfg.subsample.get(d, 1.0) < 1.0
        else list(fs)
        for d, fs in frames_by_dataset.items()
    }
    trace = TrainTrace()
    model.set_training(True)
    if cfg.mode == "pretrain_then_finetune":
        pre_steps = cfg.pretrain_steps or cfg.steps // 2
        pre = {cfg.pretrain_dataset: frames_by_dataset[cfg.pretrain_dataset]}
        _run_phase(model, pre, cfg, pre_steps, trace)
        rest = {d: fs for d, fs in frames_by_dataset.items() if d != cfg.pretrain_dataset}
        _run_phase(model, rest or frames_by_dataset, cfg, cfg.steps - pre_steps, trace, pre_steps)
    else:
        _run_phase(model, frames_by_dataset, cfg, cfg.steps, trace)
    model.set_training(False)
    return trace


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

@dataclass
class EvalEntry:
    config: str
    seed: int
    dataset: str
    class_id: int
    ap_bev: float
    ap_3d: float


@dataclass
class EvalReport:
    entries: list[EvalEntry] = field(default_factory=list)

    def cross_dataset_average(self, config: str, seed: int, metric: str = "ap_3d") -> float:
        """Arithmetic mean of the per-dataset AP values (paper-style Avg.)."""
        per_dataset: dict[str, list[float]] = {}
        for e in self.entries:
            if e.config == config and e.seed == seed:
                per_dataset.setdefault(e.dataset, []).append(getattr(e, metric))
        if not per_dataset:
            raise ConfigError(f"no entries for config {config!r} seed {seed}")
        means = [sum(v) / len(v) for v in per_dataset.values()]
        return sum(means) / len(means)

    def median_average(self, config: str, metric: str = "ap_3d") -> float:
        seeds = sorted({e.seed for e in self.entries if e.config == config})
        return median(self.cross_dataset_average(config, s, metric) for s in seeds)

    def to_csv(self) -> str:
        lines = ["config,seed,dataset,class_id,ap_bev,ap_3d"]
        for e in self.entries:
            lines.append(
                f"{e.config},{e.seed},{e.dataset},{e.class_id},{e.ap_bev:.4f},{e.ap_3d:.4f}"
            )
        return "\n".join(lines) + "\n"


DEFAULT_IOU_THRESHOLDS = {0: 0.7, 1: 0.5, 2: 0.5}  # Car / Pedestrian / Cyclist


def evaluate_model(
    model: Model,
    eval_frames: dict[int, list[Frame]],
    specs: list[DatasetSpec],
    iou_thresholds: dict[int, float] | None = None,
    config_name: str = "run",
    seed: int = 0,
    donor_head: int | None = None,
) -> EvalReport:
    """AP report over held-out frames, per dataset and class."""
    thresholds = iou_thresholds or DEFAULT_IOU_THRESHOLDS
    report = EvalReport()
    model.set_training(False)
    for d, frames in sorted(eval_frames.items()):
        dets: dict[str, list] = {}
        gts: dict[str, list] = {}
        present: set[int] = set()
        for f in frames:
            dets[f.frame_id] = model.predict(f, head_id=donor_head)
            gts[f.frame_id] = model.harmonize(f)[1]
            present.update(b.class_id for b in gts[f.frame_id])
        for cid in sorted(present):
            thr = thresholds.get(cid, 0.5)
            report.entries.append(
                EvalEntry(
                    config=config_name,
                    seed=seed,
                    dataset=specs[d].name,
                    class_id=cid,
                    ap_bev=evaluate_ap(dets, gts, cid, thr, "BEV"),
                    ap_3d=evaluate_ap(dets, gts, cid, thr, "3D"),
                )
            )
    return report


def generate_domain_frames(spec: DatasetSpec, dataset_id: int, count: int, seed_base: int) -> list[Frame]:
    """Generate synthetic frames for one domain, tagged with its dataset id."""
    if spec.synthetic is None:
        raise ConfigError(f"dataset {spec.name} has no synthetic config")
    frames = []
    for i in range(count):
        f = generate_synthetic_frame(spec.synthetic, seed_base + i)
        f.dataset_id = dataset_id
        frames.append(f)
    return frames


def ablation_runner(
    matrix: dict[str, TrainConfig],
    domains: list[DatasetSpec],
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    train_frames: int = 48,
    eval_frames: int = 16,
    iou_thresholds: dict[int, float] | None = None,
    progress=None,
) -> EvalReport:
    """Train every config for every seed and report per-domain AP."""
    if not matrix:
        raise ConfigError("ablation matrix is empty")
    if len(domains) < 2:
        raise ConfigError("ablation needs at least two domains")
    train_sets = {
        d: generate_domain_frames(spec, d, train_frames, seed_base=0)
        for d, spec in enumerate(domains)
    }
    eval_sets = {
        d: generate_domain_frames(spec, d, eval_frames, seed_base=10_000)
        for d, spec in enumerate(domains)
    }
    report = EvalReport()
    for name, base_cfg in matrix.items():
        for seed in seeds:
            cfg = replace(base_cfg, name=name, seed=seed)
            model = Model(domains, cfg.model, seed=seed)
            train(model, train_sets, cfg)
            part = evaluate_model(
                model, eval_sets, domains, iou_thresholds, config_name=name, seed=seed
            )
            report.entries.extend(part.entries)
            if progress is not None:
                progress(name, seed, report)
    return report
