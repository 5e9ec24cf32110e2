"""Flat key-value config documents (UTF-8, diff-friendly) with includes.

Syntax: one `key = value` per line, `#` comments, and `include <path>`
(relative to the including file). Keys are dotted; values are plain strings
typed by the consumer. Exact keys are documented in the README.
"""

from __future__ import annotations

import os
from dataclasses import replace

from .datasets import COMMON_CLASSES, DatasetSpec, SizeDistribution, SyntheticDomainConfig
from .errors import ConfigError, FormatError
from .geometry import Range3D
from .model import ModelConfig
from .training import TrainConfig


def parse_config_text(text: str, base_dir: str = ".") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("include "):
            inc = stripped[len("include ") :].strip()
            out.update(load_config(os.path.join(base_dir, inc)))
            continue
        if "=" not in stripped:
            raise FormatError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def dump_config(kv: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(kv.items()))


# ---------------------------------------------------------------------------
# typed accessors
# ---------------------------------------------------------------------------

def _get_float(kv, key, default=None) -> float:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return default
    try:
        return float(kv[key])
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: {e}") from e


def _get_int(kv, key, default=None) -> int:
    return int(_get_float(kv, key, default))


def _get_bool(kv, key, default: bool) -> bool:
    if key not in kv:
        return default
    v = kv[key].lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"config key {key!r}: expected boolean, got {kv[key]!r}")


def _get_range(kv, key, default: Range3D | None = None) -> Range3D:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return default
    parts = [p.strip() for p in kv[key].split(",")]
    if len(parts) != 6:
        raise ConfigError(f"config key {key!r}: expected 6 comma-separated values")
    return Range3D(*(float(p) for p in parts))


def range_to_str(r: Range3D) -> str:
    return ",".join(f"{v:g}" for v in (r.x_min, r.x_max, r.y_min, r.y_max, r.z_min, r.z_max))


# ---------------------------------------------------------------------------
# dataset specs
# ---------------------------------------------------------------------------

def dataset_spec_from_config(kv: dict[str, str]) -> DatasetSpec:
    name = kv.get("name")
    if not name:
        raise ConfigError("dataset spec needs a 'name'")
    taxonomy = {}
    for key, value in kv.items():
        if key.startswith("taxonomy."):
            raw = key[len("taxonomy.") :]
            if value not in COMMON_CLASSES:
                raise ConfigError(f"taxonomy target {value!r} not in {COMMON_CLASSES}")
            taxonomy[raw] = COMMON_CLASSES.index(value)
    synthetic = None
    if "synthetic.seed" in kv:
        sizes = {}
        for cid, cls in enumerate(COMMON_CLASSES):
            mkey = f"synthetic.size.{cls}.mean"
            if mkey in kv:
                ml, mw, mh = (float(v) for v in kv[mkey].split(","))
                skey = f"synthetic.size.{cls}.sigma"
                if skey in kv:
                    sl, sw, sh = (float(v) for v in kv[skey].split(","))
                    sizes[cid] = SizeDistribution(ml, mw, mh, sl, sw, sh)
                else:
                    sizes[cid] = SizeDistribution(ml, mw, mh)
        counts = kv.get("synthetic.object_count", "3,6").split(",")
        synthetic = SyntheticDomainConfig(
            rng_seed=_get_int(kv, "synthetic.seed"),
            range=_get_range(kv, "range"),
            points_per_frame=_get_int(kv, "synthetic.points_per_frame", 2048),
            sensor_height=_get_float(kv, "synthetic.sensor_height", 1.6),
            beam_density=_get_float(kv, "synthetic.beam_density", 1.0),
            object_count=(int(counts[0]), int(counts[-1])),
            sizes=sizes,
            intensity_mean=_get_float(kv, "synthetic.intensity_mean", 0.5),
            falloff_range=_get_float(kv, "synthetic.falloff_range", 0.0),
        )
    return DatasetSpec(
        name=name,
        range=_get_range(kv, "range"),
        dz_shift=_get_float(kv, "dz_shift", 0.0),
        taxonomy=taxonomy,
        fov_only=_get_bool(kv, "fov_only", False),
        synthetic=synthetic,
    )


def load_dataset_spec(path) -> DatasetSpec:
    return dataset_spec_from_config(load_config(path))


def dataset_spec_to_kv(spec: DatasetSpec) -> dict[str, str]:
    kv = {
        "name": spec.name,
        "range": range_to_str(spec.range),
        "dz_shift": f"{spec.dz_shift:g}",
        "fov_only": str(spec.fov_only).lower(),
    }
    for raw, cid in sorted(spec.taxonomy.items()):
        kv[f"taxonomy.{raw}"] = COMMON_CLASSES[cid]
    syn = spec.synthetic
    if syn is not None:
        kv["synthetic.seed"] = str(syn.rng_seed)
        kv["synthetic.points_per_frame"] = str(syn.points_per_frame)
        kv["synthetic.sensor_height"] = f"{syn.sensor_height:g}"
        kv["synthetic.beam_density"] = f"{syn.beam_density:g}"
        kv["synthetic.object_count"] = f"{syn.object_count[0]},{syn.object_count[1]}"
        kv["synthetic.intensity_mean"] = f"{syn.intensity_mean:g}"
        kv["synthetic.falloff_range"] = f"{syn.falloff_range:g}"
        for cid, dist in sorted(syn.sizes.items()):
            cls = COMMON_CLASSES[cid]
            kv[f"synthetic.size.{cls}.mean"] = f"{dist.mean_l:g},{dist.mean_w:g},{dist.mean_h:g}"
            kv[f"synthetic.size.{cls}.sigma"] = f"{dist.sigma_l:g},{dist.sigma_w:g},{dist.sigma_h:g}"
    return kv


def embed_specs(kv: dict[str, str], specs: list[DatasetSpec]) -> dict[str, str]:
    """Inline dataset specs into one flat document under dataset.<i>. keys."""
    out = dict(kv)
    out["n_datasets"] = str(len(specs))
    for i, spec in enumerate(specs):
        for key, value in dataset_spec_to_kv(spec).items():
            out[f"dataset.{i}.{key}"] = value
    return out


def extract_specs(kv: dict[str, str]) -> list[DatasetSpec]:
    n = _get_int(kv, "n_datasets")
    specs = []
    for i in range(n):
        prefix = f"dataset.{i}."
        sub = {k[len(prefix) :]: v for k, v in kv.items() if k.startswith(prefix)}
        specs.append(dataset_spec_from_config(sub))
    return specs


# ---------------------------------------------------------------------------
# model / train configs
# ---------------------------------------------------------------------------

def model_config_from_config(kv: dict[str, str]) -> ModelConfig:
    base = ModelConfig()
    return ModelConfig(
        channels=_get_int(kv, "channels", base.channels),
        n_classes=_get_int(kv, "n_classes", base.n_classes),
        grid_size=_get_int(kv, "grid_size", base.grid_size),
        max_points_per_pillar=_get_int(kv, "max_points_per_pillar", base.max_points_per_pillar),
        se_reduction=_get_int(kv, "se_reduction", base.se_reduction),
        norm_momentum=_get_float(kv, "norm_momentum", base.norm_momentum),
        reg_weight=_get_float(kv, "reg_weight", base.reg_weight),
        score_thresh=_get_float(kv, "score_thresh", base.score_thresh),
        nms_iou=_get_float(kv, "nms_iou", base.nms_iou),
        range_align=_get_bool(kv, "range_align", base.range_align),
        origin_align=_get_bool(kv, "origin_align", base.origin_align),
        stat_align=_get_bool(kv, "stat_align", base.stat_align),
        cr_enabled=_get_bool(kv, "cr_enabled", base.cr_enabled),
        attention_enabled=_get_bool(kv, "attention_enabled", base.attention_enabled),
        se_enabled=_get_bool(kv, "se_enabled", base.se_enabled),
        common_range=_get_range(kv, "common_range", base.common_range),
        inference_mode=kv.get("inference_mode", base.inference_mode),
    )


def train_config_from_config(kv: dict[str, str], dataset_names: list[str] | None = None) -> TrainConfig:
    base = TrainConfig()
    subsample: dict[int, float] = {}
    for key, value in kv.items():
        if key.startswith("subsample."):
            target = key[len("subsample.") :]
            if dataset_names and target in dataset_names:
                subsample[dataset_names.index(target)] = float(value)
            else:
                subsample[int(target)] = float(value)
    cfg = TrainConfig(
        name=kv.get("name", base.name),
        steps=_get_int(kv, "steps", base.steps),
        batch_size=_get_int(kv, "batch_size", base.batch_size),
        base_lr=_get_float(kv, "base_lr", base.base_lr),
        pct_start=_get_float(kv, "pct_start", base.pct_start),
        div_factor=_get_float(kv, "div_factor", base.div_factor),
        final_div=_get_float(kv, "final_div", base.final_div),
        weight_decay=_get_float(kv, "weight_decay", base.weight_decay),
        seed=_get_int(kv, "seed", base.seed),
        mode=kv.get("mode", base.mode),
        pretrain_dataset=_get_int(kv, "pretrain_dataset", base.pretrain_dataset),
        pretrain_steps=_get_int(kv, "pretrain_steps", base.pretrain_steps),
        subsample=subsample,
        model=model_config_from_config(kv),
    )
    return replace(cfg)
