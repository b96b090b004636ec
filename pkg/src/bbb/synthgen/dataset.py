"""Deterministic dataset generation: seeding, layout, metadata, manifest."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .geometry import PART_ORDER, model_names
from .render import RenderConfig, ViewParams, render_sample
from .sampling import (
    ConfigError, DamageProbabilities, sample_damage, sample_instance, stable_hash,
)

MANIFEST_FORMAT_VERSION = 1


@dataclass
class GeneratorConfig:
    models: list[str] = field(default_factory=model_names)
    ids_per_model: int = 10
    renders_per_id: int = 14  # split half before / half after
    image_size: int = 256
    background_mode: str = "procedural_scene"
    background_pool_size: int = 11
    background_pool_dir: str | None = None
    uniform_color: tuple[int, int, int] = (200, 200, 200)
    emit_segmentation: bool = True
    camera_jitter_max: float = 0.025
    focal_range: tuple[float, float] = (0.85, 1.1)
    probs: DamageProbabilities = field(default_factory=DamageProbabilities)

    def validate(self):
        if self.renders_per_id % 2 != 0:
            raise ConfigError("renders_per_id must be even (before/after halves)")
        if self.ids_per_model < 1:
            raise ConfigError("ids_per_model must be >= 1")
        if not self.models:
            raise ConfigError("no models configured")
        self.probs.validate()


def _instance_for(model: str, index: int, master_seed: int, seen: set) -> "BikeInstance":
    """Deterministic material draw, re-salted on collision within the model."""
    salt = 0
    while True:
        seed = stable_hash(master_seed, model, index, salt)
        inst = sample_instance(model, seed)
        if inst.material_key() not in seen:
            seen.add(inst.material_key())
            return inst
        salt += 1


def generate_instance_records(cfg: GeneratorConfig, master_seed: int):
    """Yield (instance, per-render metadata) without touching the filesystem.

    Per-ID seeds depend only on (master_seed, model, index), so generation is
    order-independent and can be parallelized per instance.
    """
    cfg.validate()
    half = cfg.renders_per_id // 2
    instance_id = 0
    for model in cfg.models:
        seen: set = set()
        for index in range(cfg.ids_per_model):
            inst = _instance_for(model, index, master_seed, seen)
            inst = type(inst)(instance_id=instance_id, model_name=inst.model_name,
                              base_color=inst.base_color, pattern_id=inst.pattern_id,
                              pattern_color=inst.pattern_color, decal_id=inst.decal_id)
            per_id_seed = stable_hash(master_seed, model, index)
            renders = []
            for r in range(cfg.renders_per_id):
                phase = "before" if r < half else "after"
                rseed = stable_hash(per_id_seed, "render", r)
                rng = np.random.default_rng(rseed)
                view = ViewParams(
                    side="right" if rng.random() < 0.5 else "left",
                    camera_jitter=(
                        float(rng.uniform(-cfg.camera_jitter_max, cfg.camera_jitter_max)),
                        float(rng.uniform(-cfg.camera_jitter_max, cfg.camera_jitter_max))),
                    focal_scale=float(rng.uniform(*cfg.focal_range)),
                )
                background_index = int(rng.integers(cfg.background_pool_size))
                damage = sample_damage(phase, stable_hash(rseed, "damage"), cfg.probs)
                renders.append({
                    "render_index": r,
                    "phase": phase,
                    "seed": rseed,
                    "view": view,
                    "background_index": background_index,
                    "damage": damage,
                })
            yield inst, renders
            instance_id += 1


def _render_cfg(cfg: GeneratorConfig, view: ViewParams, background_index: int):
    return RenderConfig(
        image_size=cfg.image_size,
        background_mode=cfg.background_mode,
        background_pool_size=cfg.background_pool_size,
        background_index=background_index,
        background_pool_dir=cfg.background_pool_dir,
        uniform_color=tuple(cfg.uniform_color),
        view=view,
        emit_segmentation=cfg.emit_segmentation,
        focal_range=cfg.focal_range,
    )


def generate_dataset(cfg: GeneratorConfig, master_seed: int, out_dir: str) -> dict:
    """Generate the full dataset on disk; returns the manifest dict.

    Layout: images/all/<instance_id>_<phase>_<idx>.png, metadata.jsonl,
    manifest.json, and optionally seg/<stem>.png. Split assignment is a
    later step that writes a splits.json sidecar.
    """
    cfg.validate()
    img_dir = os.path.join(out_dir, "images", "all")
    os.makedirs(img_dir, exist_ok=True)
    seg_dir = os.path.join(out_dir, "seg")
    if cfg.emit_segmentation:
        os.makedirs(seg_dir, exist_ok=True)

    records = []
    counts = {"images": 0, "ids": 0, "before": 0, "after": 0, "frame_damaged": 0}
    for inst, renders in generate_instance_records(cfg, master_seed):
        counts["ids"] += 1
        for r in renders:
            damage = r["damage"]
            stem = f"{inst.instance_id:06d}_{r['phase']}_{r['render_index']:02d}"
            rel = os.path.join("images", "all", stem + ".png")
            image, seg = render_sample(inst, damage,
                                       _render_cfg(cfg, r["view"], r["background_index"]),
                                       r["seed"])
            Image.fromarray(image).save(os.path.join(out_dir, rel))
            if seg is not None:
                Image.fromarray(seg).save(os.path.join(seg_dir, stem + ".png"))
            records.append({
                "image": rel,
                "model": inst.model_name,
                "instance_id": inst.instance_id,
                "phase": r["phase"],
                "render_index": r["render_index"],
                "bent": int(damage.bent),
                "broken": int(damage.broken),
                "missing": [int(m) for m in damage.missing],
                "dirt": damage.dirt,
                "view_index": int(r["view"].side == "right"),
                "background_index": r["background_index"],
                "domain": "synthetic",
            })
            counts["images"] += 1
            counts[r["phase"]] += 1
            if damage.bent or damage.broken:
                counts["frame_damaged"] += 1

    with open(os.path.join(out_dir, "metadata.jsonl"), "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "master_seed": master_seed,
        "counts": counts,
        "config": _config_echo(cfg),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def _config_echo(cfg: GeneratorConfig) -> dict:
    echo = asdict(cfg)
    echo["probs"] = asdict(cfg.probs)
    return echo


def load_metadata(dataset_dir: str) -> list[dict]:
    path = os.path.join(dataset_dir, "metadata.jsonl")
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"corrupt metadata line {lineno}: {e}") from e
    return records
