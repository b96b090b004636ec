"""Seeded sampling of bike instances (material assignments) and damage states."""
from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import PART_ORDER, get_model

N_BASE_COLORS = 50
N_PATTERNS = 5
N_PATTERN_COLORS = 50
N_DECALS = 10
N_FRAME_TUBES = 7

DIRT_KINDS = ("none", "mud", "rust")


class ConfigError(ValueError):
    """Raised for out-of-range probabilities or malformed generator configs."""


def stable_hash(*parts) -> int:
    """Order-independent per-item seed: 64-bit digest of the stringified parts."""
    key = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def color_pool(n: int = N_BASE_COLORS) -> np.ndarray:
    """Fixed pool of n RGB colors (uint8), evenly spaced in hue with varied s/v."""
    colors = []
    for i in range(n):
        h = i / n
        s = (0.55, 0.8, 1.0)[i % 3]
        v = (0.9, 0.6, 0.75)[i % 3]
        r, g, b = colorsys.hsv_to_rgb(h, s, v)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return np.array(colors, dtype=np.uint8)


@dataclass(frozen=True)
class BikeInstance:
    instance_id: int
    model_name: str
    base_color: int
    pattern_id: int
    pattern_color: int
    decal_id: int

    def material_key(self) -> tuple:
        return (self.model_name, self.base_color, self.pattern_id,
                self.pattern_color, self.decal_id)


@dataclass
class DamageProbabilities:
    before_dirt: float = 0.20
    after_dirt: float = 0.50
    after_frame: float = 0.75  # split evenly bent / broken / both
    part_removed: float = 0.25
    part_deformed: float = 0.25
    bend_magnitude_range: tuple[float, float] = (0.03, 0.09)

    def validate(self):
        for name in ("before_dirt", "after_dirt", "after_frame",
                     "part_removed", "part_deformed"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"probability {name}={v} outside [0, 1]")
        if self.part_removed + self.part_deformed > 1.0 + 1e-12:
            raise ConfigError("part_removed + part_deformed exceeds 1")
        lo, hi = self.bend_magnitude_range
        if not (0.0 < lo <= hi):
            raise ConfigError("bend_magnitude_range must be positive and ordered")


@dataclass
class DamageState:
    bent: bool = False
    broken: bool = False
    missing: tuple[bool, ...] = (False,) * 5  # PART_ORDER
    deformed: tuple[bool, ...] = (False,) * 5
    wheel_deform_params: tuple[tuple[float, float], ...] = ((1.0, 0.0), (1.0, 0.0))
    dirt: str = "none"
    bend_magnitude: float = 0.0
    bend_center: float = 0.5
    break_site: tuple[int, float] = (0, 0.5)  # (tube index, cut position)

    def __post_init__(self):
        if any(m and d for m, d in zip(self.missing, self.deformed)):
            raise ValueError("a part cannot be both missing and deformed")
        if self.bent != (self.bend_magnitude > 0):
            raise ValueError("bend_magnitude > 0 iff bent")
        if self.dirt not in DIRT_KINDS:
            raise ValueError(f"unknown dirt kind {self.dirt}")


def sample_instance(model_name: str, seed: int) -> BikeInstance:
    """Deterministically draw one material assignment for the given model.

    instance_id is assigned by the dataset generator; here it defaults to -1.
    """
    get_model(model_name)  # raises ModelLookupError for unknown names
    rng = np.random.default_rng(stable_hash("instance", model_name, seed))
    return BikeInstance(
        instance_id=-1,
        model_name=model_name,
        base_color=int(rng.integers(N_BASE_COLORS)),
        pattern_id=int(rng.integers(N_PATTERNS)),
        pattern_color=int(rng.integers(N_PATTERN_COLORS)),
        decal_id=int(rng.integers(N_DECALS)),
    )


def sample_damage(phase: str, seed: int,
                  probs: DamageProbabilities | None = None) -> DamageState:
    """Draw a damage configuration for one render.

    "before" images only ever carry dirt; all structural damage is reserved
    for "after" images. Frame damage splits the damaged mass evenly across
    bent-only / broken-only / bent-and-broken.
    """
    if phase not in ("before", "after"):
        raise ConfigError(f"unknown phase {phase}")
    probs = probs or DamageProbabilities()
    probs.validate()
    rng = np.random.default_rng(stable_hash("damage", phase, seed))

    dirt_p = probs.before_dirt if phase == "before" else probs.after_dirt
    dirt = "none"
    if rng.random() < dirt_p:
        dirt = "mud" if rng.random() < 0.5 else "rust"

    if phase == "before":
        return DamageState(dirt=dirt)

    bent = broken = False
    if rng.random() < probs.after_frame:
        mode = rng.integers(3)  # 0: bent, 1: broken, 2: both
        bent = mode in (0, 2)
        broken = mode in (1, 2)

    missing, deformed = [], []
    for _ in PART_ORDER:
        u = rng.random()
        missing.append(u < probs.part_removed)
        deformed.append(probs.part_removed <= u < probs.part_removed + probs.part_deformed)

    wheel_params = []
    for i in range(2):  # front, rear
        if deformed[i]:
            wheel_params.append((float(rng.uniform(0.55, 0.8)),
                                 float(rng.uniform(0, np.pi))))
        else:
            wheel_params.append((1.0, 0.0))

    lo, hi = probs.bend_magnitude_range
    return DamageState(
        bent=bent,
        broken=broken,
        missing=tuple(missing),
        deformed=tuple(deformed),
        wheel_deform_params=tuple(wheel_params),
        dirt=dirt,
        bend_magnitude=float(rng.uniform(lo, hi)) if bent else 0.0,
        bend_center=float(rng.uniform(0.3, 0.7)),
        break_site=(int(rng.integers(N_FRAME_TUBES)), float(rng.uniform(0.25, 0.75))),
    )
