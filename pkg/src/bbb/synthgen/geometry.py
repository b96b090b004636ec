"""Bike geometry library: parametric 2D frame models loaded from a data file."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

PART_ORDER = ("front_wheel", "rear_wheel", "seat", "handlebar", "pedals")
SEGMENTATION_CLASSES = ("front_wheel", "rear_wheel", "seat", "crankset", "frame")
CATEGORIES = ("MTB", "Enduro", "Road", "Circuit", "Gravel", "Cruiser")


class ModelLookupError(KeyError):
    """Raised when a model name is not present in the geometry library."""


@dataclass(frozen=True)
class BikeModelSpec:
    model_name: str
    category: str
    frame_keypoints: dict[str, tuple[float, float]]
    tube_list: list[tuple[str, str, float]]  # (keypoint_a, keypoint_b, thickness)
    wheel_radius: float  # fraction of frame height
    part_anchors: dict[str, str]  # part -> keypoint name

    def __post_init__(self):
        if len(self.tube_list) < 6:
            raise ValueError(f"{self.model_name}: frame needs >= 6 tubes")
        if self.category not in CATEGORIES:
            raise ValueError(f"{self.model_name}: unknown category {self.category}")
        for name, (x, y) in self.frame_keypoints.items():
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"{self.model_name}: keypoint {name} outside unit square")
        for a, b, t in self.tube_list:
            if a not in self.frame_keypoints or b not in self.frame_keypoints:
                raise ValueError(f"{self.model_name}: tube references unknown keypoint")
            if t <= 0:
                raise ValueError(f"{self.model_name}: non-positive tube thickness")
        for part, anchor in self.part_anchors.items():
            if part not in PART_ORDER:
                raise ValueError(f"{self.model_name}: unknown part {part}")
            if anchor not in self.frame_keypoints:
                raise ValueError(f"{self.model_name}: anchor {anchor} not a keypoint")
        if set(self.part_anchors) != set(PART_ORDER):
            raise ValueError(f"{self.model_name}: anchors must cover all parts")


def _load_library() -> dict[str, BikeModelSpec]:
    raw = json.loads(
        resources.files("bbb.synthgen").joinpath("data/models.json").read_text()
    )
    specs = {}
    for entry in raw["models"]:
        spec = BikeModelSpec(
            model_name=entry["model_name"],
            category=entry["category"],
            frame_keypoints={k: tuple(v) for k, v in entry["frame_keypoints"].items()},
            tube_list=[tuple(t) for t in entry["tube_list"]],
            wheel_radius=entry["wheel_radius"],
            part_anchors=dict(entry["part_anchors"]),
        )
        specs[spec.model_name] = spec
    return specs


_LIBRARY: dict[str, BikeModelSpec] | None = None


def model_library() -> dict[str, BikeModelSpec]:
    global _LIBRARY
    if _LIBRARY is None:
        _LIBRARY = _load_library()
    return _LIBRARY


def get_model(model_name: str) -> BikeModelSpec:
    lib = model_library()
    if model_name not in lib:
        raise ModelLookupError(model_name)
    return lib[model_name]


def model_names() -> list[str]:
    return sorted(model_library())
