from .geometry import (
    PART_ORDER, SEGMENTATION_CLASSES, BikeModelSpec, ModelLookupError,
    get_model, model_library, model_names,
)
from .sampling import (
    BikeInstance, ConfigError, DamageProbabilities, DamageState,
    sample_damage, sample_instance, stable_hash,
)
from .render import RenderConfig, SEG_INDEX, ViewParams, render_sample
from .dataset import GeneratorConfig, generate_dataset, load_metadata

__all__ = [
    "PART_ORDER", "SEGMENTATION_CLASSES", "BikeModelSpec", "ModelLookupError",
    "get_model", "model_library", "model_names",
    "BikeInstance", "ConfigError", "DamageProbabilities", "DamageState",
    "sample_damage", "sample_instance", "stable_hash",
    "RenderConfig", "SEG_INDEX", "ViewParams", "render_sample",
    "GeneratorConfig", "generate_dataset", "load_metadata",
]
