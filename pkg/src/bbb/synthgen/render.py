"""2D parametric renderer for bike instances with damage semantics.

Geometry lives in unit frame-space (y up). Rendering applies the view
transform (side flip, focal scale, camera jitter), rasterizes each part as
a distance-field mask on the pixel grid, and composes image + segmentation.
Identical inputs produce bit-identical output.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import PART_ORDER, SEGMENTATION_CLASSES, BikeModelSpec, get_model
from .sampling import (
    BikeInstance, ConfigError, DamageState, color_pool, stable_hash,
    N_DECALS,
)

BACKGROUND_MODES = ("procedural_scene", "image_pool", "uniform")

# segmentation class indices (0 = background / unlabeled)
SEG_INDEX = {name: i + 1 for i, name in enumerate(SEGMENTATION_CLASSES)}

_BASE_COLORS = color_pool()
_DECAL_COLORS = np.array(
    [[240, 240, 240], [20, 20, 20], [220, 40, 40], [40, 80, 220], [250, 210, 40],
     [40, 180, 90], [240, 130, 30], [150, 60, 200], [0, 200, 200], [250, 120, 180]],
    dtype=np.uint8)

DIRT_COLORS = {"mud": np.array([96, 70, 40], dtype=float),
               "rust": np.array([170, 75, 25], dtype=float)}


@dataclass
class ViewParams:
    side: str = "left"  # which side of the bike faces the camera
    camera_jitter: tuple[float, float] = (0.0, 0.0)
    focal_scale: float = 1.0


@dataclass
class RenderConfig:
    image_size: int = 256
    background_mode: str = "procedural_scene"
    background_pool_size: int = 11
    background_index: int = 0
    background_pool_dir: str | None = None  # required for image_pool mode
    uniform_color: tuple[int, int, int] = (200, 200, 200)
    view: ViewParams = field(default_factory=ViewParams)
    emit_segmentation: bool = True
    focal_range: tuple[float, float] = (0.85, 1.1)

    def validate(self):
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if self.background_mode not in BACKGROUND_MODES:
            raise ConfigError(f"unknown background_mode {self.background_mode}")
        if not (0 <= self.background_index < self.background_pool_size):
            raise ConfigError("background_index outside pool")
        lo, hi = self.focal_range
        if not (lo <= self.view.focal_scale <= hi):
            raise ConfigError("focal_scale outside configured range")
        if self.view.side not in ("left", "right"):
            raise ConfigError(f"unknown side {self.view.side}")


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(c, 1.0 - c)  # unit coords, y up
    return xx, yy


def _capsule(xx, yy, p0, p1, r):
    """Mask of points within distance r of segment p0-p1."""
    d = np.array(p1, dtype=float) - np.array(p0, dtype=float)
    L2 = float(d @ d)
    px = xx - p0[0]
    py = yy - p0[1]
    if L2 < 1e-12:
        return px * px + py * py <= r * r
    t = np.clip((px * d[0] + py * d[1]) / L2, 0.0, 1.0)
    dx = px - t * d[0]
    dy = py - t * d[1]
    return dx * dx + dy * dy <= r * r


def _disc(xx, yy, c, r):
    return (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= r * r


def _ellipse_ring(xx, yy, c, r, ratio, angle, width):
    """Ring of an ellipse: radius r along major axis, r*ratio along minor."""
    dx = xx - c[0]
    dy = yy - c[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = (-dx * sa + dy * ca) / max(ratio, 1e-3)
    rad = np.sqrt(u * u + v * v)
    return np.abs(rad - r) <= width


def _bend_offsets(kp: dict[str, tuple[float, float]], magnitude: float,
                  center: float) -> dict[str, tuple[float, float]]:
    """Smooth vertical displacement bump applied to all keypoints."""
    if magnitude <= 0:
        return dict(kp)
    out = {}
    for name, (x, y) in kp.items():
        dy = magnitude * np.exp(-((x - center) ** 2) / (2 * 0.03))
        out[name] = (x, y + dy)
    return out


def _transform(kp: dict, view: ViewParams) -> dict:
    out = {}
    for name, (x, y) in kp.items():
        if view.side == "right":
            x = 1.0 - x
        x = 0.5 + (x - 0.5) * view.focal_scale + view.camera_jitter[0]
        y = 0.5 + (y - 0.5) * view.focal_scale + view.camera_jitter[1]
        out[name] = (x, y)
    return out


def _frame_mask(xx, yy, spec: BikeModelSpec, kp: dict, damage: DamageState,
                scale: float):
    mask = np.zeros(xx.shape, dtype=bool)
    gap_halfwidth = 0.035
    for i, (a, b, th) in enumerate(spec.tube_list):
        p0 = np.array(kp[a])
        p1 = np.array(kp[b])
        r = th * scale
        if damage.broken and i == damage.break_site[0]:
            cut = damage.break_site[1]
            length = float(np.linalg.norm(p1 - p0))
            g = gap_halfwidth / max(length, 1e-6)
            t0 = max(cut - g, 0.0)
            t1 = min(cut + g, 1.0)
            if t0 > 0:
                mask |= _capsule(xx, yy, p0, p0 + (p1 - p0) * t0, r)
            if t1 < 1:
                mask |= _capsule(xx, yy, p0 + (p1 - p0) * t1, p1, r)
        else:
            mask |= _capsule(xx, yy, p0, p1, r)
    return mask


def _part_masks(xx, yy, spec: BikeModelSpec, kp: dict, damage: DamageState,
                view: ViewParams):
    """Boolean mask per renderable part (plus the frame)."""
    scale = view.focal_scale
    masks = {}

    for wi, part in enumerate(("front_wheel", "rear_wheel")):
        center = kp[spec.part_anchors[part]]
        r = spec.wheel_radius * scale
        ratio, angle = damage.wheel_deform_params[wi]
        if damage.deformed[wi]:
            ring = _ellipse_ring(xx, yy, center, r, ratio, angle, 0.012 * scale)
        else:
            ring = _ellipse_ring(xx, yy, center, r, 1.0, 0.0, 0.012 * scale)
        hub = _disc(xx, yy, center, 0.02 * scale)
        masks[part] = ring | hub

    masks["frame"] = _frame_mask(xx, yy, spec, kp, damage, scale)

    # crankset: chainring disc + two pedals on crank arms
    bb = np.array(kp[spec.part_anchors["pedals"]])
    pedal_tilt = 0.35 if damage.deformed[PART_ORDER.index("pedals")] else 0.0
    arm = np.array([0.055 * np.cos(pedal_tilt), 0.055 * np.sin(pedal_tilt)]) * scale
    crank = _disc(xx, yy, bb, 0.03 * scale)
    crank |= _capsule(xx, yy, bb - arm, bb + arm, 0.008 * scale)
    crank |= _disc(xx, yy, bb + arm, 0.014 * scale)
    crank |= _disc(xx, yy, bb - arm, 0.014 * scale)
    masks["crankset"] = crank

    # seat: seatpost from the seat cluster plus a saddle capsule
    seat_top = np.array(kp[spec.part_anchors["seat"]])
    cluster = np.array(kp["seat_cluster"])
    tilt = 0.3 if damage.deformed[PART_ORDER.index("seat")] else 0.0
    saddle = np.array([0.05 * np.cos(tilt), 0.05 * np.sin(tilt)]) * scale
    seat = _capsule(xx, yy, cluster, seat_top, 0.010 * scale)
    seat |= _capsule(xx, yy, seat_top - saddle, seat_top + saddle, 0.016 * scale)
    masks["seat"] = seat

    # handlebar: stem from the head tube plus the bar itself
    bar = np.array(kp[spec.part_anchors["handlebar"]])
    head = np.array(kp["head_top"])
    btilt = 0.4 if damage.deformed[PART_ORDER.index("handlebar")] else -0.15
    ext = np.array([0.045 * np.cos(btilt), 0.045 * np.sin(btilt)]) * scale
    hb = _capsule(xx, yy, head, bar, 0.010 * scale)
    hb |= _capsule(xx, yy, bar - ext, bar + ext, 0.013 * scale)
    masks["handlebar"] = hb

    return masks


def _pattern_layer(xx, yy, pattern_id: int, base: np.ndarray, accent: np.ndarray):
    """Per-pixel frame color for the 5 texture patterns."""
    h, w = xx.shape
    img = np.empty((h, w, 3), dtype=float)
    img[:] = base
    if pattern_id == 0:  # solid
        return img
    if pattern_id == 1:  # diagonal stripes
        sel = (np.floor((xx + yy) * 14).astype(int) % 2) == 0
    elif pattern_id == 2:  # vertical bands
        sel = (np.floor(xx * 10).astype(int) % 2) == 0
    elif pattern_id == 3:  # two-tone split
        sel = xx > 0.5
    else:  # dots
        gx = (xx * 24) % 1.0 - 0.5
        gy = (yy * 24) % 1.0 - 0.5
        sel = gx * gx + gy * gy < 0.06
    img[sel] = accent
    return img


def _background(cfg: RenderConfig) -> np.ndarray:
    size = cfg.image_size
    if cfg.background_mode == "uniform":
        bg = np.empty((size, size, 3), dtype=float)
        bg[:] = np.array(cfg.uniform_color, dtype=float)
        return bg
    if cfg.background_mode == "image_pool":
        if not cfg.background_pool_dir or not os.path.isdir(cfg.background_pool_dir):
            raise ConfigError("image_pool mode requires an existing background_pool_dir")
        files = sorted(
            f for f in os.listdir(cfg.background_pool_dir)
            if f.lower().endswith((".png", ".jpg", ".jpeg")))
        if not files:
            raise ConfigError("background pool directory contains no images")
        path = os.path.join(cfg.background_pool_dir,
                            files[cfg.background_index % len(files)])
        img = Image.open(path).convert("RGB").resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=float)
    # procedural_scene: gradient sky/ground plus a few fixed shapes per index
    rng = np.random.default_rng(stable_hash("background", cfg.background_index))
    top = rng.uniform(90, 230, size=3)
    bottom = rng.uniform(40, 180, size=3)
    t = np.linspace(0, 1, size)[:, None, None]
    bg = top * (1 - t) + bottom * t
    bg = np.broadcast_to(bg, (size, size, 3)).copy()
    xx, yy = _grid(size)
    for _ in range(4):
        c = rng.uniform(0.0, 1.0, size=2)
        r = rng.uniform(0.05, 0.25)
        col = rng.uniform(30, 220, size=3)
        sel = _disc(xx, yy, c, r)
        bg[sel] = 0.5 * bg[sel] + 0.5 * col
    return bg


def render_sample(instance: BikeInstance, damage: DamageState, cfg: RenderConfig,
                  seed: int, return_masks: bool = False):
    """Render one labeled image; returns (image uint8 HxWx3, seg or None)."""
    cfg.validate()
    spec = get_model(instance.model_name)
    size = cfg.image_size
    xx, yy = _grid(size)

    kp = _bend_offsets(spec.frame_keypoints, damage.bend_magnitude,
                       damage.bend_center)
    kp = _transform(kp, cfg.view)

    masks = _part_masks(xx, yy, spec, kp, damage, cfg.view)
    for i, part in enumerate(PART_ORDER):
        if damage.missing[i]:
            key = "crankset" if part == "pedals" else part
            if part == "handlebar":
                masks["handlebar"][:] = False
            else:
                masks[key][:] = False

    img = _background(cfg)

    base = _BASE_COLORS[instance.base_color].astype(float)
    accent = _BASE_COLORS[instance.pattern_color].astype(float)
    frame_colors = _pattern_layer(xx, yy, instance.pattern_id, base, accent)

    # paint order: wheels behind the frame, small parts on top
    img[masks["front_wheel"]] = [45, 45, 45]
    img[masks["rear_wheel"]] = [45, 45, 45]
    img[masks["frame"]] = frame_colors[masks["frame"]]

    # decal on the down tube, still frame-class pixels
    decal_anchor = 0.5 * (np.array(kp["bottom_bracket"]) + np.array(kp["head_bottom"]))
    decal = _disc(xx, yy, decal_anchor, 0.022 * cfg.view.focal_scale) & masks["frame"]
    img[decal] = _DECAL_COLORS[instance.decal_id % N_DECALS].astype(float)

    img[masks["crankset"]] = [90, 90, 95]
    img[masks["seat"]] = [35, 30, 30]
    img[masks["handlebar"]] = [70, 70, 75]

    bike_mask = (masks["front_wheel"] | masks["rear_wheel"] | masks["frame"]
                 | masks["crankset"] | masks["seat"] | masks["handlebar"])

    if damage.dirt != "none":
        rng = np.random.default_rng(stable_hash("dirt", seed))
        speckle = (rng.random((size, size)) < 0.25) & bike_mask
        col = DIRT_COLORS[damage.dirt]
        img[speckle] = 0.3 * img[speckle] + 0.7 * col

    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    seg = None
    if cfg.emit_segmentation:
        seg = np.zeros((size, size), dtype=np.uint8)
        # same priority order as painting
        seg[masks["front_wheel"]] = SEG_INDEX["front_wheel"]
        seg[masks["rear_wheel"]] = SEG_INDEX["rear_wheel"]
        seg[masks["frame"]] = SEG_INDEX["frame"]
        seg[masks["crankset"]] = SEG_INDEX["crankset"]
        seg[masks["seat"]] = SEG_INDEX["seat"]

    if return_masks:
        return image, seg, masks
    return image, seg
