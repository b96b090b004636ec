"""Training loop: PK identity sampling, real/synthetic batch alternation,
augmentation, SGD with warmup + cosine schedule, optional domain adaptation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .datamodel import SampleRecord, load_image
from .domadapt import (
    DAConfig, DomainDiscriminator, ModelClassifier, domain_loss,
    gradient_reversal, model_classification_loss, neutral_weights,
    pada_class_weights,
)
from .losses import LossWeights, total_loss
from .model import TransReI3D, route_batch
from .synthgen.sampling import ConfigError, stable_hash

log = logging.getLogger(__name__)

MODES = ("bl", "bl_real", "dann", "pada", "reid_only", "dd_only")


@dataclass
class AugmentToggles:
    flip: bool = True
    crop: bool = True
    blur: bool = True
    noise: bool = True
    crop_scale_min: float = 0.8
    blur_prob: float = 0.2
    noise_sigma: float = 0.02

    def any(self) -> bool:
        return self.flip or self.crop or self.blur or self.noise


@dataclass
class TrainConfig:
    mode: str = "bl"
    epochs: int = 20
    batch_size: int = 32
    pk_p: int = 8
    pk_k: int = 4
    base_lr: float = 0.01
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    real_repeat_factor: int = 2
    use_real_labels: bool = True
    iters_per_epoch: int | None = None  # default: one PK pass over all IDs
    augment: AugmentToggles = field(default_factory=AugmentToggles)
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode}")
        if self.mode != "dd_only" and self.pk_p * self.pk_k != self.batch_size:
            raise ConfigError("P*K must equal batch_size")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigError("warmup_epochs must be < epochs")


def make_lr_schedule(cfg: TrainConfig):
    """Linear warmup to base_lr over warmup_epochs, then cosine decay to 0."""
    base, warm, total = cfg.base_lr, cfg.warmup_epochs, cfg.epochs

    def lr(t: float) -> float:
        if t < warm:
            return base * t / warm
        return base * 0.5 * (1.0 + math.cos(math.pi * (t - warm) / (total - warm)))

    return lr


def pk_sample(records: list[SampleRecord], P: int, K: int,
              rng: np.random.Generator) -> list[SampleRecord]:
    """One batch of P distinct IDs x K images (with replacement if an ID has
    fewer than K images); guarantees valid triplets when P, K >= 2."""
    by_id: dict[int, list[SampleRecord]] = {}
    for r in records:
        by_id.setdefault(r.instance_id, []).append(r)
    ids = sorted(by_id)
    if len(ids) < 2:
        raise ConfigError("PK sampling needs >= 2 IDs")
    chosen = rng.choice(ids, size=min(P, len(ids)), replace=False)
    batch = []
    for iid in chosen:
        group = sorted(by_id[iid], key=lambda r: r.image_ref)
        replace = len(group) < K
        idx = rng.choice(len(group), size=K, replace=replace)
        batch.extend(group[i] for i in idx)
    return batch


def augment(image: np.ndarray, rng: np.random.Generator,
            toggles: AugmentToggles) -> np.ndarray:
    """Color/texture-preserving augmentation on a HxWx3 float image in [0,1].

    Applied before normalization; never introduces a color shift.
    """
    out = image
    if toggles.flip and rng.random() < 0.5:
        out = out[:, ::-1]
    if toggles.crop:
        s = float(rng.uniform(toggles.crop_scale_min, 1.0))
        size = out.shape[0]
        crop = max(int(round(size * s)), 1)
        if crop < size:
            y0 = int(rng.integers(0, size - crop + 1))
            x0 = int(rng.integers(0, size - crop + 1))
            window = out[y0:y0 + crop, x0:x0 + crop]
            zoom = size / crop
            out = ndimage.zoom(window, (zoom, zoom, 1.0), order=1,
                               grid_mode=True, mode="nearest")
            out = out[:size, :size]
    if toggles.blur and rng.random() < toggles.blur_prob:
        sigma = float(rng.uniform(0.4, 1.0))
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0))
    if toggles.noise:
        out = out + rng.normal(0.0, toggles.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


class ImageCache:
    """In-memory image store; desk-scale datasets fit comfortably."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = load_image(path)
        return self._cache[path]


def make_batch_tensors(records: list[SampleRecord], normalization, cache: ImageCache,
                       rng: np.random.Generator | None = None,
                       toggles: AugmentToggles | None = None,
                       id_map: dict[int, int] | None = None,
                       model_map: dict[str, int] | None = None) -> dict:
    """Load, optionally augment, and normalize one batch into tensors."""
    mean, std = normalization
    imgs, cams, ids, labels, model_ids = [], [], [], [], []
    for r in records:
        img = cache.get(r.image_ref)
        if rng is not None and toggles is not None and toggles.any():
            img = augment(img, rng, toggles)
        img = (img - mean) / np.maximum(std, 1e-6)
        imgs.append(img.transpose(2, 0, 1))
        cams.append(r.view_index)
        ids.append(id_map.get(r.instance_id, 0) if id_map else 0)
        labels.append(r.labels.as_vector())
        model_ids.append(model_map.get(r.model_name, 0) if model_map else 0)
    return {
        "images": torch.from_numpy(np.stack(imgs).astype(np.float32)),
        "camera_index": torch.tensor(cams, dtype=torch.long),
        "ids": torch.tensor(ids, dtype=torch.long),
        "labels": torch.from_numpy(np.stack(labels)),
        "model_ids": torch.tensor(model_ids, dtype=torch.long),
        "domains": [r.domain for r in records],
    }


def _mode_tasks(mode: str, tasks: frozenset) -> frozenset:
    if mode == "reid_only":
        return tasks - {"damage"}
    if mode == "dd_only":
        return tasks & {"damage"}
    return tasks


def _chunk(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size) if seq[i:i + size]]


class Trainer:
    def __init__(self, model: TransReI3D, cfg: TrainConfig,
                 loss_weights: LossWeights, normalization,
                 da_cfg: DAConfig | None = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.weights = loss_weights
        self.normalization = normalization
        self.da_cfg = da_cfg or DAConfig()
        self.cache = ImageCache()
        self.schedule = make_lr_schedule(cfg)

        params = list(model.parameters())
        self.discriminator = None
        self.model_classifier = None
        if self.da_cfg.mode != "off":
            d = model.cfg.embed_dim
            self.discriminator = DomainDiscriminator(d)
            params += list(self.discriminator.parameters())
            if self.da_cfg.mode == "pada":
                self.model_classifier = ModelClassifier(d, model.cfg.num_models)
                params += list(self.model_classifier.parameters())
        self.pada_weights = neutral_weights(model.cfg.num_models)
        self.optimizer = torch.optim.SGD(params, lr=cfg.base_lr,
                                         momentum=cfg.momentum,
                                         weight_decay=cfg.weight_decay)

    # --- helpers ---------------------------------------------------------
    def _attach_features(self, outputs):
        if self.da_cfg.attach_point == "backbone_cls":
            return outputs["backbone_cls"]
        return self.model.damage_branch_cls(outputs["encoded"])

    def _set_lr(self, t: float) -> float:
        lr = self.schedule(t)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        return lr

    def _da_terms(self, outputs, batch, is_real: bool):
        """Adversarial + auxiliary-model losses for one batch."""
        feats = gradient_reversal(self._attach_features(outputs), self.da_cfg.iota)
        dom_labels = torch.full((feats.shape[0],), 1.0 if is_real else 0.0)
        w = None
        if self.da_cfg.mode == "pada" and not is_real:
            w = self.pada_weights[batch["model_ids"]]
        l_dmn = domain_loss(self.discriminator(feats), dom_labels, w)
        l_mdl = None
        if self.model_classifier is not None and not is_real:
            # supervised head sees clean (non-reversed) features
            logits = self.model_classifier(self._attach_features(outputs))
            l_mdl = model_classification_loss(
                logits, batch["model_ids"], batch["domains"],
                self.pada_weights[batch["model_ids"]])
        return l_dmn, l_mdl

    def _refresh_pada_weights(self, real_batches):
        if self.da_cfg.mode != "pada" or self.model_classifier is None:
            return
        preds = []
        self.model.eval()
        with torch.no_grad():
            for batch in real_batches:
                outputs = self.model(batch["images"], batch["camera_index"],
                                     tasks=frozenset({"damage"}))
                logits = self.model_classifier(self._attach_features(outputs))
                preds.append(torch.softmax(logits, dim=1))
        self.model.train()
        if preds:
            self.pada_weights = pada_class_weights(torch.cat(preds))
        else:
            self.pada_weights = neutral_weights(self.model.cfg.num_models)
        log.info("pada weights refreshed: %s", self.pada_weights.tolist())

    def _synth_batches(self, records, epoch):
        cfg = self.cfg
        rng = np.random.default_rng(stable_hash("synth", cfg.seed, epoch))
        if cfg.mode == "dd_only":
            order = rng.permutation(len(records))
            return _chunk([records[i] for i in order], cfg.batch_size)
        ids = {r.instance_id for r in records}
        iters = cfg.iters_per_epoch or max(1, math.ceil(len(ids) / cfg.pk_p))
        return [pk_sample(records, cfg.pk_p, cfg.pk_k, rng) for _ in range(iters)]

    def _real_batches(self, records, epoch):
        cfg = self.cfg
        if not records:
            return []
        rng = np.random.default_rng(stable_hash("real", cfg.seed, epoch))
        out = []
        for rep in range(cfg.real_repeat_factor):
            order = rng.permutation(len(records))
            out.extend(_chunk([records[i] for i in order], cfg.batch_size))
        return out

    # --- main loop -------------------------------------------------------
    def train_epoch(self, epoch: int, synth_records: list[SampleRecord],
                    real_records: list[SampleRecord] | None = None) -> dict:
        cfg = self.cfg
        self.model.train()
        aug_rng = np.random.default_rng(stable_hash("augment", cfg.seed, epoch))

        synth_plan = self._synth_batches(synth_records, epoch)
        real_plan = self._real_batches(real_records or [], epoch)
        use_real = cfg.mode in ("bl_real", "dann", "pada") and real_plan

        plan = []
        n = max(len(synth_plan), len(real_plan) if use_real else 0)
        exhausted_logged = False
        for i in range(n):
            if i < len(synth_plan):
                plan.append(("synthetic", synth_plan[i]))
            if use_real and i < len(real_plan):
                plan.append(("real", real_plan[i]))
            elif use_real and not exhausted_logged:
                log.info("real batches exhausted at step %d; continuing synthetic-only", i)
                exhausted_logged = True

        id_map = {iid: j for j, iid in
                  enumerate(sorted({r.instance_id for r in synth_records}))}
        model_map = {name: j for j, name in
                     enumerate(sorted({r.model_name for r in synth_records}))}

        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        last_lr = 0.0
        for step, (kind, recs) in enumerate(plan):
            t = epoch + (step + 1) / max(len(plan), 1)
            last_lr = self._set_lr(min(t, cfg.epochs))
            is_real = kind == "real"
            batch = make_batch_tensors(
                recs, self.normalization, self.cache,
                rng=aug_rng, toggles=None if is_real else cfg.augment,
                id_map=id_map, model_map=model_map)
            tasks = _mode_tasks(cfg.mode, route_batch(batch["domains"]))
            shuffle_seed = stable_hash("jpm", cfg.seed, epoch, step)
            outputs = self.model(batch["images"], batch["camera_index"],
                                 shuffle_seed=shuffle_seed, tasks=tasks)

            if is_real and not cfg.use_real_labels:
                loss = torch.zeros(())
                breakdown = {"total": 0.0}
            else:
                loss, breakdown = total_loss(outputs, batch["ids"], batch["labels"],
                                             self.weights,
                                             "real" if is_real else "synthetic")

            if self.da_cfg.mode != "off" and "damage" in tasks:
                l_dmn, l_mdl = self._da_terms(outputs, batch, is_real)
                loss = loss + self.da_cfg.theta * l_dmn
                breakdown["domain"] = float(l_dmn.detach())
                if l_mdl is not None:
                    loss = loss + self.da_cfg.delta * l_mdl
                    breakdown["model_cls"] = float(l_mdl.detach())

            self.optimizer.zero_grad()
            if loss.requires_grad:
                loss.backward()
                self.optimizer.step()

            for key, val in breakdown.items():
                sums[key] = sums.get(key, 0.0) + val
                counts[key] = counts.get(key, 0) + 1

        self._refresh_pada_weights(
            [make_batch_tensors(b, self.normalization, self.cache)
             for b in real_plan[:8]] if self.da_cfg.mode == "pada" else [])

        metrics = {k: sums[k] / counts[k] for k in sums}
        metrics["lr"] = last_lr
        metrics["n_synth_batches"] = len(synth_plan)
        metrics["n_real_batches"] = len(real_plan) if use_real else 0
        return metrics

    def fit(self, synth_records, real_records=None) -> list[dict]:
        if self.cfg.mode in ("dann", "pada", "bl_real") and not real_records:
            raise ConfigError(f"mode {self.cfg.mode} requires real data")
        history = []
        for epoch in range(self.cfg.epochs):
            metrics = self.train_epoch(epoch, synth_records, real_records)
            metrics["epoch"] = epoch
            history.append(metrics)
            log.info("epoch %d: %s", epoch,
                     {k: round(v, 4) if isinstance(v, float) else v
                      for k, v in metrics.items()})
        return history
