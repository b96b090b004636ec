"""Dataset schema, split policy, query/gallery construction, real-image
ingestion, label encodings, and normalization statistics."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .synthgen.geometry import PART_ORDER
from .synthgen.sampling import stable_hash

SPLITS = ("train", "val", "stress", "real_train", "real_val", "real_test")
FRAME_LABEL_MAP = {
    "normal": (0, 0),
    "bent": (1, 0),
    "broken": (0, 1),
    "bent_broken": (1, 1),
}


class PolicyError(ValueError):
    """Raised when a split policy assigns a model to conflicting roles."""


class LabelError(ValueError):
    """Raised on malformed real-image label rows."""


@dataclass(frozen=True)
class DamageLabels:
    bent: int = 0
    broken: int = 0
    missing: tuple[int, ...] = (0,) * 5  # PART_ORDER

    def __post_init__(self):
        if len(self.missing) != 5:
            raise LabelError("missing vector must have 5 entries")
        for v in (self.bent, self.broken, *self.missing):
            if v not in (0, 1):
                raise LabelError("labels must be binary")

    def as_vector(self) -> np.ndarray:
        """(bent, broken, parts...) in head order; length 7."""
        return np.array([self.bent, self.broken, *self.missing], dtype=np.float32)


@dataclass
class SampleRecord:
    image_ref: str
    instance_id: int  # -1 for real images
    model_name: str  # "unknown" for real images
    phase: str  # before / after / n/a
    labels: DamageLabels
    view_index: int = 0
    background_index: int = 0
    domain: str = "synthetic"
    split: str | None = None
    render_index: int = 0

    def __post_init__(self):
        if self.domain == "real" and self.instance_id != -1:
            raise LabelError("real records carry sentinel instance_id -1")
        if self.phase == "before" and (self.labels.bent or self.labels.broken):
            raise LabelError("before images cannot be bent or broken")


def records_from_metadata(metadata: list[dict], dataset_dir: str = "") -> list[SampleRecord]:
    out = []
    for m in metadata:
        out.append(SampleRecord(
            image_ref=os.path.join(dataset_dir, m["image"]) if dataset_dir else m["image"],
            instance_id=m["instance_id"],
            model_name=m["model"],
            phase=m["phase"],
            labels=DamageLabels(bent=m["bent"], broken=m["broken"],
                                missing=tuple(m["missing"])),
            view_index=m.get("view_index", 0),
            background_index=m.get("background_index", 0),
            domain=m.get("domain", "synthetic"),
            render_index=m.get("render_index", 0),
        ))
    return out


@dataclass
class SplitPolicy:
    train_models: list[str]
    val_seen_models: list[str] = field(default_factory=list)  # subset of train
    val_unseen_models: list[str] = field(default_factory=list)
    stress_models: list[str] = field(default_factory=list)
    val_ids_per_seen_model: int = 2
    val_images_per_id: int = 2  # lowest-index before + after render per ID
    stress_images_per_id: int = 2

    def validate(self):
        train = set(self.train_models)
        if not set(self.val_seen_models) <= train:
            raise PolicyError("val_seen_models must be a subset of train_models")
        covered = train | set(self.val_unseen_models) | set(self.stress_models)
        if set(self.stress_models) & (train | set(self.val_unseen_models)):
            raise PolicyError("stress models must be disjoint from train/val models")
        if train & set(self.val_unseen_models):
            raise PolicyError("val_unseen_models overlap train_models")
        return covered


def paper_scale_policy() -> SplitPolicy:
    """Model role assignment matching the published dataset split."""
    return SplitPolicy(
        train_models=["mfactory", "ghost", "rondo", "verdona", "oldbike",
                      "freeride", "scalpel", "domane", "g1", "kuota",
                      "holland", "huffy", "vintage", "wbike"],
        val_seen_models=["freeride", "scalpel", "domane", "g1", "kuota",
                         "holland", "huffy", "vintage", "wbike"],
        val_unseen_models=["becane", "btwin", "croad"],
        stress_models=["enduro", "mirage", "gbike"],
        val_ids_per_seen_model=16,
    )


def _reduce_images_per_id(recs: list[SampleRecord], n: int) -> list[SampleRecord]:
    """Keep n images per ID, alternating before/after, lowest render index first."""
    by_id: dict[int, list[SampleRecord]] = {}
    for r in recs:
        by_id.setdefault(r.instance_id, []).append(r)
    out = []
    for iid in sorted(by_id):
        group = by_id[iid]
        before = sorted((r for r in group if r.phase == "before"),
                        key=lambda r: r.render_index)
        after = sorted((r for r in group if r.phase == "after"),
                       key=lambda r: r.render_index)
        keep = []
        i = 0
        while len(keep) < n and (i < len(before) or i < len(after)):
            if i < len(before):
                keep.append(before[i])
            if len(keep) < n and i < len(after):
                keep.append(after[i])
            i += 1
        out.extend(keep)
    return out


def split_dataset(records: list[SampleRecord], policy: SplitPolicy,
                  seed: int) -> dict[str, list[SampleRecord]]:
    """Partition synthetic records into ID-disjoint train/val plus stress."""
    covered = policy.validate()
    models_present = {r.model_name for r in records}
    unknown = models_present - covered
    if unknown:
        raise PolicyError(f"records reference models with no policy role: {sorted(unknown)}")

    by_model: dict[str, dict[int, list[SampleRecord]]] = {}
    for r in records:
        by_model.setdefault(r.model_name, {}).setdefault(r.instance_id, []).append(r)

    train, val, stress = [], [], []
    for model in sorted(by_model):
        ids = sorted(by_model[model])
        if model in policy.stress_models:
            for iid in ids:
                stress.extend(by_model[model][iid])
        elif model in policy.val_unseen_models:
            for iid in ids:
                val.extend(by_model[model][iid])
        else:  # train model, possibly shared with val
            val_ids: set[int] = set()
            if model in policy.val_seen_models:
                rng = np.random.default_rng(stable_hash("split", seed, model))
                k = min(policy.val_ids_per_seen_model, len(ids))
                val_ids = set(rng.choice(ids, size=k, replace=False).tolist())
            for iid in ids:
                (val if iid in val_ids else train).extend(by_model[model][iid])

    val = _reduce_images_per_id(val, policy.val_images_per_id)
    stress = _reduce_images_per_id(stress, policy.stress_images_per_id)
    for r in train:
        r.split = "train"
    for r in val:
        r.split = "val"
    for r in stress:
        r.split = "stress"
    return {"train": train, "val": val, "stress": stress}


def build_query_gallery(records: list[SampleRecord]):
    """Queries = after images; gallery = one before image per ID.

    IDs without a before image are dropped (their afters excluded too);
    returns (queries, gallery, n_excluded_ids).
    """
    by_id: dict[int, list[SampleRecord]] = {}
    for r in records:
        by_id.setdefault(r.instance_id, []).append(r)

    queries, gallery = [], []
    excluded = 0
    for iid in sorted(by_id):
        group = by_id[iid]
        befores = sorted((r for r in group if r.phase == "before"),
                         key=lambda r: r.render_index)
        afters = [r for r in group if r.phase == "after"]
        if not befores or not afters:
            excluded += 1
            continue
        gallery.append(befores[0])  # lowest render index, reproducible
        queries.extend(sorted(afters, key=lambda r: r.render_index))
    return queries, gallery, excluded


def encode_missing_parts(labels: DamageLabels) -> str:
    """5-character one-hot string, '1' = missing, fixed part order."""
    return "".join(str(int(m)) for m in labels.missing)


def decode_missing_parts(s: str) -> tuple[int, ...]:
    if len(s) != 5 or any(c not in "01" for c in s):
        raise LabelError(f"malformed one-hot string {s!r}")
    return tuple(int(c) for c in s)


def ingest_real(image_dir: str, labels_file: str, seed: int = 0) -> list[SampleRecord]:
    """Load real-image labels and assign a 7:1.5:1.5 stratified split.

    labels_file is a CSV with header image,frame_label,missing where
    frame_label is one of normal/bent/broken/bent_broken and missing is a
    5-character one-hot string.
    """
    rows = []
    with open(labels_file, newline="") as f:
        for row in csv.DictReader(f):
            frame_label = row["frame_label"].strip()
            if frame_label not in FRAME_LABEL_MAP:
                raise LabelError(f"unknown frame_label {frame_label!r}")
            bent, broken = FRAME_LABEL_MAP[frame_label]
            missing = decode_missing_parts(row["missing"].strip())
            rows.append((row["image"].strip(), frame_label,
                         DamageLabels(bent=bent, broken=broken, missing=missing)))

    # stratified 7:1.5:1.5 by frame label
    records = []
    by_label: dict[str, list] = {}
    for item in rows:
        by_label.setdefault(item[1], []).append(item)
    for frame_label in sorted(by_label):
        group = by_label[frame_label]
        rng = np.random.default_rng(stable_hash("real_split", seed, frame_label))
        order = rng.permutation(len(group))
        n = len(group)
        n_train = int(round(n * 0.7))
        n_val = int(round(n * 0.15))
        for pos, gi in enumerate(order):
            image, _, labels = group[gi]
            if pos < n_train:
                split = "real_train"
            elif pos < n_train + n_val:
                split = "real_val"
            else:
                split = "real_test"
            records.append(SampleRecord(
                image_ref=os.path.join(image_dir, image),
                instance_id=-1,
                model_name="unknown",
                phase="n/a",
                labels=labels,
                domain="real",
                split=split,
            ))
    return records


def load_image(path: str) -> np.ndarray:
    """Image as float32 HxWx3 in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def compute_normalization(records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-channel population mean/std over synthetic training pixels."""
    synth = [r for r in records if r.domain == "synthetic"]
    if not synth:
        raise ValueError("normalization requires at least one synthetic image")
    s = np.zeros(3, dtype=np.float64)
    s2 = np.zeros(3, dtype=np.float64)
    count = 0
    for r in synth:
        img = load_image(r.image_ref).astype(np.float64)
        s += img.sum(axis=(0, 1))
        s2 += (img ** 2).sum(axis=(0, 1))
        count += img.shape[0] * img.shape[1]
    mean = s / count
    var = np.maximum(s2 / count - mean ** 2, 0.0)
    return mean, np.sqrt(var)


def write_splits(splits: dict[str, list[SampleRecord]], path: str):
    """Sidecar mapping image path -> split name."""
    mapping = {}
    for name, recs in splits.items():
        for r in recs:
            mapping[r.image_ref] = name
    with open(path, "w") as f:
        json.dump(mapping, f, indent=1, sort_keys=True)


def apply_splits(records: list[SampleRecord], path: str) -> dict[str, list[SampleRecord]]:
    with open(path) as f:
        mapping = json.load(f)
    out: dict[str, list[SampleRecord]] = {}
    for r in records:
        split = mapping.get(r.image_ref)
        if split is None:
            continue
        r.split = split
        out.setdefault(split, []).append(r)
    return out
