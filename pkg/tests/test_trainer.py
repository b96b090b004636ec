import csv
import math

import numpy as np
import pytest
import torch
from PIL import Image

from bbb.datamodel import compute_normalization, ingest_real
from bbb.losses import LossWeights
from bbb.model import ModelConfig, TransReI3D
from bbb.domadapt import DAConfig
from bbb.synthgen.sampling import ConfigError
from bbb.trainer import (
    AugmentToggles, ImageCache, TrainConfig, Trainer, augment,
    make_batch_tensors, make_lr_schedule, pk_sample,
)


@pytest.fixture(scope="module")
def train_records(desk_splits):
    return desk_splits["train"]


@pytest.fixture(scope="module")
def normalization(train_records):
    return compute_normalization(train_records[:16])


@pytest.fixture(scope="module")
def real_records(tmp_path_factory):
    """12 fabricated labeled real photos at 64px."""
    root = tmp_path_factory.mktemp("real")
    rng = np.random.default_rng(5)
    rows = ["image,frame_label,missing"]
    labels = ["normal", "bent", "broken", "bent_broken"] * 3
    for i, lab in enumerate(labels):
        name = f"photo_{i:02d}.png"
        arr = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / name)
        rows.append(f"{name},{lab},00000")
    (root / "labels.csv").write_text("\n".join(rows) + "\n")
    return ingest_real(str(root), str(root / "labels.csv"), seed=0)


def _tiny_model(num_ids, num_models, seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig(image_size=64, patch_size=8, patch_stride=8,
                      embed_dim=16, depth=2, num_heads=2, k_groups=4,
                      num_ids=num_ids, num_models=num_models)
    return TransReI3D(cfg)


def _tiny_cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("warmup_epochs", 1)
    kw.setdefault("batch_size", 8)
    kw.setdefault("pk_p", 4)
    kw.setdefault("pk_k", 2)
    kw.setdefault("iters_per_epoch", 2)
    return TrainConfig(**kw)


class TestSchedule:
    def test_boundary_values(self):
        cfg = TrainConfig(epochs=20, warmup_epochs=5, base_lr=0.01)
        lr = make_lr_schedule(cfg)
        assert lr(0.0) == 0.0
        assert abs(lr(2.5) - 0.005) < 1e-12  # linear midway through warmup
        assert abs(lr(5.0) - 0.01) < 1e-12  # warmup complete
        assert abs(lr(12.5) - 0.005) < 1e-12  # cosine midpoint
        assert abs(lr(20.0)) < 1e-12  # decayed to zero

    def test_monotone_warmup(self):
        lr = make_lr_schedule(TrainConfig(epochs=10, warmup_epochs=4))
        pts = [lr(t) for t in np.linspace(0, 4, 20)]
        assert all(a <= b + 1e-15 for a, b in zip(pts, pts[1:]))


class TestPkSample:
    def test_structure(self, train_records):
        rng = np.random.default_rng(0)
        batch = pk_sample(train_records, P=4, K=2, rng=rng)
        assert len(batch) == 8
        ids = [r.instance_id for r in batch]
        assert len(set(ids)) == 4
        for iid in set(ids):
            assert ids.count(iid) == 2

    def test_replacement_when_id_small(self):
        rng = np.random.default_rng(1)
        from bbb.datamodel import DamageLabels, SampleRecord
        small = [SampleRecord(f"im{i}_{j}.png", i, "rondo",
                              "before", DamageLabels(), render_index=j)
                 for i in range(2) for j in range(2)]
        batch = pk_sample(small, P=2, K=4, rng=rng)
        assert len(batch) == 8  # draws with replacement inside each ID

    def test_needs_two_ids(self):
        from bbb.datamodel import DamageLabels, SampleRecord
        one = [SampleRecord("a.png", 0, "rondo", "before", DamageLabels())]
        with pytest.raises(ConfigError):
            pk_sample(one, P=2, K=2, rng=np.random.default_rng(0))


class TestAugment:
    def test_disabled_is_identity(self):
        img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
        toggles = AugmentToggles(flip=False, crop=False, blur=False, noise=False)
        out = augment(img, np.random.default_rng(1), toggles)
        assert np.array_equal(out, img)

    def test_shape_range_determinism(self):
        img = np.random.default_rng(2).random((64, 64, 3)).astype(np.float32)
        toggles = AugmentToggles()
        a = augment(img, np.random.default_rng(7), toggles)
        b = augment(img, np.random.default_rng(7), toggles)
        assert a.shape == img.shape
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert np.array_equal(a, b)
        c = augment(img, np.random.default_rng(8), toggles)
        assert not np.array_equal(a, c)


class TestBatchTensors:
    def test_normalization_applied(self, train_records, normalization):
        mean, std = normalization
        cache = ImageCache()
        batch = make_batch_tensors(train_records[:3], normalization, cache)
        raw = cache.get(train_records[0].image_ref)
        expect = ((raw - mean) / np.maximum(std, 1e-6)).transpose(2, 0, 1)
        assert np.allclose(batch["images"][0].numpy(), expect, atol=1e-6)
        assert batch["images"].shape == (3, 3, 64, 64)
        assert batch["labels"].shape == (3, 7)
        assert batch["domains"] == ["synthetic"] * 3

    def test_id_and_model_maps(self, train_records, normalization):
        ids = sorted({r.instance_id for r in train_records})
        id_map = {iid: j for j, iid in enumerate(ids)}
        batch = make_batch_tensors(train_records[:4], normalization,
                                   ImageCache(), id_map=id_map)
        for r, mapped in zip(train_records[:4], batch["ids"].tolist()):
            assert mapped == id_map[r.instance_id]


class TestTrainConfig:
    def test_pk_must_match_batch(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=32, pk_p=4, pk_k=4).validate()
        TrainConfig(mode="dd_only", batch_size=32, pk_p=4, pk_k=4).validate()

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="finetune").validate()

    def test_warmup_bound(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=5, warmup_epochs=5).validate()


class TestTrainerLoop:
    def test_baseline_epoch_metrics(self, train_records, normalization):
        n_ids = len({r.instance_id for r in train_records})
        model = _tiny_model(n_ids, 3)
        trainer = Trainer(model, _tiny_cfg(seed=1), LossWeights(), normalization)
        metrics = trainer.train_epoch(0, train_records)
        for key in ("id_global", "triplet_global", "id_local", "triplet_local",
                    "damage", "total", "lr"):
            assert key in metrics
        assert metrics["n_synth_batches"] == 2
        assert metrics["n_real_batches"] == 0
        assert math.isfinite(metrics["total"])

    def test_alternation_with_real(self, train_records, normalization,
                                   real_records):
        n_ids = len({r.instance_id for r in train_records})
        model = _tiny_model(n_ids, 3)
        cfg = _tiny_cfg(mode="bl_real", seed=2, real_repeat_factor=2)
        trainer = Trainer(model, cfg, LossWeights(), normalization)
        rt = [r for r in real_records if r.split == "real_train"]
        metrics = trainer.train_epoch(0, train_records, rt)
        expect_real = 2 * math.ceil(len(rt) / cfg.batch_size)
        assert metrics["n_real_batches"] == expect_real
        assert metrics["n_synth_batches"] == 2

    def test_real_modes_require_real(self, train_records, normalization):
        n_ids = len({r.instance_id for r in train_records})
        for mode in ("bl_real", "dann", "pada"):
            model = _tiny_model(n_ids, 3)
            da = DAConfig(mode=mode) if mode in ("dann", "pada") else None
            trainer = Trainer(model, _tiny_cfg(mode=mode), LossWeights(),
                              normalization, da)
            with pytest.raises(ConfigError):
                trainer.fit(train_records, real_records=None)

    def test_deterministic_fit(self, train_records, normalization):
        n_ids = len({r.instance_id for r in train_records})
        states = []
        for _ in range(2):
            model = _tiny_model(n_ids, 3, seed=11)
            trainer = Trainer(model, _tiny_cfg(seed=3, epochs=2),
                              LossWeights(), normalization)
            trainer.fit(train_records)
            states.append({k: v.clone() for k, v in model.state_dict().items()})
        for k in states[0]:
            assert torch.equal(states[0][k], states[1][k]), k

    def test_dann_updates_discriminator(self, train_records, normalization,
                                        real_records):
        n_ids = len({r.instance_id for r in train_records})
        model = _tiny_model(n_ids, 3)
        trainer = Trainer(model, _tiny_cfg(mode="dann", seed=4), LossWeights(),
                          normalization, DAConfig(mode="dann"))
        before = [p.clone() for p in trainer.discriminator.parameters()]
        rt = [r for r in real_records if r.split == "real_train"]
        metrics = trainer.train_epoch(0, train_records, rt)
        assert "domain" in metrics
        after = list(trainer.discriminator.parameters())
        assert any(not torch.equal(b, a) for b, a in zip(before, after))

    def test_pada_weights_refresh(self, train_records, normalization,
                                  real_records):
        n_ids = len({r.instance_id for r in train_records})
        model = _tiny_model(n_ids, 3)
        trainer = Trainer(model, _tiny_cfg(mode="pada", seed=5), LossWeights(),
                          normalization, DAConfig(mode="pada"))
        assert torch.equal(trainer.pada_weights, torch.ones(3))
        rt = [r for r in real_records if r.split == "real_train"]
        trainer.train_epoch(0, train_records, rt)
        w = trainer.pada_weights
        assert w.shape == (3,)
        assert abs(w.max().item() - 1.0) < 1e-6
        assert not torch.equal(w, torch.ones(3))

    def test_dd_only_ignores_reid(self, train_records, normalization):
        n_ids = len({r.instance_id for r in train_records})
        model = _tiny_model(n_ids, 3)
        cfg = _tiny_cfg(mode="dd_only", pk_p=2, pk_k=2, iters_per_epoch=None)
        trainer = Trainer(model, cfg, LossWeights(), normalization)
        metrics = trainer.train_epoch(0, train_records[:24])
        assert "damage" in metrics
        assert "id_global" not in metrics
