import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bbb.model import (
    DAMAGE_HEAD_ORDER, ModelConfig, REAL_TASKS, SYNTH_TASKS, ShapeConfigError,
    TransReI3D, desk_config, load_checkpoint, paper_config, route_batch,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def small_model():
    cfg = ModelConfig(image_size=32, patch_size=8, patch_stride=8,
                      embed_dim=24, depth=3, num_heads=2, k_groups=4,
                      num_ids=5, num_models=3)
    torch.manual_seed(0)
    return TransReI3D(cfg)


class TestConfig:
    @given(st.integers(32, 256), st.integers(4, 32), st.integers(2, 32))
    @settings(max_examples=200, deadline=None)
    def test_token_count_formula(self, s, p, t):
        cfg = ModelConfig(image_size=s, patch_size=p, patch_stride=t)
        if p > s or (s - p) % t != 0:
            if p <= s:
                with pytest.raises(ShapeConfigError):
                    cfg.validate()
            return
        assert cfg.num_tokens == ((s - p) // t + 1) ** 2

    def test_desk_preset(self):
        cfg = desk_config()
        cfg.validate()
        assert (cfg.image_size, cfg.patch_size, cfg.patch_stride) == (64, 8, 8)
        assert cfg.num_tokens == 64
        assert cfg.num_tokens % cfg.k_groups == 0

    def test_paper_preset_arithmetic(self):
        cfg = paper_config(k_groups=3)
        cfg.validate()
        assert cfg.grid_size == 21
        assert cfg.num_tokens == 441
        assert cfg.embed_dim == 768 and cfg.depth == 12

    def test_invalid_combos(self):
        with pytest.raises(ShapeConfigError):
            ModelConfig(image_size=64, patch_size=8, patch_stride=6).validate()
        with pytest.raises(ShapeConfigError):
            ModelConfig(embed_dim=10, num_heads=3).validate()
        with pytest.raises(ShapeConfigError):
            ModelConfig(depth=1).validate()
        with pytest.raises(ShapeConfigError):
            # 64 tokens not divisible into 5 groups
            ModelConfig(k_groups=5).validate()


class TestForward:
    def test_shapes(self, small_model):
        m = small_model
        x = torch.randn(3, 3, 32, 32)
        cam = torch.tensor([0, 1, 0])
        out = m(x, cam, shuffle_seed=1)
        n = m.cfg.num_tokens
        assert out["encoded"].shape == (3, n + 1, 24)
        assert out["f_g"].shape == (3, 24)
        assert out["id_logits_global"].shape == (3, 5)
        assert len(out["f_l"]) == 4 and all(f.shape == (3, 24) for f in out["f_l"])
        assert out["damage_logits"].shape == (3, 7)
        assert len(DAMAGE_HEAD_ORDER) == 7

    def test_sie_changes_output(self, small_model):
        m = small_model.eval()
        x = torch.randn(2, 3, 32, 32)
        t0 = m.patchify_embed(x, torch.tensor([0, 0]))
        t1 = m.patchify_embed(x, torch.tensor([1, 1]))
        assert not torch.allclose(t0, t1)
        # difference is exactly the SIE vector, broadcast over tokens
        diff = t1 - t0
        expect = (m.sie_embed[1] - m.sie_embed[0]).expand_as(diff)
        assert torch.allclose(diff, expect, atol=1e-6)

    def test_camera_out_of_range(self, small_model):
        with pytest.raises(ShapeConfigError):
            small_model.patchify_embed(torch.randn(1, 3, 32, 32),
                                       torch.tensor([7]))

    def test_task_routing(self, small_model):
        m = small_model.eval()
        x = torch.randn(2, 3, 32, 32)
        cam = torch.zeros(2, dtype=torch.long)
        out = m(x, cam, tasks=REAL_TASKS)
        assert "damage_logits" in out
        assert "f_g" not in out and "f_l" not in out
        assert route_batch(["synthetic", "synthetic"]) == SYNTH_TASKS
        assert route_batch(["real"]) == REAL_TASKS
        with pytest.raises(ValueError):
            route_batch(["real", "synthetic"])


class TestJigsaw:
    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_permutation_is_bijection(self, seed):
        cfg = ModelConfig(image_size=32, patch_size=8, patch_stride=8,
                          embed_dim=8, depth=2, num_heads=1, k_groups=4)
        m = TransReI3D.__new__(TransReI3D)
        m.cfg = cfg
        perm = TransReI3D.jigsaw_permutation(m, seed)
        assert sorted(perm.tolist()) == list(range(cfg.num_tokens))

    def test_deterministic_given_seed(self, small_model):
        a = small_model.jigsaw_permutation(99)
        b = small_model.jigsaw_permutation(99)
        c = small_model.jigsaw_permutation(100)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_groups_partition_tokens(self, small_model):
        m = small_model
        n, k = m.cfg.num_tokens, m.cfg.k_groups
        perm = m.jigsaw_permutation(5)
        groups = [perm[j * (n // k):(j + 1) * (n // k)] for j in range(k)]
        flat = torch.cat(groups)
        assert len(flat) == n and len(set(flat.tolist())) == n

    def test_shuffle_seed_changes_features(self, small_model):
        m = small_model.eval()
        x = torch.randn(2, 3, 32, 32)
        cam = torch.zeros(2, dtype=torch.long)
        with torch.no_grad():
            a = m(x, cam, shuffle_seed=1)["f_l"]
            b = m(x, cam, shuffle_seed=2)["f_l"]
        assert any(not torch.allclose(x1, x2) for x1, x2 in zip(a, b))


class TestInference:
    def test_embedding_normalized_and_deterministic(self, small_model):
        m = small_model.eval()
        x = torch.randn(3, 3, 32, 32)
        cam = torch.zeros(3, dtype=torch.long)
        e1 = m.inference_embedding(x, cam)
        e2 = m.inference_embedding(x, cam)
        assert torch.equal(e1, e2)
        assert e1.shape == (3, 24 * 5)  # f_g + 4 local features
        assert torch.allclose(e1.norm(dim=1), torch.ones(3), atol=1e-5)

    def test_global_only_embedding(self, small_model):
        e = small_model.inference_embedding(torch.randn(2, 3, 32, 32),
                                            torch.zeros(2, dtype=torch.long),
                                            use_local=False)
        assert e.shape == (2, 24)


class TestCheckpoint:
    def test_roundtrip(self, small_model, tmp_path):
        path = str(tmp_path / "ckpt.pt")
        norm = (np.array([0.5, 0.4, 0.3]), np.array([0.2, 0.2, 0.2]))
        save_checkpoint(path, small_model, norm, extra={"note": 1})
        model, payload = load_checkpoint(path)
        assert payload["format_version"] == 1
        assert payload["normalization_mean"] == [0.5, 0.4, 0.3]
        assert payload["extra"] == {"note": 1}
        x = torch.randn(2, 3, 32, 32)
        cam = torch.zeros(2, dtype=torch.long)
        small_model.eval()
        assert torch.allclose(model.inference_embedding(x, cam),
                              small_model.inference_embedding(x, cam))

    def test_version_mismatch(self, small_model, tmp_path):
        path = str(tmp_path / "bad.pt")
        save_checkpoint(path, small_model)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)
